use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[corpus]
train = 12
test = 8
resolution = 8
seed = 3

[network]
resolution = 8
base_channels = 4
channel_mult = [1, 2]
attention_resolutions = [4]
heads = 2
norm_groups = 2
text_dim = 8
text_heads = 2
text_layers = 1
text_len = 16

[base]
batch_size = 2
grad_accumulation = 1
max_steps = 2

[prompt]
batch_size = 2
grad_accumulation = 1
max_steps = 2

[baseline]
batch_size = 2
grad_accumulation = 1
max_steps = 2

[sampler]
steps = 2

[eval]
records = 3
ablation_variants = 2
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn pd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pd"))
            .args(args)
            .env("PD_RUNS_DIR", self.runs())
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    /// Runs `pd` and asserts the exit code.
    fn expect(&self, code: i32, args: &[&str]) -> Output {
        let out = self.pd(args);
        assert_eq!(
            out.status.code(),
            Some(code),
            "pd {args:?}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn ok(&self, args: &[&str]) -> String {
        String::from_utf8(self.expect(0, args).stdout).unwrap()
    }

    /// A tiny run with a corpus and both phases trained.
    fn trained(&self, name: &str) -> PathBuf {
        let base = ["--config", "tiny.toml", "--run", name];
        self.ok(&[&base[..], &["gen-data"]].concat());
        let run = ["--run", name];
        self.ok(&[&run[..], &["train", "--phase", "base"]].concat());
        self.ok(&[&run[..], &["train", "--phase", "prompt"]].concat());
        self.runs().join(name)
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest_hash(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("manifest sha256 "))
        .unwrap()
        .to_string()
}

fn corpus_file(run: &Path, split: &str, id: u64, name: &str) -> String {
    run.join("corpus").join(split).join(id.to_string()).join(name).display().to_string()
}

#[test]
fn gen_data_counts_records_and_is_reproducible() {
    let env = Env::new();
    let out = env.ok(&["--run", "full", "gen-data", "--seed", "7", "--train", "4096", "--test", "512"]);
    assert!(out.contains("4608 records (4096 train, 512 test)"), "{out}");
    let manifest = fs::read_to_string(env.runs().join("full/corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4608);

    let first = manifest_hash(&env.ok(&["--config", "tiny.toml", "--run", "a", "gen-data"]));
    let again = manifest_hash(&env.ok(&["--config", "tiny.toml", "--run", "b", "gen-data"]));
    assert_eq!(first, again);
    let out = env.expect(2, &["--run", "a", "gen-data"]);
    assert!(stderr(&out).contains("exists"), "{}", stderr(&out));
    assert_eq!(manifest_hash(&env.ok(&["--run", "a", "gen-data", "--force"])), first);
    let other = manifest_hash(&env.ok(&["--run", "a", "gen-data", "--force", "--seed", "4"]));
    assert_ne!(other, first);
}

#[test]
fn usage_errors_exit_with_one() {
    let env = Env::new();
    env.expect(1, &["frobnicate"]);
    env.expect(1, &["--config", "tiny.toml", "gen-data", "--train", "0"]);
    env.expect(1, &["train"]);
    env.expect(1, &["--config", "missing.toml", "gen-data"]);
    env.expect(0, &["--help"]);
}

#[test]
fn training_reports_defaults_and_names_missing_prerequisites() {
    let env = Env::new();
    let out = env.expect(2, &["--config", "tiny.toml", "--run", "t", "train", "--phase", "base"]);
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
    env.ok(&["--run", "t", "gen-data"]);
    let out = env.expect(2, &["--run", "t", "train", "--phase", "prompt"]);
    assert!(stderr(&out).contains("base checkpoint"), "{}", stderr(&out));

    // a fresh run with default settings prints the default optimizer setup
    let out = env.pd(&["--run", "d", "train", "--phase", "prompt"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("learning rate 1e-4"), "{text}");
    assert!(text.contains("x 4 accumulated"), "{text}");

    let out = env.ok(&["--run", "t", "train", "--phase", "base", "--steps", "1"]);
    assert!(out.contains("step 1 loss"), "{out}");
    assert!(env.runs().join("t/checkpoints/base-last.ckpt").exists());
    let config = fs::read_to_string(env.runs().join("t/config.toml")).unwrap();
    assert!(config.contains("max_steps = 1"), "{config}");
    env.ok(&["--run", "t", "train", "--phase", "base", "--steps", "2", "--resume"]);
    let log = fs::read_to_string(env.runs().join("t/logs/base.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let base = env.runs().join("t/checkpoints/base-last.ckpt").display().to_string();
    let out = env.ok(&["--run", "t", "train", "--phase", "prompt", "--base", &base]);
    assert!(out.contains("prompt-last.ckpt"), "{out}");
}

#[test]
fn sampling_writes_indexed_files_and_provenance() {
    let env = Env::new();
    let run = env.trained("s");
    let src = corpus_file(&run, "train", 0, "image.png");
    let tgt = corpus_file(&run, "train", 0, "depth.png");
    let query = corpus_file(&run, "test", 12, "image.png");
    let base = ["--run", "s", "sample", "--example-src", &src, "--example-tgt", &tgt, "--query", &query];

    let out = env.ok(&[&base[..], &["--text", "a red circle", "--n", "4", "--seed", "9"]].concat());
    assert_eq!(out.lines().count(), 4);
    for i in 0..4 {
        assert!(run.join(format!("samples/prompt-sample-s9-{i:02}.png")).exists());
    }
    let prov: Value = serde_json::from_slice(&fs::read(run.join("samples/prompt-sample-s9.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 9);
    assert_eq!(prov["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(prov["checkpoint_sha256"].as_str().unwrap().len(), 64);
    assert!(prov["config"]["network"].is_object());

    // without guidance the text cannot matter
    let a = env.dir.path().join("a");
    let b = env.dir.path().join("b");
    let w0 = ["--w", "0", "--seed", "5", "--out"];
    env.ok(&[&base[..], &["--text", "a red circle"], &w0[..], &[a.to_str().unwrap()]].concat());
    env.ok(&[&base[..], &["--text", "a blue square"], &w0[..], &[b.to_str().unwrap()]].concat());
    assert_eq!(
        fs::read(a.join("prompt-sample-s5-00.png")).unwrap(),
        fs::read(b.join("prompt-sample-s5-00.png")).unwrap()
    );

    let out = env.expect(1, &["--run", "s", "sample", "--example-src", &src, "--example-tgt", &tgt, "--text", "x"]);
    assert!(stderr(&out).contains("--query"), "{}", stderr(&out));
    let out = env.expect(2, &[&base[..7], &["--query", "nope.png", "--text", "x"]].concat());
    assert!(stderr(&out).contains("--query nope.png"), "{}", stderr(&out));

    let big = env.dir.path().join("big.png");
    prompt_diffusion::imageio::write_png(&big, &prompt_diffusion::corpus::Image::filled(16, [0.0; 3])).unwrap();
    let out = env.expect(2, &[&base[..7], &["--query", big.to_str().unwrap(), "--text", "x"]].concat());
    assert!(stderr(&out).contains("expects 8x8"), "{}", stderr(&out));
}

#[test]
fn evaluation_baseline_and_ablation_reports() {
    let env = Env::new();
    let run = env.trained("e");

    let out = env.ok(&["--run", "e", "eval", "--tasks", "all-train"]);
    let report: Value = serde_json::from_slice(&fs::read(run.join("reports/prompt-all-train-s0.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(out.contains("inv-depth") && out.contains("fwd-segmentation"), "{out}");
    assert!(rows.iter().all(|r| r["records"] == 3));
    assert_eq!(report["sampler"]["steps"], 2);
    assert!(report["config"]["eval"].is_object());

    env.ok(&["--run", "e", "eval", "--tasks", "held-out"]);
    let held: Value = serde_json::from_slice(&fs::read(run.join("reports/prompt-held-out-s0.json")).unwrap()).unwrap();
    let row = &held["rows"][0];
    assert_eq!(row["task"], "inv-canny");
    assert!(row["cycle"].is_number() && row["control"].is_number() && row["p_value"].is_number());

    env.ok(&["--run", "e", "eval", "--tasks", "fwd-hed,inv-segmentation", "--model", "untrained", "--records", "2"]);
    assert!(run.join("reports/untrained-fwd-hed+inv-segmentation-s0.json").exists());
    env.expect(1, &["--run", "e", "eval", "--tasks", "fwd-hed,bogus"]);

    env.ok(&["--run", "e", "train", "--phase", "baseline"]);
    let out = env.ok(&["--run", "e", "baseline"]);
    assert!(out.contains("baseline degradation"), "{out}");
    let contrast: Value = serde_json::from_slice(&fs::read(run.join("reports/baseline-contrast-s0.json")).unwrap()).unwrap();
    assert_eq!(contrast["own_task"], "inv-depth");
    assert_eq!(contrast["baseline"].as_object().unwrap().len(), 3);

    let out = env.ok(&["--run", "e", "ablate", "--modes", "a,b,c,d"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("mode ")).count(), 4, "{out}");
    for m in ['a', 'b', 'c', 'd'] {
        assert!(run.join(format!("samples/prompt-inv-depth-ablate-{m}-s0.png")).exists());
    }
    env.expect(1, &["--run", "e", "ablate", "--modes", "a,e"]);
}

#[test]
fn rerunning_from_the_stored_config_reproduces_outputs() {
    let env = Env::new();
    let first = env.trained("r1");
    let stored = first.join("config.toml").display().to_string();
    env.ok(&["--config", &stored, "--run", "r2", "gen-data"]);
    env.ok(&["--run", "r2", "train", "--phase", "base"]);
    env.ok(&["--run", "r2", "train", "--phase", "prompt"]);
    let second = env.runs().join("r2");
    for f in ["logs/base.jsonl", "logs/prompt.jsonl"] {
        let strip = |p: &Path| -> Vec<Value> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut v: Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("elapsed_s");
                    v
                })
                .collect()
        };
        assert_eq!(strip(&first.join(f)), strip(&second.join(f)), "{f}");
    }
    for f in ["checkpoints/base-last.ckpt", "checkpoints/prompt-last.ckpt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

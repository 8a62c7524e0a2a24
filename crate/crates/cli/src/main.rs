use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use prompt_diffusion::checkpoint::{file_hash, weights_hash, Checkpoint};
use prompt_diffusion::config::RunConfig;
use prompt_diffusion::corpus::{build_corpus, AccessMode};
use prompt_diffusion::diffusion::chain_seed;
use prompt_diffusion::evalsuite::{AblationMode, EvalReport, ImageGenerator, ModelGenerator};
use prompt_diffusion::imageio;
use prompt_diffusion::network::Phase;
use prompt_diffusion::pipeline::{runs_root, write_atomic, ModelKind, Run, CONFIG_FILE};
use prompt_diffusion::prompting::{Direction, TaskId, TextGuidance, VisionLanguagePrompt};
use prompt_diffusion::trainer::TrainConfig;

#[derive(Parser)]
#[command(name = "pd", version, about = "Prompt-conditioned diffusion on a procedural shapes corpus")]
struct Cli {
    /// Run name. Artifacts live in $PD_RUNS_DIR/<name> (default runs/<name>).
    #[arg(long, global = true)]
    run: Option<String>,
    /// Config file. Defaults to the run's stored config, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the corpus to disk.
    GenData(GenDataArgs),
    /// Train the base model, the prompt model or the single-task baseline.
    Train(TrainArgs),
    /// Generate images from an image prompt and text.
    Sample(SampleArgs),
    /// Score a model on tasks of the test split.
    Eval(EvalArgs),
    /// Compare the single-task baseline with the joint model across inverse tasks.
    Baseline(SamplerFlags),
    /// Vary one prompt component at a time and write contact sheets.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Replace an existing corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Base,
    Prompt,
    Baseline,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Optimizer updates for the phase.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Minibatches accumulated per update.
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base checkpoint for the prompt and baseline phases.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Continue from the phase's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Clone)]
struct SamplerFlags {
    /// Guidance scale.
    #[arg(long)]
    w: Option<f32>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Prompt,
    Untrained,
    Baseline,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Prompt => ModelKind::Prompt,
            ModelArg::Untrained => ModelKind::Untrained,
            ModelArg::Baseline => ModelKind::Baseline,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    example_src: Option<PathBuf>,
    #[arg(long)]
    example_tgt: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, value_enum, default_value = "prompt")]
    model: ModelArg,
    /// Sample from this prompt-phase checkpoint instead of the run's model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default: the run's samples/).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// all-train, held-out, or a comma-separated task list such as inv-depth,fwd-hed.
    #[arg(long, default_value = "all-train")]
    tasks: String,
    #[arg(long, value_enum, default_value = "prompt")]
    model: ModelArg,
    /// Test records per task.
    #[arg(long)]
    records: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated ablation modes.
    #[arg(long, default_value = "a,b,c,d")]
    modes: String,
    #[arg(long, value_enum, default_value = "prompt")]
    model: ModelArg,
    /// Inverse task to ablate.
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

/// Exit status 1: the invocation itself is wrong. Other errors exit with 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// The run's config: `--config`, else the stored one, else defaults; `--run`
/// renames it.
fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match (&cli.config, &cli.run) {
        (Some(path), _) => RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        (None, Some(name)) if runs_root().join(name).join(CONFIG_FILE).exists() => {
            let path = runs_root().join(name).join(CONFIG_FILE);
            RunConfig::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        _ => RunConfig::default(),
    };
    if let Some(name) = &cli.run {
        config.name = name.clone();
    }
    Ok(config)
}

fn create_run(config: RunConfig) -> anyhow::Result<Run> {
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Run::create(&runs_root(), config)?)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::GenData(args) => gen_data(config, args),
        Command::Train(args) => train(config, args),
        Command::Sample(args) => sample(config, args),
        Command::Eval(args) => eval(config, args),
        Command::Baseline(flags) => baseline(config, flags),
        Command::Ablate(args) => ablate(config, args),
    }
}

fn gen_data(mut config: RunConfig, args: GenDataArgs) -> anyhow::Result<()> {
    let c = &mut config.corpus;
    c.seed = args.seed.unwrap_or(c.seed);
    c.train = args.train.unwrap_or(c.train);
    c.test = args.test.unwrap_or(c.test);
    if let Some(r) = args.resolution {
        c.resolution = r;
        config.network.resolution = r;
    }
    let run = create_run(config)?;
    let dir = run.corpus_dir();
    let summary = build_corpus(&run.config.corpus, &dir, args.force)?;
    println!(
        "corpus {}: {} records ({} train, {} test) at {}x{}",
        dir.display(),
        summary.records,
        summary.train,
        summary.test,
        summary.resolution,
        summary.resolution
    );
    println!("fingerprint {}", summary.fingerprint);
    println!("manifest sha256 {}", file_hash(&dir.join("manifest.jsonl"))?);
    Ok(())
}

fn train(mut config: RunConfig, args: TrainArgs) -> anyhow::Result<()> {
    let section: &mut TrainConfig = match args.phase {
        PhaseArg::Base => &mut config.base,
        PhaseArg::Prompt => &mut config.prompt,
        PhaseArg::Baseline => &mut config.baseline,
    };
    section.max_steps = args.steps.unwrap_or(section.max_steps);
    section.learning_rate = args.lr.unwrap_or(section.learning_rate);
    section.batch_size = args.batch.unwrap_or(section.batch_size);
    section.grad_accumulation = args.accum.unwrap_or(section.grad_accumulation);
    section.seed = args.seed.unwrap_or(section.seed);
    let shown = section.clone();
    if args.base.is_some() && matches!(args.phase, PhaseArg::Base) {
        return Err(usage("--base applies to the prompt and baseline phases"));
    }
    let run = create_run(config)?;
    let phase = match args.phase {
        PhaseArg::Base => "base",
        PhaseArg::Prompt => "prompt",
        PhaseArg::Baseline => "baseline",
    };
    println!(
        "{phase}: learning rate {:e}, batch {} x {} accumulated, {} steps",
        shown.learning_rate, shown.batch_size, shown.grad_accumulation, shown.max_steps
    );
    let outcome = match args.phase {
        PhaseArg::Base => run.train_base(args.resume)?,
        PhaseArg::Prompt => run.train_prompt(args.base.as_deref(), args.resume)?,
        PhaseArg::Baseline => run.train_baseline(args.base.as_deref(), args.resume)?,
    };
    let log = prompt_diffusion::trainer::read_log(&outcome.log_path)?;
    if let Some(last) = log.last() {
        println!("step {} loss {:.5}", last.step, last.loss);
    }
    println!("checkpoint {}", outcome.checkpoint_path.display());
    Ok(())
}

fn apply_sampler(config: &mut RunConfig, flags: &SamplerFlags) {
    let s = &mut config.sampler;
    s.guidance_scale = flags.w.unwrap_or(s.guidance_scale);
    s.steps = flags.steps.unwrap_or(s.steps);
    s.seed = flags.seed.unwrap_or(s.seed);
    config.eval.seed = flags.seed.unwrap_or(config.eval.seed);
}

fn read_prompt_image(field: &str, path: &Option<PathBuf>) -> anyhow::Result<(PathBuf, prompt_diffusion::corpus::Image)> {
    let path = path.clone().ok_or_else(|| usage(format!("missing --{field}")))?;
    let image = imageio::read_png(&path).with_context(|| format!("--{field} {}", path.display()))?;
    Ok((path, image))
}

fn sample(mut config: RunConfig, args: SampleArgs) -> anyhow::Result<()> {
    let (src_path, src) = read_prompt_image("example-src", &args.example_src)?;
    let (tgt_path, tgt) = read_prompt_image("example-tgt", &args.example_tgt)?;
    let (query_path, query) = read_prompt_image("query", &args.query)?;
    let text = args.text.clone().ok_or_else(|| usage("missing --text"))?;
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    apply_sampler(&mut config, &args.sampler);
    let run = create_run(config)?;
    let kind = ModelKind::from(args.model);
    let (ckpt, ckpt_path) = match &args.checkpoint {
        Some(p) => {
            let mut c = Checkpoint::load_phase(p, Phase::Prompt).with_context(|| format!("--checkpoint {}", p.display()))?;
            c.model = c.inference_model();
            (c, p.clone())
        }
        None => (run.model(kind)?, run.checkpoint_path(kind)),
    };
    let res = ckpt.model.config.resolution;
    for (field, im) in [("example-src", &src), ("example-tgt", &tgt), ("query", &query)] {
        if im.size() != res {
            return Err(anyhow!("--{field} is {0}x{0} but the checkpoint expects {res}x{res}", im.size()));
        }
    }
    let prompt = VisionLanguagePrompt {
        text: TextGuidance::Caption(text.clone()),
        example_source: src,
        example_target: tgt,
        query,
    };
    let sampler = run.config.sampler;
    let mut gen = ModelGenerator::new(&ckpt.model, ckpt.meta.schedule.build()?, sampler)?;
    let seeds: Vec<u64> = (0..args.n).map(|i| chain_seed(sampler.seed, i)).collect();
    let images = gen.generate(&vec![prompt; args.n], &seeds)?;
    let out = args.out.clone().unwrap_or_else(|| run.paths.samples());
    std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    let stem = format!("{}-sample-s{}", kind.id(), sampler.seed);
    let mut files = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let path = out.join(format!("{stem}-{i:02}.png"));
        write_atomic(&path, &imageio::encode_png(im)?)?;
        println!("{}", path.display());
        files.push(path);
    }
    let hash_of = |p: &Path| file_hash(p).map_err(anyhow::Error::from);
    let provenance = json!({
        "seed": sampler.seed,
        "chain_seeds": seeds,
        "text": text,
        "example_src": {"path": src_path, "sha256": hash_of(&src_path)?},
        "example_tgt": {"path": tgt_path, "sha256": hash_of(&tgt_path)?},
        "query": {"path": query_path, "sha256": hash_of(&query_path)?},
        "checkpoint": ckpt_path,
        "checkpoint_sha256": if ckpt_path.exists() { Some(hash_of(&ckpt_path)?) } else { None },
        "weights_hash": weights_hash(&ckpt.model),
        "sampler": sampler,
        "outputs": files,
        "config": run.config,
    });
    write_atomic(&out.join(format!("{stem}.json")), serde_json::to_string_pretty(&provenance)?.as_bytes())?;
    Ok(())
}

fn parse_tasks(spec: &str, config: &RunConfig) -> anyhow::Result<Vec<TaskId>> {
    match spec {
        "all-train" => Ok(TaskId::TRAINING.to_vec()),
        "held-out" => Ok(config.eval.heldout_tasks.clone()),
        list => list
            .split(',')
            .map(|t| t.trim().parse::<TaskId>().map_err(|e| usage(e.to_string())))
            .collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn print_report(report: &EvalReport) {
    println!(
        "{:<18} {:>8} {:>9} {:>8} {:>8} {:>8} {:>7}",
        "task", "rmse", "frechet", "cycle", "control", "p", "records"
    );
    for r in &report.rows {
        println!(
            "{:<18} {:>8} {:>9} {:>8} {:>8} {:>8} {:>7}",
            r.task.to_string(),
            fmt_opt(r.rmse),
            fmt_opt(r.frechet),
            fmt_opt(r.cycle),
            fmt_opt(r.control),
            fmt_opt(r.p_value),
            r.records
        );
    }
}

fn eval(mut config: RunConfig, args: EvalArgs) -> anyhow::Result<()> {
    let tasks = parse_tasks(&args.tasks, &config)?;
    config.eval.records = args.records.unwrap_or(config.eval.records);
    apply_sampler(&mut config, &args.sampler);
    let run = create_run(config)?;
    let corpus = run.corpus(AccessMode::Evaluation)?;
    let label = if args.tasks.contains(',') { args.tasks.replace(',', "+") } else { args.tasks.clone() };
    let controls = run.config.eval.controls;
    let (report, path) = run.evaluate(&corpus, args.model.into(), &tasks, &label, controls)?;
    print_report(&report);
    println!("report {}", path.display());
    Ok(())
}

fn baseline(mut config: RunConfig, flags: SamplerFlags) -> anyhow::Result<()> {
    apply_sampler(&mut config, &flags);
    let run = create_run(config)?;
    let corpus = run.corpus(AccessMode::Evaluation)?;
    let inverse: Vec<TaskId> = TaskId::TRAINING.into_iter().filter(|t| t.direction() == Direction::Inverse).collect();
    let (joint, _) = run.evaluate(&corpus, ModelKind::Prompt, &inverse, "inverse", false)?;
    let (contrast, path) = run.baseline_contrast(&corpus, &joint)?;
    println!("{:<18} {:>9} {:>9}", "task", "baseline", "joint");
    for t in &inverse {
        println!(
            "{:<18} {:>9.4} {:>9.4}",
            t.to_string(),
            contrast.baseline.get(t).copied().unwrap_or(f64::NAN),
            contrast.joint.get(t).copied().unwrap_or(f64::NAN)
        );
    }
    println!(
        "baseline degradation {:.3} (own task {}), joint spread {:.3}",
        contrast.baseline_degradation, contrast.own_task, contrast.joint_spread
    );
    println!("report {}", path.display());
    Ok(())
}

fn ablate(mut config: RunConfig, args: AblateArgs) -> anyhow::Result<()> {
    let modes = args
        .modes
        .split(',')
        .map(|m| AblationMode::parse(m.trim()).map_err(|e| usage(e.to_string())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(task) = &args.task {
        config.eval.ablation_task = task.parse().map_err(|e: prompt_diffusion::Error| usage(e.to_string()))?;
    }
    apply_sampler(&mut config, &args.sampler);
    let run = create_run(config)?;
    let corpus = run.corpus(AccessMode::Evaluation)?;
    let out = run.ablate(&corpus, args.model.into(), &modes)?;
    for (s, sheet) in out.summary.iter().zip(&out.sheets) {
        println!(
            "mode {}: variation {:.4}, mean cycle {:.4}, sheet {}",
            s.mode.letter(),
            s.variation,
            s.mean_cycle,
            sheet.display()
        );
    }
    println!("report {}", out.report.display());
    Ok(())
}

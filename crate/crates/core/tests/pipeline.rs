use prompt_diffusion::checkpoint::Checkpoint;
use prompt_diffusion::config::RunConfig;
use prompt_diffusion::corpus::AccessMode;
use prompt_diffusion::evalsuite::AblationMode;
use prompt_diffusion::network::Phase;
use prompt_diffusion::nn::Parameterized;
use prompt_diffusion::pipeline::{ModelKind, Run};
use prompt_diffusion::prompting::TaskId;

const TINY: &str = r#"
name = "tiny"

[corpus]
train = 16
test = 6
resolution = 8
seed = 2

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

[base]
batch_size = 2
grad_accumulation = 2
max_steps = 3
checkpoint_every = 2
ema_decay = 0.9

[prompt]
batch_size = 2
grad_accumulation = 1
max_steps = 3

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

fn tiny_run(root: &std::path::Path, name: &str) -> Run {
    let mut config = RunConfig::from_toml(TINY).unwrap();
    config.name = name.into();
    Run::create(root, config).unwrap()
}

#[test]
fn phases_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path(), "a");
    assert!(run.train_base(false).is_err());
    run.ensure_corpus().unwrap();
    assert!(run.ensure_corpus().unwrap().is_none());
    let err = run.train_prompt(None, false).err().unwrap().to_string();
    assert!(err.contains("base checkpoint"), "{err}");
    assert!(run.model(ModelKind::Prompt).is_err());
    assert_eq!(Run::open(run.root()).unwrap().config, run.config);
}

#[test]
fn a_tiny_run_trains_evaluates_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path(), "a");
    run.ensure_corpus().unwrap();
    let base = run.train_base(false).unwrap();
    assert_eq!(base.checkpoint.meta.step, 3);
    assert!(base.checkpoint.ema.is_some());
    let prompt = run.train_prompt(None, false).unwrap();
    assert!(prompt.checkpoint.model.is_locked());
    run.train_baseline(None, false).unwrap();
    let baseline = Checkpoint::load_phase(&run.checkpoint_path(ModelKind::Baseline), Phase::Prompt).unwrap();
    assert!(!baseline.meta.network.example_pair);

    // the untrained model is the averaged base with a silent control branch
    let untrained = run.model(ModelKind::Untrained).unwrap();
    assert_eq!(untrained.meta.step, 0);
    let averaged = base.checkpoint.inference_model();
    let mut base_values = std::collections::BTreeMap::new();
    averaged.visit("", &mut |n, p| {
        base_values.insert(n.to_string(), p.value.clone());
    });
    untrained.model.unet.visit("unet", &mut |n, p| {
        assert_eq!(Some(&p.value), base_values.get(n), "{n}");
    });

    let corpus = run.corpus(AccessMode::Evaluation).unwrap();
    let (joint, path) = run.evaluate(&corpus, ModelKind::Prompt, &TaskId::TRAINING, "all", true).unwrap();
    assert!(path.ends_with("reports/prompt-all-s0.json"));
    assert_eq!(joint.rows.len(), 6);
    assert!(joint.rows.iter().all(|r| r.records == 3 && r.headline().is_finite()));
    let (contrast, _) = run.baseline_contrast(&corpus, &joint).unwrap();
    assert_eq!(contrast.own_task, TaskId::InvDepth);
    assert!(contrast.baseline_degradation > 0.0 && contrast.joint_spread >= 1.0);
    let ablation = run.ablate(&corpus, ModelKind::Prompt, &AblationMode::ALL).unwrap();
    assert_eq!(ablation.sheets.len(), 4);
    assert!(ablation.sheets.iter().all(|p| p.exists()));

    // a second run from the stored config matches byte for byte
    let mut again = Run::open(run.root()).unwrap().config;
    again.name = "b".into();
    let rerun = Run::create(dir.path(), again).unwrap();
    rerun.ensure_corpus().unwrap();
    rerun.train_base(false).unwrap();
    rerun.train_prompt(None, false).unwrap();
    for kind in [ModelKind::Untrained, ModelKind::Prompt] {
        assert_eq!(
            std::fs::read(run.checkpoint_path(kind)).unwrap(),
            std::fs::read(rerun.checkpoint_path(kind)).unwrap()
        );
    }
    let (second, _) = rerun.evaluate(&corpus, ModelKind::Prompt, &TaskId::TRAINING, "all", true).unwrap();
    assert_eq!(second.rows, joint.rows);
}

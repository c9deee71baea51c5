use std::fs;
use std::path::Path;
use std::process::Command;

use musicot::model::{Transformer, Variant};
use musicot::synthetic::Corpus;
use musicot_cli::commands::{load_corpus, SampleRequest, SampleSource};
use musicot_cli::config::stage_seed;
use musicot_cli::error::{EXIT_CONFIG, EXIT_PREREQUISITE};
use musicot_cli::{cmd_evaluate, cmd_gen_data, cmd_sample, cmd_train_lm, cmd_train_rvq, CliError, ExperimentConfig};

const TINY: &[&str] = &[
    "corpus.songs=80",
    "corpus.min_windows=2",
    "corpus.max_windows=4",
    "corpus.tokens_per_window=4",
    "corpus.audio_vocab=32",
    "corpus.validation_fraction=0.2",
    "rvq.levels=2",
    "rvq.codebook_size=8",
    "rvq.train.epochs=5",
    "model.width=16",
    "model.depth=1",
    "model.heads=2",
    "model.context=64",
    "model.tokens_per_frame=4",
    "model.max_frames=4",
    "train.steps=60",
    "train.batch_size=4",
    "train.warmup_steps=5",
    "train.learning_rate=0.005",
    "sampling.max_cot_tokens=8",
    "sampling.max_audio_tokens=16",
    "eval.prompts=6",
    "eval.references=4",
    "eval.distractors=3",
    "eval.ngram=4",
];

fn tiny(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let path = dir.join("exp.toml");
    if !path.exists() {
        fs::write(&path, "seed = 3\n").unwrap();
    }
    let sets: Vec<String> = TINY.iter().chain(extra).map(|s| s.to_string()).collect();
    ExperimentConfig::load(Some(&path), &sets).unwrap()
}

fn trained(dir: &Path) -> ExperimentConfig {
    let config = tiny(dir, &[]);
    cmd_gen_data(&config, false).unwrap();
    cmd_train_rvq(&config).unwrap();
    cmd_train_lm(&config, |_, _, _| {}).unwrap();
    config
}

fn prompt_request(out: &Path, seed: u64) -> SampleRequest {
    let mut params = ExperimentConfig::load(None, &[])
        .unwrap()
        .sampling_params(stage_seed::SAMPLE);
    params.max_cot_tokens = 8;
    params.max_audio_tokens = 16;
    params.seed = seed;
    SampleRequest {
        source: SampleSource::Prompt("rock drums vocals".into()),
        lyrics: None,
        variant: Variant::Musicot,
        params,
        out: out.to_path_buf(),
    }
}

#[test]
fn gen_data_creates_dir_is_reproducible_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), &["paths.corpus='deep/nested/corpus'"]);
    let first = cmd_gen_data(&config, false).unwrap();
    assert!(first.dir.ends_with("deep/nested/corpus"));
    assert_eq!(first.songs, 80);
    let corpus = Corpus::load(&first.dir).unwrap();
    assert_eq!(corpus.config.seed, config.corpus_config().seed);

    let again = cmd_gen_data(&config, false).unwrap_err();
    assert!(matches!(again, CliError::Exists(_)));
    assert_eq!(again.exit_code(), EXIT_PREREQUISITE);

    let second = cmd_gen_data(&config, true).unwrap();
    assert_eq!(first.hash, second.hash);
}

#[test]
fn stages_name_missing_and_stale_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), &[]);
    match cmd_train_rvq(&config).unwrap_err() {
        CliError::Missing { stage, .. } => assert_eq!(stage, "gen-data"),
        e => panic!("unexpected {e}"),
    }
    cmd_gen_data(&config, false).unwrap();
    match cmd_train_lm(&config, |_, _, _| {}).unwrap_err() {
        CliError::Missing { stage, .. } => assert_eq!(stage, "train-rvq"),
        e => panic!("unexpected {e}"),
    }
    match cmd_evaluate(&config).unwrap_err() {
        CliError::Missing { stage, .. } => assert_eq!(stage, "train-rvq"),
        e => panic!("unexpected {e}"),
    }

    let changed = tiny(dir.path(), &["corpus.noise=0.07"]);
    let e = load_corpus(&changed).unwrap_err();
    assert!(matches!(e, CliError::Stale { stage: "gen-data", .. }), "{e}");
    assert!(e.to_string().contains("gen-data"));
}

#[test]
fn rvq_stage_error_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), &[]);
    cmd_gen_data(&config, false).unwrap();
    let out = cmd_train_rvq(&config).unwrap();
    assert_eq!(out.per_level_mse.len(), 2);
    assert!(
        out.per_level_mse.windows(2).all(|w| w[1] <= w[0]),
        "{:?}",
        out.per_level_mse
    );
    assert!(config.reports_dir().join("rvq_levels.csv").exists());
}

#[test]
fn lm_stage_trains_both_variants_and_lowers_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    for variant in [Variant::Musicot, Variant::Baseline] {
        let model = Transformer::<f32>::load(&config.checkpoint_path(variant)).unwrap();
        assert_eq!(model.variant(), variant);
        assert_eq!(model.variant().uses_cot(), variant == Variant::Musicot);
        let csv = fs::read_to_string(config.reports_dir().join(format!("train_{}.csv", variant.as_str()))).unwrap();
        let losses: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(losses.len(), 60);
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{variant:?}: {head} -> {tail}");
    }

    // Changing training settings invalidates the checkpoints but not the codebooks.
    let changed = tiny(dir.path(), &["train.steps=61"]);
    assert!(cmd_train_rvq(&changed).is_ok());
    let e = cmd_sample(&changed, &prompt_request(&dir.path().join("s"), 1)).unwrap_err();
    assert!(matches!(e, CliError::Stale { stage: "train-lm", .. }), "{e}");
}

#[test]
fn baseline_mode_writes_only_a_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path(), &["mode=baseline"]);
    cmd_gen_data(&config, false).unwrap();
    cmd_train_rvq(&config).unwrap();
    let outs = cmd_train_lm(&config, |_, _, _| {}).unwrap();
    assert_eq!(outs.len(), 1);
    let model = Transformer::<f32>::load(&outs[0].path).unwrap();
    assert!(!model.variant().uses_cot());
    assert!(!config.checkpoint_path(Variant::Musicot).exists());
}

#[test]
fn sampling_writes_files_and_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    let (a_song, a) = cmd_sample(&config, &prompt_request(&dir.path().join("a"), 7)).unwrap();
    let (_, b) = cmd_sample(&config, &prompt_request(&dir.path().join("b"), 7)).unwrap();
    for (fa, fb) in a
        .files
        .iter()
        .zip(&b.files)
        .filter(|(f, _)| f.extension().is_some_and(|e| e != "json"))
    {
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{}", fa.display());
    }
    assert_eq!(a.cot_levels, 2);
    assert_eq!(a.cot_frames, a_song.grid.frames());
    let text = fs::read_to_string(&a.files[2]).unwrap();
    assert!(text.contains(&format!("{}x2", a.cot_frames)));
    assert!(text.contains("lambda1=2.3 lambda2=1.3"));
    assert!(text.contains("temp_cot=0.65 temp_audio=0.75"));

    // A one-window reference.
    let corpus = load_corpus(&config).unwrap();
    let window: Vec<Vec<f64>> = vec![corpus.songs[0].embeddings[0].values().to_vec()];
    let reference = dir.path().join("ref.json");
    fs::write(&reference, serde_json::to_string(&window).unwrap()).unwrap();
    let request = SampleRequest {
        source: SampleSource::ReferenceFile(reference),
        ..prompt_request(&dir.path().join("r"), 1)
    };
    let (song, summary) = cmd_sample(&config, &request).unwrap();
    assert_eq!(summary.cot_frames, 1);
    assert_eq!(song.grid.frames(), 1);

    let baseline_ref = SampleRequest {
        variant: Variant::Baseline,
        source: SampleSource::ReferenceSong(0),
        ..prompt_request(&dir.path().join("x"), 1)
    };
    assert!(cmd_sample(&config, &baseline_ref).is_err());
}

#[test]
fn evaluate_reports_four_ablation_rows_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    let first = cmd_evaluate(&config).unwrap();
    let json_a = fs::read(config.reports_dir().join("evaluation.json")).unwrap();
    let second = cmd_evaluate(&config).unwrap();
    let json_b = fs::read(config.reports_dir().join("evaluation.json")).unwrap();
    assert_eq!(first, second);
    assert_eq!(json_a, json_b);
    let labels: Vec<&str> = first.ablation.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        ["MusiCoT", "w/o Dual-Temp.", "w/o DS-CFG", "w/o Dual-Temp. & DS-CFG"]
    );
    assert!(first.heldout_audio_ce.musicot.is_finite() && first.heldout_audio_ce.baseline.is_finite());
    assert!(
        first.frechet.to_train < first.frechet.to_independent,
        "{:?}",
        first.frechet
    );
    for f in ["evaluation.txt", "ablation.csv", "correlation.csv"] {
        assert!(config.reports_dir().join(f).exists(), "{f}");
    }
}

fn musicot(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_musicot"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let out = musicot(dir.path(), &["train-rvq"]);
    assert_eq!(out.status.code(), Some(EXIT_PREREQUISITE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));

    let out = musicot(dir.path(), &["--set", "train.steps=-1", "gen-data"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(!dir.path().join("run").exists(), "config errors must not touch disk");

    let out = musicot(dir.path(), &["sample", "--prompt", "rock", "--reference", "r.json"]);
    assert!(!out.status.success());

    let out = musicot(dir.path(), &["show-config", "--set", "seed=4"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 4"));

    let out = musicot(dir.path(), &["sample", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--lambda1",
        "--lambda2",
        "--temp-cot",
        "--temp-audio",
        "--reference",
        "--seed",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
}

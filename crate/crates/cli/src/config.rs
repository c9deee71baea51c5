//! Experiment configuration: one TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use musicot::decoding::SamplingParams;
use musicot::model::{ModelConfig, Variant};
use musicot::rvq::RvqTrainConfig;
use musicot::synthetic::{derive_seed, CorpusConfig};
use musicot::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{CliError, Result};

/// Seed streams split off the root seed, one per stage.
pub mod stage_seed {
    pub const CORPUS: u64 = 1;
    pub const RVQ: u64 = 2;
    pub const LM: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const EVALUATE: u64 = 5;
    pub const INDEPENDENT_CORPUS: u64 = 6;
}

/// Seed fields inside sections that are always derived from the root seed.
/// They may only appear with their placeholder value 0.
const DERIVED_SEEDS: [&str; 3] = ["corpus.seed", "train.seed", "sampling.seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Musicot,
    Baseline,
    Both,
}

impl Mode {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            Mode::Musicot => vec![Variant::Musicot],
            Mode::Baseline => vec![Variant::Baseline],
            Mode::Both => vec![Variant::Musicot, Variant::Baseline],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory holding `corpus.jsonl` and `embeddings.bin`.
    pub corpus: PathBuf,
    /// Codebook file; a `.json` sidecar sits next to it.
    pub rvq: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus".into(),
            rvq: "run/rvq.bin".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvqSection {
    pub levels: usize,
    pub codebook_size: usize,
    pub train: RvqTrainConfig,
}

impl Default for RvqSection {
    fn default() -> Self {
        Self {
            levels: musicot::rvq::DEFAULT_LEVELS,
            codebook_size: musicot::rvq::DEFAULT_CODEBOOK_SIZE,
            train: RvqTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Validation songs whose prompts are sampled.
    pub prompts: usize,
    /// Training songs used as references.
    pub references: usize,
    /// Random songs each referencing trial is also compared against.
    pub distractors: usize,
    pub ngram: usize,
    pub volume_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 100,
            references: 50,
            distractors: 10,
            ngram: musicot::analysis::DEFAULT_COPY_NGRAM,
            volume_floor: musicot::analysis::DEFAULT_VOLUME_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub mode: Mode,
    /// Tag selection margin for text prompts.
    pub delta: f64,
    /// Training streams per song, each with its own condition window.
    pub draws_per_song: usize,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub rvq: RvqSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingParams,
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig {
            songs: 2000,
            min_windows: 4,
            max_windows: 8,
            tokens_per_window: 8,
            audio_vocab: 128,
            ..CorpusConfig::default()
        };
        let rvq = RvqSection::default();
        let model = ModelConfig {
            width: 64,
            depth: 2,
            heads: 4,
            context: 160,
            tokens_per_frame: corpus.tokens_per_window,
            max_frames: corpus.max_windows,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 8,
            steps: 3000,
            warmup_steps: 50,
            ..TrainConfig::default()
        };
        let sampling = SamplingParams {
            max_cot_tokens: rvq.levels * corpus.max_windows,
            max_audio_tokens: corpus.tokens_per_window * corpus.max_windows,
            ..SamplingParams::default()
        };
        Self {
            seed: 0,
            mode: Mode::Both,
            delta: musicot::conditioning::DEFAULT_DELTA,
            draws_per_song: 1,
            paths: Paths::default(),
            corpus,
            rvq,
            model,
            train,
            sampling,
            eval: EvalConfig::default(),
            base: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut value, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                let value: Value =
                    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (value, base)
            }
            None => (Value::Table(Default::default()), PathBuf::from(".")),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        // Missing keys take the experiment defaults, not each section's own defaults.
        let mut merged = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        merge(&mut merged, &value);
        let mut config: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        let canonical = Value::try_from(&config).map_err(|e| CliError::config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &canonical, "", &mut unknown);
        if let Some(k) = unknown.first() {
            return Err(CliError::config(format!("unknown key `{k}`")));
        }
        for k in DERIVED_SEEDS {
            if lookup(&value, k).is_some_and(|v| v.as_integer() != Some(0)) {
                return Err(CliError::config(format!(
                    "`{k}` is derived from the root seed; set `seed` instead"
                )));
            }
        }
        config.base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.rvq.train.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampling.validate()?;
        if self.rvq.levels == 0 || self.rvq.codebook_size == 0 {
            return Err(CliError::config("rvq.levels and rvq.codebook_size must be positive"));
        }
        if self.model.tokens_per_frame != self.corpus.tokens_per_window {
            return Err(CliError::config(format!(
                "model.tokens_per_frame ({}) must equal corpus.tokens_per_window ({})",
                self.model.tokens_per_frame, self.corpus.tokens_per_window
            )));
        }
        if self.draws_per_song == 0 {
            return Err(CliError::config("draws_per_song must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::config("delta must lie in (0, 1)"));
        }
        if self.eval.prompts == 0 || self.eval.ngram == 0 {
            return Err(CliError::config("eval.prompts and eval.ngram must be positive"));
        }
        if !(self.eval.volume_floor.is_finite() && self.eval.volume_floor >= 0.0) {
            return Err(CliError::config("eval.volume_floor must be nonnegative"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.paths.corpus)
    }

    pub fn rvq_path(&self) -> PathBuf {
        self.resolve(&self.paths.rvq)
    }

    pub fn checkpoint_path(&self, variant: Variant) -> PathBuf {
        self.resolve(&self.paths.checkpoints)
            .join(format!("{}.ckpt", variant.as_str()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.paths.reports)
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Corpus settings with the derived seed filled in.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.stage_seed(stage_seed::CORPUS),
            ..self.corpus.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stage_seed::LM),
            ..self.train.clone()
        }
    }

    pub fn sampling_params(&self, stage: u64) -> SamplingParams {
        SamplingParams {
            seed: self.stage_seed(stage),
            ..self.sampling.clone()
        }
    }

    /// Key identifying the corpus this config produces.
    pub fn corpus_key(&self) -> String {
        digest(&[&serde_json::to_string(&self.corpus_config()).expect("config serializes")])
    }

    pub fn rvq_key(&self) -> String {
        digest(&[
            &self.corpus_key(),
            &serde_json::to_string(&self.rvq).expect("config serializes"),
            &self.stage_seed(stage_seed::RVQ).to_string(),
        ])
    }

    pub fn lm_key(&self, variant: Variant) -> String {
        digest(&[
            &self.rvq_key(),
            variant.as_str(),
            &self.draws_per_song.to_string(),
            &serde_json::to_string(&self.model).expect("config serializes"),
            &serde_json::to_string(&self.train_config()).expect("config serializes"),
        ])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets a dotted key, parsing the value as TOML and falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("`{key}` descends into a non-table value")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::config(format!("`{key}` descends into a non-table value")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn merge(base: &mut Value, over: &Value) {
    match (base.as_table_mut(), over.as_table()) {
        (Some(b), Some(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        _ => *base = over.clone(),
    }
}

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |node, part| node.as_table()?.get(part))
}

fn unknown_keys(input: &Value, canonical: &Value, prefix: &str, out: &mut Vec<String>) {
    let Some(table) = input.as_table() else { return };
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match canonical.as_table().and_then(|c| c.get(k)) {
            Some(c) => unknown_keys(v, c, &path, out),
            None => out.push(path),
        }
    }
}

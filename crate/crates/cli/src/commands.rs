//! The pipeline stages behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use musicot::analysis::CorrelationReport;
use musicot::conditioning::{select_tags, ConditionBundle};
use musicot::decoding::{sample, sample_with_reference, GeneratedSong, SamplingParams};
use musicot::embedding::{Embedding, EmbeddingProvider};
use musicot::evaluation::{
    ablation_grid, ablation_table, dequantized_frames, frechet_auto, generate_for_prompts, generated_correlation,
    heldout_audio_ce, referencing_trials, structure_adherence, training_streams, vocab_layout, AblationRow,
};
use musicot::model::{Transformer, Variant};
use musicot::rvq::{train_rvq, RvqModel};
use musicot::sequence::VocabLayout;
use musicot::synthetic::{generate_corpus, Corpus, SyntheticSong, CORPUS_FILE};
use musicot::train::train_with_progress;
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, ExperimentConfig};
use crate::error::{CliError, Result};

const STAMP_FILE: &str = "stamp.json";

/// Records which config produced an artifact.
#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
}

fn stamp_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(STAMP_FILE)
    } else {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".stamp.json");
        PathBuf::from(s)
    }
}

fn write_stamp(artifact: &Path, stage: &str, key: &str) -> Result<()> {
    let stamp = Stamp {
        stage: stage.into(),
        key: key.into(),
    };
    write_file(&stamp_path(artifact), serde_json::to_string_pretty(&stamp)?.as_bytes())
}

/// Fails unless `artifact` exists and was built from the config `key`.
fn require(artifact: &Path, what: &'static str, stage: &'static str, key: &str) -> Result<()> {
    if !artifact.exists() {
        return Err(CliError::Missing {
            what,
            stage,
            path: artifact.to_path_buf(),
        });
    }
    let stale = || CliError::Stale {
        what,
        stage,
        path: artifact.to_path_buf(),
    };
    let text = fs::read_to_string(stamp_path(artifact)).map_err(|_| stale())?;
    let stamp: Stamp = serde_json::from_str(&text).map_err(|_| stale())?;
    if stamp.key != key {
        return Err(stale());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let dir = config.corpus_dir();
    let file = dir.join(CORPUS_FILE);
    if !file.exists() {
        return Err(CliError::Missing {
            what: "corpus",
            stage: "gen-data",
            path: file,
        });
    }
    require(&dir, "corpus", "gen-data", &config.corpus_key())?;
    Ok(Corpus::load(&dir)?)
}

pub fn load_rvq(config: &ExperimentConfig) -> Result<RvqModel> {
    let path = config.rvq_path();
    require(&path, "codebooks", "train-rvq", &config.rvq_key())?;
    Ok(RvqModel::load(&path)?)
}

pub fn load_model(config: &ExperimentConfig, variant: Variant, layout: &VocabLayout) -> Result<Transformer<f32>> {
    let path = config.checkpoint_path(variant);
    require(&path, "checkpoint", "train-lm", &config.lm_key(variant))?;
    let model = Transformer::<f32>::load(&path)?;
    if model.variant() != variant || model.layout().hash() != layout.hash() {
        return Err(CliError::Stale {
            what: "checkpoint",
            stage: "train-lm",
            path,
        });
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenDataOutcome {
    pub dir: PathBuf,
    pub hash: String,
    pub songs: usize,
    pub seed: u64,
}

/// Generates the synthetic corpus. Refuses to replace an existing one unless `force`.
pub fn cmd_gen_data(config: &ExperimentConfig, force: bool) -> Result<GenDataOutcome> {
    config.validate()?;
    let dir = config.corpus_dir();
    if dir.join(CORPUS_FILE).exists() && !force {
        return Err(CliError::Exists(dir));
    }
    let corpus_config = config.corpus_config();
    let corpus = generate_corpus(&corpus_config)?;
    let hash = corpus.save(&dir)?;
    write_stamp(&dir, "gen-data", &config.corpus_key())?;
    Ok(GenDataOutcome {
        dir,
        hash,
        songs: corpus.songs.len(),
        seed: corpus_config.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RvqOutcome {
    pub path: PathBuf,
    /// Mean squared reconstruction error after levels `1..=k`.
    pub per_level_mse: Vec<f64>,
    pub reseeds: Vec<usize>,
}

pub fn cmd_train_rvq(config: &ExperimentConfig) -> Result<RvqOutcome> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let embeddings: Vec<Embedding> = corpus
        .train_songs()
        .flat_map(|s| s.embeddings.iter().cloned())
        .collect();
    let (rvq, report) = train_rvq(
        &embeddings,
        config.rvq.levels,
        config.rvq.codebook_size,
        &config.rvq.train,
        config.stage_seed(stage_seed::RVQ),
    )?;
    let path = config.rvq_path();
    rvq.save(&path, Some(&report))?;
    write_stamp(&path, "train-rvq", &config.rvq_key())?;
    let mut csv = String::from("level,mse\n");
    for (k, v) in report.per_level_mse.iter().enumerate() {
        let _ = writeln!(csv, "{},{v}", k + 1);
    }
    write_file(&config.reports_dir().join("rvq_levels.csv"), csv.as_bytes())?;
    Ok(RvqOutcome {
        path,
        per_level_mse: report.per_level_mse,
        reseeds: report.reseeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmOutcome {
    pub variant: Variant,
    pub path: PathBuf,
    pub metrics: PathBuf,
    pub params: usize,
    pub initial_loss: f64,
    /// Mean of the last 50 recorded losses.
    pub final_loss: f64,
}

/// Trains the language model for every variant the mode selects. `progress`
/// receives `(variant, step, loss)` after each step.
pub fn cmd_train_lm(
    config: &ExperimentConfig,
    mut progress: impl FnMut(Variant, usize, f64),
) -> Result<Vec<LmOutcome>> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let rvq = load_rvq(config)?;
    let layout = vocab_layout(&corpus, &rvq)?;
    let train_config = config.train_config();
    let mut out = Vec::new();
    for variant in config.mode.variants() {
        let streams = training_streams(
            &corpus,
            &rvq,
            &layout,
            variant,
            corpus.train_songs(),
            config.draws_per_song,
            config.stage_seed(stage_seed::LM),
        )?;
        let longest = streams.iter().map(|s| s.len()).max().unwrap_or(0);
        if longest > config.model.context + 1 {
            return Err(CliError::config(format!(
                "longest {} stream has {longest} tokens but model.context is {}",
                variant.as_str(),
                config.model.context
            )));
        }
        let mut model = Transformer::<f32>::new(
            config.model.clone(),
            layout.clone(),
            variant,
            corpus.config.dim,
            config.stage_seed(stage_seed::LM),
        )?;
        let report = train_with_progress(&mut model, &streams, &train_config, |step, loss| {
            progress(variant, step, loss)
        })?;
        let path = config.checkpoint_path(variant);
        model.save(&path)?;
        write_stamp(&path, "train-lm", &config.lm_key(variant))?;
        let metrics = config.reports_dir().join(format!("train_{}.csv", variant.as_str()));
        write_file(&metrics, report.to_csv().as_bytes())?;
        out.push(LmOutcome {
            variant,
            path,
            metrics,
            params: model.num_params(),
            initial_loss: report.initial_loss().unwrap_or(f64::NAN),
            final_loss: report.final_loss(50).unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

/// What to condition a sample on.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// Free text; tags are selected from its embedding.
    Prompt(String),
    /// JSON file holding a list of window embeddings.
    ReferenceFile(PathBuf),
    /// A corpus song by index, used as a reference.
    ReferenceSong(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub source: SampleSource,
    pub lyrics: Option<String>,
    pub variant: Variant,
    pub params: SamplingParams,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub variant: Variant,
    pub source: String,
    pub tags: Vec<String>,
    pub lyrics_words: usize,
    pub cot_frames: usize,
    pub cot_levels: usize,
    pub audio_tokens: usize,
    pub stream_tokens: usize,
    pub params: SamplingParams,
    pub files: Vec<PathBuf>,
}

impl SampleSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant      {}", self.variant.as_str());
        let _ = writeln!(s, "source       {}", self.source);
        let _ = writeln!(
            s,
            "tags         {}",
            if self.tags.is_empty() {
                "(none)".into()
            } else {
                self.tags.join(", ")
            }
        );
        let _ = writeln!(s, "lyrics       {} words", self.lyrics_words);
        let _ = writeln!(
            s,
            "cot shape    {}x{} (frames x levels)",
            self.cot_frames, self.cot_levels
        );
        let _ = writeln!(s, "audio        {} tokens", self.audio_tokens);
        let _ = writeln!(s, "stream       {} tokens", self.stream_tokens);
        let p = &self.params;
        let _ = writeln!(
            s,
            "sampling     temp_cot={} temp_audio={} lambda1={} lambda2={} top_k={} seed={}",
            p.temp_cot,
            p.temp_audio,
            p.lambda1,
            p.lambda2,
            p.top_k.map_or_else(|| "off".to_string(), |k| k.to_string()),
            p.seed
        );
        s
    }
}

fn read_reference(path: &Path, dim: usize) -> Result<Vec<Embedding>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
    let embeddings = rows
        .into_iter()
        .map(Embedding::new)
        .collect::<musicot::Result<Vec<_>>>()?;
    for e in &embeddings {
        e.check_dim(dim)?;
    }
    Ok(embeddings)
}

/// Samples one song and writes `song.tsv`, `audio_tokens.txt`, `summary.txt`
/// and `summary.json` into the request's output directory.
pub fn cmd_sample(config: &ExperimentConfig, request: &SampleRequest) -> Result<(GeneratedSong, SampleSummary)> {
    config.validate()?;
    request.params.validate()?;
    let corpus = load_corpus(config)?;
    let rvq = load_rvq(config)?;
    let layout = vocab_layout(&corpus, &rvq)?;
    let model = load_model(config, request.variant, &layout)?;
    let lyrics = match &request.lyrics {
        Some(text) => corpus.lexicon.tokenize(text)?,
        None => Vec::new(),
    };

    let (song, cond, source) = match &request.source {
        SampleSource::Prompt(text) => {
            let clap = corpus.provider.embed_text(text)?;
            let cond = ConditionBundle {
                tags: select_tags(&clap, &corpus.universe, config.delta)?,
                clap,
                lyrics,
                dropped: false,
            };
            (
                sample(&model, &cond, &request.params)?,
                cond,
                format!("prompt {text:?}"),
            )
        }
        SampleSource::ReferenceFile(path) => {
            let reference = read_reference(path, corpus.config.dim)?;
            let cond = reference_condition(&corpus, &reference, lyrics, config.delta)?;
            let song = sample_with_reference(&model, &cond, &reference, &rvq, &request.params)?;
            (song, cond, format!("reference {}", path.display()))
        }
        SampleSource::ReferenceSong(index) => {
            let src: &SyntheticSong = corpus.songs.get(*index).ok_or_else(|| {
                CliError::config(format!(
                    "reference song {index} out of range for {} songs",
                    corpus.songs.len()
                ))
            })?;
            let cond = reference_condition(&corpus, &src.embeddings, lyrics, config.delta)?;
            let song = sample_with_reference(&model, &cond, &src.embeddings, &rvq, &request.params)?;
            (song, cond, format!("reference song {index}"))
        }
    };

    let files = vec![
        request.out.join("song.tsv"),
        request.out.join("audio_tokens.txt"),
        request.out.join("summary.txt"),
        request.out.join("summary.json"),
    ];
    let summary = SampleSummary {
        variant: request.variant,
        source,
        tags: cond.tags.clone(),
        lyrics_words: cond.lyrics.len(),
        cot_frames: song.grid.frames(),
        cot_levels: song.grid.levels(),
        audio_tokens: song.audio_tokens.len(),
        stream_tokens: song.ids.len(),
        params: request.params.clone(),
        files: files.clone(),
    };
    let audio: Vec<String> = song.audio_tokens.iter().map(u32::to_string).collect();
    write_file(&files[0], song.dump().as_bytes())?;
    write_file(&files[1], format!("{}\n", audio.join(" ")).as_bytes())?;
    write_file(&files[2], summary.to_text().as_bytes())?;
    write_file(&files[3], serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok((song, summary))
}

/// Condition for referencing: the first reference window stands in for the
/// text embedding, as a training condition would.
fn reference_condition(
    corpus: &Corpus,
    reference: &[Embedding],
    lyrics: Vec<u32>,
    delta: f64,
) -> Result<ConditionBundle> {
    let clap = reference
        .first()
        .ok_or_else(|| CliError::Core(musicot::Error::EmptyInput("reference has no windows".into())))?
        .clone();
    Ok(ConditionBundle {
        tags: select_tags(&clap, &corpus.universe, delta)?,
        clap,
        lyrics,
        dropped: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub musicot: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetScores {
    /// Generated CoT frames against held-out real windows.
    pub to_heldout: f64,
    /// Generated CoT frames against the training windows.
    pub to_train: f64,
    /// Generated CoT frames against an independently seeded corpus.
    pub to_independent: f64,
    pub covariance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyRates {
    pub n: usize,
    pub trials: usize,
    pub referencing: f64,
    pub continuation: f64,
    pub closer_to_reference: f64,
    pub grids_verbatim: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub prompts: usize,
    pub heldout_audio_ce: ModelScores,
    pub structure_adherence: ModelScores,
    pub frechet: FrechetScores,
    pub correlation: CorrelationReport,
    pub copy_rates: CopyRates,
    pub ablation: Vec<AblationRow>,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "prompts sampled: {}", self.prompts);
        let _ = writeln!(s, "\nheld-out audio CE (nats/token)");
        let _ = writeln!(s, "  musicot   {:.4}", self.heldout_audio_ce.musicot);
        let _ = writeln!(s, "  baseline  {:.4}", self.heldout_audio_ce.baseline);
        let _ = writeln!(s, "\nstructure adherence (pooled r)");
        let _ = writeln!(s, "  musicot   {:.4}", self.structure_adherence.musicot);
        let _ = writeln!(s, "  baseline  {:.4}", self.structure_adherence.baseline);
        let f = &self.frechet;
        let _ = writeln!(
            s,
            "\nFrechet distance of generated CoT frames ({} covariance)",
            f.covariance
        );
        let _ = writeln!(s, "  to held-out      {:.5}", f.to_heldout);
        let _ = writeln!(s, "  to training      {:.5}", f.to_train);
        let _ = writeln!(s, "  to independent   {:.5}", f.to_independent);
        let _ = writeln!(s, "\nstructural correlation\n{}", self.correlation.summary());
        let c = &self.copy_rates;
        let _ = writeln!(s, "\nreferencing over {} trials", c.trials);
        let _ = writeln!(s, "  grids verbatim        {}", c.grids_verbatim);
        let _ = writeln!(s, "  closer to reference   {:.3}", c.closer_to_reference);
        let _ = writeln!(
            s,
            "  {}-gram copy rate      referencing {:.4}  continuation {:.4}",
            c.n, c.referencing, c.continuation
        );
        let _ = writeln!(s, "\nablation\n{}", ablation_table(&self.ablation));
        s
    }
}

/// Scores both models and writes `evaluation.json`, `evaluation.txt`,
/// `ablation.csv` and `correlation.csv` into the reports directory.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let rvq = load_rvq(config)?;
    let layout = vocab_layout(&corpus, &rvq)?;
    let musicot = load_model(config, Variant::Musicot, &layout)?;
    let baseline = load_model(config, Variant::Baseline, &layout)?;
    let seed = config.stage_seed(stage_seed::EVALUATE);
    let params = config.sampling_params(stage_seed::EVALUATE);

    let validation: Vec<&SyntheticSong> = corpus.validation_songs().collect();
    if validation.is_empty() {
        return Err(CliError::config(
            "corpus has no validation songs; raise corpus.validation_fraction",
        ));
    }
    let ce = |model: &Transformer<f32>| -> Result<f64> {
        let streams = training_streams(
            &corpus,
            &rvq,
            &layout,
            model.variant(),
            validation.iter().copied(),
            1,
            seed,
        )?;
        Ok(heldout_audio_ce(model, &streams)?)
    };
    let heldout_audio_ce = ModelScores {
        musicot: ce(&musicot)?,
        baseline: ce(&baseline)?,
    };

    let sources = &validation[..config.eval.prompts.min(validation.len())];
    let generated = generate_for_prompts(&musicot, &corpus, sources, &params, config.delta)?;
    let generated_base = generate_for_prompts(&baseline, &corpus, sources, &params, config.delta)?;
    let structure_adherence = ModelScores {
        musicot: structure_adherence(&corpus, &generated)?,
        baseline: structure_adherence(&corpus, &generated_base)?,
    };

    let songs: Vec<GeneratedSong> = generated.iter().map(|p| p.song.clone()).collect();
    let frames = dequantized_frames(&rvq, &songs)?;
    let heldout: Vec<Embedding> = validation.iter().flat_map(|s| s.embeddings.iter().cloned()).collect();
    let train: Vec<Embedding> = corpus
        .train_songs()
        .flat_map(|s| s.embeddings.iter().cloned())
        .collect();
    let independent_config = musicot::synthetic::CorpusConfig {
        seed: config.stage_seed(stage_seed::INDEPENDENT_CORPUS),
        ..corpus.config.clone()
    };
    let independent: Vec<Embedding> = generate_corpus(&independent_config)?.all_embeddings();
    let (to_heldout, mode) = frechet_auto(&frames, &heldout)?;
    let frechet = FrechetScores {
        to_heldout,
        to_train: frechet_auto(&frames, &train)?.0,
        to_independent: frechet_auto(&frames, &independent)?.0,
        covariance: format!("{mode:?}").to_lowercase(),
    };

    let correlation = generated_correlation(&corpus, &rvq, &songs, config.eval.volume_floor)?;

    let references: Vec<&SyntheticSong> = corpus.train_songs().take(config.eval.references).collect();
    let referencing = referencing_trials(
        &musicot,
        &corpus,
        &rvq,
        &references,
        config.eval.distractors,
        config.eval.ngram,
        &params,
        config.delta,
    )?;
    let copy_rates = CopyRates {
        n: referencing.n,
        trials: referencing.trials.len(),
        referencing: referencing.referencing_copy_rate,
        continuation: referencing.continuation_copy_rate,
        closer_to_reference: referencing.closer_fraction(),
        grids_verbatim: referencing.all_verbatim(),
    };

    let ablation = ablation_grid(&musicot, &corpus, &rvq, sources, &heldout, &params, config.delta)?;

    let report = EvaluationReport {
        prompts: sources.len(),
        heldout_audio_ce,
        structure_adherence,
        frechet,
        correlation,
        copy_rates,
        ablation,
    };
    let dir = config.reports_dir();
    write_file(
        &dir.join("evaluation.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_file(&dir.join("evaluation.txt"), report.to_text().as_bytes())?;
    write_file(&dir.join("ablation.csv"), ablation_table(&report.ablation).as_bytes())?;
    write_file(&dir.join("correlation.csv"), report.correlation.to_csv().as_bytes())?;
    Ok(report)
}

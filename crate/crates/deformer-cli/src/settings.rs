//! Run settings: defaults, the key=value settings file, and command-line
//! overrides, resolved once per invocation.
//!
//! Every knob has a file key named after its long flag with dashes replaced
//! by underscores (`--train-size` ↔ `train_size`). Precedence: command line
//! beats file beats default. Unknown or duplicate file keys are rejected so
//! typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use deformer_core::analysis::DistanceMetric;
use deformer_core::cache::StoragePrecision;
use deformer_core::encoder::ModelConfig;
use deformer_core::training::LossWeights;
use deformer_core::{Error, Result};

/// Every key the settings file accepts, in documentation order.
pub const KNOWN_KEYS: &[&str] = &[
    // run layout
    "run_dir",
    // model shape
    "n_layers",
    "hidden_dim",
    "n_heads",
    "ffn_dim",
    "max_positions",
    "q_max",
    "p_max",
    "layer_norm_eps",
    "model_seed",
    "split_layer",
    // shared training knobs
    "batch_size",
    "max_span_len",
    "eval_every",
    "precision",
    // synthetic data
    "vocab_keys",
    "vocab_values",
    "pairs_per_passage",
    "value_len_min",
    "value_len_max",
    "train_size",
    "dev_size",
    "data_seed",
    // teacher training
    "teacher_steps",
    "teacher_lr",
    "teacher_warmup",
    "train_seed",
    // fine-tuning
    "finetune_steps",
    "finetune_lr",
    "finetune_warmup",
    "gamma",
    "alpha",
    "beta",
    "finetune_seed",
    // loss-weight tuner
    "tune_iterations",
    "tune_initial",
    "tune_candidates",
    "tune_trial_steps",
    "tune_seed",
    // profile
    "question_len",
    "passage_len",
    "preset",
    // cost model
    "gpu_per_hour",
    "sequences",
    "cost_batch_size",
    "seconds_per_batch",
    "decomposed_seconds_per_batch",
    "storage_gb",
    "storage_per_gb",
    "per_10k_reads",
    "passage_tokens",
    "storage_hidden_dim",
    // analysis
    "analysis_passages",
    "analysis_questions",
    "metric",
];

/// Command-line overrides, shared by every subcommand so any knob can be
/// set anywhere it matters (the pipeline command in particular needs all of
/// them). Flags a given subcommand does not use are simply not consulted.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Directory all artifacts, manifests, and reports live under.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,

    /// Transformer layers in the encoder.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Hidden width d.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Attention heads (must divide hidden width).
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Position-embedding table size.
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Fixed question-slot width of the packed layout.
    #[arg(long)]
    pub q_max: Option<usize>,
    /// Maximum passage tokens per example.
    #[arg(long)]
    pub p_max: Option<usize>,
    /// Layer-norm denominator epsilon.
    #[arg(long)]
    pub layer_norm_eps: Option<f64>,
    /// Weight-initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Layers that run per segment before the joint upper layers.
    #[arg(long)]
    pub split_layer: Option<usize>,

    /// Examples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Longest answer span the decoder will consider.
    #[arg(long)]
    pub max_span_len: Option<usize>,
    /// Steps between periodic exact-match evaluations; 0 disables.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Stored-representation precision: f32 or trunc16.
    #[arg(long)]
    pub precision: Option<String>,

    /// Distinct key tokens in the vocabulary.
    #[arg(long)]
    pub vocab_keys: Option<usize>,
    /// Distinct value tokens in the vocabulary.
    #[arg(long)]
    pub vocab_values: Option<usize>,
    /// Key–value pairs embedded in each passage.
    #[arg(long)]
    pub pairs_per_passage: Option<usize>,
    /// Shortest value span.
    #[arg(long)]
    pub value_len_min: Option<usize>,
    /// Longest value span.
    #[arg(long)]
    pub value_len_max: Option<usize>,
    /// Training examples before the tune split is carved out.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Held-out dev examples.
    #[arg(long)]
    pub dev_size: Option<usize>,
    /// Dataset-generation seed.
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Teacher optimizer steps.
    #[arg(long)]
    pub teacher_steps: Option<usize>,
    /// Teacher learning rate.
    #[arg(long)]
    pub teacher_lr: Option<f64>,
    /// Teacher linear learning-rate warmup steps; 0 means none.
    #[arg(long)]
    pub teacher_warmup: Option<usize>,
    /// Teacher batch-shuffling seed.
    #[arg(long)]
    pub train_seed: Option<u64>,

    /// Fine-tuning optimizer steps.
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Fine-tuning peak learning rate.
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    /// Fine-tuning linear learning-rate warmup steps; 0 means none.
    #[arg(long)]
    pub finetune_warmup: Option<usize>,
    /// Span-loss weight γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Distillation-loss weight α.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Representation-similarity-loss weight β.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Fine-tuning batch-shuffling seed.
    #[arg(long)]
    pub finetune_seed: Option<u64>,

    /// Surrogate-guided tuner iterations after the initial design.
    #[arg(long)]
    pub tune_iterations: Option<usize>,
    /// Space-filling trials before the surrogate takes over.
    #[arg(long)]
    pub tune_initial: Option<usize>,
    /// Random acquisition candidates per iteration.
    #[arg(long)]
    pub tune_candidates: Option<usize>,
    /// Fine-tuning steps per tuner trial.
    #[arg(long)]
    pub tune_trial_steps: Option<usize>,
    /// Tuner seed.
    #[arg(long)]
    pub tune_seed: Option<u64>,

    /// Question tokens to profile; 0 picks the preset default.
    #[arg(long)]
    pub question_len: Option<usize>,
    /// Passage tokens to profile; 0 picks the preset default.
    #[arg(long)]
    pub passage_len: Option<usize>,
    /// Shape to profile: config, bert-base, or bert-large.
    #[arg(long)]
    pub preset: Option<String>,

    /// GPU price, dollars per hour.
    #[arg(long)]
    pub gpu_per_hour: Option<f64>,
    /// Sequences served per month.
    #[arg(long)]
    pub sequences: Option<f64>,
    /// Sequences per GPU batch in the cost model.
    #[arg(long)]
    pub cost_batch_size: Option<usize>,
    /// Seconds per batch without cached passages.
    #[arg(long)]
    pub seconds_per_batch: Option<f64>,
    /// Seconds per batch with cached passages.
    #[arg(long)]
    pub decomposed_seconds_per_batch: Option<f64>,
    /// Stored representations, gigabytes.
    #[arg(long)]
    pub storage_gb: Option<f64>,
    /// Storage price, dollars per gigabyte-month.
    #[arg(long)]
    pub storage_per_gb: Option<f64>,
    /// Read price, dollars per 10,000 lookups.
    #[arg(long)]
    pub per_10k_reads: Option<f64>,
    /// Passage length for the per-passage storage estimate.
    #[arg(long)]
    pub passage_tokens: Option<usize>,
    /// Hidden width for the per-passage storage estimate.
    #[arg(long)]
    pub storage_hidden_dim: Option<usize>,

    /// Distinct passages sampled for the variance profile.
    #[arg(long)]
    pub analysis_passages: Option<usize>,
    /// Question variants per passage for the variance profile.
    #[arg(long)]
    pub analysis_questions: Option<usize>,
    /// Divergence distance: euclidean or cosine.
    #[arg(long)]
    pub metric: Option<String>,
}

/// Which shape `profile` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Config,
    BertBase,
    BertLarge,
}

/// All knobs resolved to concrete values.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run_dir: PathBuf,

    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub q_max: usize,
    pub p_max: usize,
    pub layer_norm_eps: f64,
    pub model_seed: u64,
    pub split_layer: usize,
    /// Whether `split_layer` was set explicitly (file or flag) rather than
    /// defaulted — lets shape presets pick their own customary split.
    pub split_layer_explicit: bool,

    pub batch_size: usize,
    pub max_span_len: usize,
    pub eval_every: usize,
    pub precision: StoragePrecision,

    pub vocab_keys: usize,
    pub vocab_values: usize,
    pub pairs_per_passage: usize,
    pub value_len_min: usize,
    pub value_len_max: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub data_seed: u64,

    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_warmup: usize,
    pub train_seed: u64,

    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_warmup: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub finetune_seed: u64,

    pub tune_iterations: usize,
    pub tune_initial: usize,
    pub tune_candidates: usize,
    pub tune_trial_steps: usize,
    pub tune_seed: u64,

    pub question_len: usize,
    pub passage_len: usize,
    pub preset: Preset,

    pub gpu_per_hour: f64,
    pub sequences: f64,
    pub cost_batch_size: usize,
    pub seconds_per_batch: f64,
    pub decomposed_seconds_per_batch: f64,
    pub storage_gb: f64,
    pub storage_per_gb: f64,
    pub per_10k_reads: f64,
    pub passage_tokens: usize,
    pub storage_hidden_dim: usize,

    pub analysis_passages: usize,
    pub analysis_questions: usize,
    pub metric: DistanceMetric,
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read settings file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |what: String| {
            Error::Config(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(at(format!("unknown settings key {key:?}")));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(at(format!("duplicate settings key {key:?}")));
        }
    }
    Ok(map)
}

fn pick<T>(file: &BTreeMap<String, String>, key: &str, cli: Option<T>, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = cli {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|e| Error::Config(format!("settings key {key}={raw:?}: {e}"))),
        None => Ok(default),
    }
}

fn parse_precision(s: &str) -> Result<StoragePrecision> {
    match s {
        "f32" => Ok(StoragePrecision::F32),
        "trunc16" => Ok(StoragePrecision::Trunc16),
        other => Err(Error::Config(format!(
            "precision must be f32 or trunc16, got {other:?}"
        ))),
    }
}

fn parse_metric(s: &str) -> Result<DistanceMetric> {
    match s {
        "euclidean" => Ok(DistanceMetric::Euclidean),
        "cosine" => Ok(DistanceMetric::Cosine),
        other => Err(Error::Config(format!(
            "metric must be euclidean or cosine, got {other:?}"
        ))),
    }
}

fn parse_preset(s: &str) -> Result<Preset> {
    match s {
        "config" => Ok(Preset::Config),
        "bert-base" => Ok(Preset::BertBase),
        "bert-large" => Ok(Preset::BertLarge),
        other => Err(Error::Config(format!(
            "preset must be config, bert-base, or bert-large, got {other:?}"
        ))),
    }
}

impl Resolved {
    pub fn new(config: Option<&Path>, o: &Overrides) -> Result<Self> {
        let file = match config {
            Some(p) => parse_file(p)?,
            None => BTreeMap::new(),
        };
        let split_layer_explicit = o.split_layer.is_some() || file.contains_key("split_layer");
        let r = Resolved {
            run_dir: pick(&file, "run_dir", o.run_dir.clone(), PathBuf::from("run"))?,

            n_layers: pick(&file, "n_layers", o.n_layers, 4)?,
            hidden_dim: pick(&file, "hidden_dim", o.hidden_dim, 32)?,
            n_heads: pick(&file, "n_heads", o.n_heads, 4)?,
            ffn_dim: pick(&file, "ffn_dim", o.ffn_dim, 64)?,
            max_positions: pick(&file, "max_positions", o.max_positions, 32)?,
            q_max: pick(&file, "q_max", o.q_max, 4)?,
            p_max: pick(&file, "p_max", o.p_max, 24)?,
            layer_norm_eps: pick(&file, "layer_norm_eps", o.layer_norm_eps, 1e-12)?,
            model_seed: pick(&file, "model_seed", o.model_seed, 42)?,
            split_layer: pick(&file, "split_layer", o.split_layer, 2)?,
            split_layer_explicit,

            batch_size: pick(&file, "batch_size", o.batch_size, 32)?,
            max_span_len: pick(&file, "max_span_len", o.max_span_len, 4)?,
            eval_every: pick(&file, "eval_every", o.eval_every, 100)?,
            precision: parse_precision(&pick(
                &file,
                "precision",
                o.precision.clone(),
                "f32".into(),
            )?)?,

            vocab_keys: pick(&file, "vocab_keys", o.vocab_keys, 40)?,
            vocab_values: pick(&file, "vocab_values", o.vocab_values, 40)?,
            pairs_per_passage: pick(&file, "pairs_per_passage", o.pairs_per_passage, 5)?,
            value_len_min: pick(&file, "value_len_min", o.value_len_min, 1)?,
            value_len_max: pick(&file, "value_len_max", o.value_len_max, 2)?,
            train_size: pick(&file, "train_size", o.train_size, 8192)?,
            dev_size: pick(&file, "dev_size", o.dev_size, 128)?,
            data_seed: pick(&file, "data_seed", o.data_seed, 42)?,

            teacher_steps: pick(&file, "teacher_steps", o.teacher_steps, 3000)?,
            teacher_lr: pick(&file, "teacher_lr", o.teacher_lr, 3e-3)?,
            teacher_warmup: pick(&file, "teacher_warmup", o.teacher_warmup, 300)?,
            train_seed: pick(&file, "train_seed", o.train_seed, 42)?,

            finetune_steps: pick(&file, "finetune_steps", o.finetune_steps, 600)?,
            finetune_lr: pick(&file, "finetune_lr", o.finetune_lr, 1e-3)?,
            finetune_warmup: pick(&file, "finetune_warmup", o.finetune_warmup, 50)?,
            gamma: pick(&file, "gamma", o.gamma, 0.7)?,
            alpha: pick(&file, "alpha", o.alpha, 1.1)?,
            beta: pick(&file, "beta", o.beta, 0.5)?,
            finetune_seed: pick(&file, "finetune_seed", o.finetune_seed, 42)?,

            tune_iterations: pick(&file, "tune_iterations", o.tune_iterations, 12)?,
            tune_initial: pick(&file, "tune_initial", o.tune_initial, 6)?,
            tune_candidates: pick(&file, "tune_candidates", o.tune_candidates, 128)?,
            tune_trial_steps: pick(&file, "tune_trial_steps", o.tune_trial_steps, 40)?,
            tune_seed: pick(&file, "tune_seed", o.tune_seed, 42)?,

            question_len: pick(&file, "question_len", o.question_len, 0)?,
            passage_len: pick(&file, "passage_len", o.passage_len, 0)?,
            preset: parse_preset(&pick(&file, "preset", o.preset.clone(), "config".into())?)?,

            gpu_per_hour: pick(&file, "gpu_per_hour", o.gpu_per_hour, 2.48)?,
            sequences: pick(&file, "sequences", o.sequences, 30.0e6)?,
            cost_batch_size: pick(&file, "cost_batch_size", o.cost_batch_size, 640)?,
            seconds_per_batch: pick(&file, "seconds_per_batch", o.seconds_per_batch, 4.6)?,
            decomposed_seconds_per_batch: pick(
                &file,
                "decomposed_seconds_per_batch",
                o.decomposed_seconds_per_batch,
                1.4,
            )?,
            storage_gb: pick(&file, "storage_gb", o.storage_gb, 226.0)?,
            storage_per_gb: pick(&file, "storage_per_gb", o.storage_per_gb, 0.02)?,
            per_10k_reads: pick(&file, "per_10k_reads", o.per_10k_reads, 0.004)?,
            passage_tokens: pick(&file, "passage_tokens", o.passage_tokens, 150)?,
            storage_hidden_dim: pick(&file, "storage_hidden_dim", o.storage_hidden_dim, 768)?,

            analysis_passages: pick(&file, "analysis_passages", o.analysis_passages, 12)?,
            analysis_questions: pick(&file, "analysis_questions", o.analysis_questions, 4)?,
            metric: parse_metric(&pick(&file, "metric", o.metric.clone(), "euclidean".into())?)?,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if self.split_layer > self.n_layers {
            return Err(Error::Config(format!(
                "split_layer {} exceeds n_layers {}",
                self.split_layer, self.n_layers
            )));
        }
        if self.pairs_per_passage == 0 {
            return Err(Error::Config("pairs_per_passage must be at least 1".into()));
        }
        if self.vocab_keys < self.pairs_per_passage {
            return Err(Error::Config(format!(
                "vocab_keys {} cannot seat {} distinct pairs per passage",
                self.vocab_keys, self.pairs_per_passage
            )));
        }
        if self.vocab_values == 0 {
            return Err(Error::Config("vocab_values must be at least 1".into()));
        }
        if self.value_len_min == 0 || self.value_len_min > self.value_len_max {
            return Err(Error::Config(format!(
                "value span range {}..={} is invalid",
                self.value_len_min, self.value_len_max
            )));
        }
        let longest_passage = self.pairs_per_passage * (1 + self.value_len_max);
        if longest_passage > self.p_max {
            return Err(Error::Config(format!(
                "pairs_per_passage {} with values up to {} tokens can reach {} passage tokens, over p_max {}",
                self.pairs_per_passage, self.value_len_max, longest_passage, self.p_max
            )));
        }
        if self.q_max == 0 {
            return Err(Error::Config("q_max must be at least 1".into()));
        }
        if self.max_span_len < self.value_len_max {
            return Err(Error::Config(format!(
                "max_span_len {} cannot cover value spans up to {} tokens",
                self.max_span_len, self.value_len_max
            )));
        }
        let tune_n = self.tune_split_size();
        if tune_n == 0 || tune_n >= self.train_size {
            return Err(Error::Config(format!(
                "train_size {} leaves an unusable tune split of {}",
                self.train_size, tune_n
            )));
        }
        if self.dev_size == 0 {
            return Err(Error::Config("dev_size must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.analysis_questions < 2 {
            return Err(Error::Config(
                "analysis_questions must be at least 2 to measure variance".into(),
            ));
        }
        if self.analysis_passages == 0 {
            return Err(Error::Config("analysis_passages must be at least 1".into()));
        }
        Ok(())
    }

    /// Tune examples carved from the front of the training pool: one tenth,
    /// rounded.
    pub fn tune_split_size(&self) -> usize {
        (0.1 * self.train_size as f64).round() as usize
    }

    /// The run's model shape; the vocabulary size comes from the generated
    /// vocabulary file, not the settings.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_positions: self.max_positions,
            q_max: self.q_max,
            p_max: self.p_max,
            layer_norm_eps: self.layer_norm_eps,
            seed: self.model_seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { gamma: self.gamma, alpha: self.alpha, beta: self.beta }
    }

    fn map(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn model_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("q_max", self.q_max.to_string()),
            ("p_max", self.p_max.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
            ("model_seed", self.model_seed.to_string()),
        ]
    }

    /// The settings a stage's outputs depend on, stamped into its manifest;
    /// a later run whose values differ makes the artifact stale.
    pub fn stage_settings(&self, stage: &str) -> BTreeMap<String, String> {
        let mut pairs: Vec<(&str, String)> = match stage {
            "data" => vec![
                ("vocab_keys", self.vocab_keys.to_string()),
                ("vocab_values", self.vocab_values.to_string()),
                ("pairs_per_passage", self.pairs_per_passage.to_string()),
                ("value_len_min", self.value_len_min.to_string()),
                ("value_len_max", self.value_len_max.to_string()),
                ("train_size", self.train_size.to_string()),
                ("dev_size", self.dev_size.to_string()),
                ("data_seed", self.data_seed.to_string()),
                ("q_max", self.q_max.to_string()),
                ("p_max", self.p_max.to_string()),
            ],
            "teacher" => {
                let mut p = self.model_pairs();
                p.extend([
                    ("teacher_steps", self.teacher_steps.to_string()),
                    ("teacher_lr", self.teacher_lr.to_string()),
                    ("teacher_warmup", self.teacher_warmup.to_string()),
                    ("train_seed", self.train_seed.to_string()),
                    ("batch_size", self.batch_size.to_string()),
                    ("eval_every", self.eval_every.to_string()),
                    ("max_span_len", self.max_span_len.to_string()),
                ]);
                p
            }
            "decompose" => vec![("split_layer", self.split_layer.to_string())],
            "finetune" => vec![
                ("split_layer", self.split_layer.to_string()),
                ("finetune_steps", self.finetune_steps.to_string()),
                ("finetune_lr", self.finetune_lr.to_string()),
                ("finetune_warmup", self.finetune_warmup.to_string()),
                ("gamma", self.gamma.to_string()),
                ("alpha", self.alpha.to_string()),
                ("beta", self.beta.to_string()),
                ("finetune_seed", self.finetune_seed.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("eval_every", self.eval_every.to_string()),
                ("max_span_len", self.max_span_len.to_string()),
            ],
            "cache" => vec![
                ("split_layer", self.split_layer.to_string()),
                ("precision", precision_name(self.precision).to_string()),
            ],
            "eval" => vec![
                ("split_layer", self.split_layer.to_string()),
                ("precision", precision_name(self.precision).to_string()),
                ("max_span_len", self.max_span_len.to_string()),
            ],
            "profile" => {
                let mut p = self.model_pairs();
                p.extend([
                    ("split_layer", self.split_layer.to_string()),
                    ("question_len", self.question_len.to_string()),
                    ("passage_len", self.passage_len.to_string()),
                    ("preset", preset_name(self.preset).to_string()),
                ]);
                p
            }
            "analyze" => vec![
                ("split_layer", self.split_layer.to_string()),
                ("analysis_passages", self.analysis_passages.to_string()),
                ("analysis_questions", self.analysis_questions.to_string()),
                ("metric", metric_name(self.metric).to_string()),
            ],
            "tune" => vec![
                ("split_layer", self.split_layer.to_string()),
                ("tune_iterations", self.tune_iterations.to_string()),
                ("tune_initial", self.tune_initial.to_string()),
                ("tune_candidates", self.tune_candidates.to_string()),
                ("tune_trial_steps", self.tune_trial_steps.to_string()),
                ("tune_seed", self.tune_seed.to_string()),
                ("finetune_lr", self.finetune_lr.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("max_span_len", self.max_span_len.to_string()),
            ],
            other => unreachable!("no settings subset defined for stage {other}"),
        };
        pairs.sort_by_key(|(k, _)| *k);
        Self::map(&pairs)
    }
}

pub fn precision_name(p: StoragePrecision) -> &'static str {
    match p {
        StoragePrecision::F32 => "f32",
        StoragePrecision::Trunc16 => "trunc16",
    }
}

pub fn metric_name(m: DistanceMetric) -> &'static str {
    match m {
        DistanceMetric::Euclidean => "euclidean",
        DistanceMetric::Cosine => "cosine",
    }
}

pub fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Config => "config",
        Preset::BertBase => "bert-base",
        Preset::BertLarge => "bert-large",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let r = Resolved::new(None, &Overrides::default()).unwrap();
        assert_eq!(r.n_layers, 4);
        assert_eq!(r.split_layer, 2);
        assert!(!r.split_layer_explicit);
        assert_eq!(r.tune_split_size(), 819);
        assert_eq!(r.precision, StoragePrecision::F32);
    }

    #[test]
    fn cli_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "train_size = 100\nteacher_steps=7\n# comment\n\n").unwrap();
        let over = Overrides { train_size: Some(64), ..Overrides::default() };
        let r = Resolved::new(Some(&path), &over).unwrap();
        assert_eq!(r.train_size, 64, "flag beats file");
        assert_eq!(r.teacher_steps, 7, "file beats default");
        assert_eq!(r.dev_size, 128, "untouched keys default");
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [
            ("unknown.conf", "no_such_knob=3\n"),
            ("dup.conf", "train_size=10\ntrain_size=20\n"),
            ("bare.conf", "train_size\n"),
            ("badvalue.conf", "train_size=ten\n"),
        ] {
            let path = dir.path().join(name);
            fs::write(&path, body).unwrap();
            let got = Resolved::new(Some(&path), &Overrides::default());
            assert!(matches!(got, Err(Error::Config(_))), "{name} should be rejected");
        }
    }

    #[test]
    fn every_documented_key_is_accepted() {
        // One line per known key with its default-ish value; resolution must
        // parse all of them, keeping the docs and the parser in sync.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("all.conf");
        let mut body = String::new();
        for key in KNOWN_KEYS {
            let value = match *key {
                "run_dir" => "some/dir",
                "precision" => "trunc16",
                "metric" => "cosine",
                "preset" => "bert-base",
                "layer_norm_eps" => "1e-12",
                "teacher_lr" | "finetune_lr" => "0.001",
                "gamma" | "alpha" | "beta" => "0.5",
                "gpu_per_hour" | "seconds_per_batch" | "decomposed_seconds_per_batch"
                | "storage_gb" | "storage_per_gb" | "per_10k_reads" | "sequences" => "1.0",
                "value_len_min" | "value_len_max" => "1",
                "analysis_questions" => "3",
                "pairs_per_passage" => "2",
                "p_max" => "24",
                "max_positions" => "64",
                "train_size" => "60",
                _ => "6",
            };
            body.push_str(&format!("{key}={value}\n"));
        }
        fs::write(&path, &body).unwrap();
        let r = Resolved::new(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(r.run_dir, PathBuf::from("some/dir"));
        assert_eq!(r.precision, StoragePrecision::Trunc16);
        assert_eq!(r.preset, Preset::BertBase);
        assert!(r.split_layer_explicit);
    }

    #[test]
    fn cross_field_validation_catches_impossible_setups() {
        let cases: Vec<(Overrides, &str)> = vec![
            (
                Overrides { split_layer: Some(9), ..Overrides::default() },
                "split above the stack",
            ),
            (
                Overrides {
                    pairs_per_passage: Some(10),
                    p_max: Some(12),
                    ..Overrides::default()
                },
                "passage cannot fit",
            ),
            (
                Overrides { train_size: Some(3), ..Overrides::default() },
                "tune split collapses",
            ),
            (
                Overrides { max_span_len: Some(1), ..Overrides::default() },
                "span cap under value length",
            ),
        ];
        for (over, why) in cases {
            assert!(
                matches!(Resolved::new(None, &over), Err(Error::Config(_))),
                "{why}"
            );
        }
    }

    #[test]
    fn stage_settings_cover_the_knobs_that_shape_each_artifact() {
        let r = Resolved::new(None, &Overrides::default()).unwrap();
        let data = r.stage_settings("data");
        assert_eq!(data.get("data_seed").unwrap(), "42");
        assert!(!data.contains_key("teacher_steps"));
        let teacher = r.stage_settings("teacher");
        assert!(teacher.contains_key("hidden_dim"));
        assert!(teacher.contains_key("teacher_steps"));
        assert!(teacher.contains_key("teacher_warmup"));
        let finetune = r.stage_settings("finetune");
        assert!(finetune.contains_key("finetune_warmup"));
        assert!(!finetune.contains_key("teacher_warmup"));
        let cache = r.stage_settings("cache");
        assert_eq!(cache.get("precision").unwrap(), "f32");
    }
}

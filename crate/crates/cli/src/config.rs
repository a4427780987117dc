//! Flat, typed run configuration.
//!
//! A configuration file is TOML whose tables are the dotted sections
//! (`[model]`, `[bai]`, `[train]`, `[task]`, `[eval]`). Every key has a typed
//! default, so a resolved configuration always lists all of them. The `[run]`
//! table written into manifests is informational and ignored on input, which
//! lets a manifest be fed back in as a configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use bai_core::bai::{LambdaSchedule, ScheduleShape};
use bai_core::data::{BatchPolicy, BatchSize, TaskKind, TaskSpec};
use bai_core::model::{Arch, ModelConfig, TargetEmbedding, TargetOptions};
use bai_core::train::{AdamConfig, LrSchedule, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    IntList(Vec<i64>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::IntList(_) => "integer array",
        }
    }

    fn to_toml(&self) -> toml::Value {
        match self {
            Value::Bool(b) => toml::Value::Boolean(*b),
            Value::Int(i) => toml::Value::Integer(*i),
            Value::Float(f) => toml::Value::Float(*f),
            Value::Str(s) => toml::Value::String(s.clone()),
            Value::IntList(xs) => toml::Value::Array(xs.iter().map(|&x| toml::Value::Integer(x)).collect()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_toml())
    }
}

/// Every accepted key with its default and a one-line description.
pub fn key_table() -> Vec<(&'static str, Value, &'static str)> {
    use Value::*;
    let s = |x: &str| Str(x.to_string());
    vec![
        ("model.arch", s("transformer"), "transformer | expansion | decoder_only"),
        ("model.layers", Int(2), "encoder and decoder depth"),
        ("model.hidden", Int(64), "model width H"),
        ("model.ff_size", Int(256), "feed-forward inner width"),
        ("model.heads", Int(4), "attention heads; must divide hidden"),
        ("model.expansion_groups", IntList(vec![4, 8]), "static-expansion group sizes"),
        ("model.max_len", Int(64), "longest sequence (prompt plus continuation for decoder_only)"),
        ("model.dropout", Float(0.1), "dropout rate"),
        ("model.scale_embeddings", Bool(true), "multiply input embeddings by sqrt(H)"),
        ("model.tie_embeddings", Bool(false), "reuse the embedding table as output projection"),
        ("bai.enabled", Bool(true), "train the reconstruction loss jointly with cross-entropy"),
        ("bai.schedule", s("eq5"), "eq5 | lstar | l1 .. l5 | const | linear_up | linear_down"),
        ("bai.eta", Float(1e-3), "eq5 floor"),
        ("bai.gamma", Float(0.5), "eq5 slope"),
        ("bai.phi", Float(15.0), "eq5 midpoint, in epochs"),
        ("bai.value", Float(1.0), "const weight"),
        ("bai.floor", Float(1e-6), "linear_up start / linear_down end"),
        ("bai.ramp_epochs", Float(30.0), "linear_up / linear_down ramp length"),
        ("bai.target_embedding", s("raw"), "raw | scaled | positional"),
        ("bai.detach_targets", Bool(false), "stop reconstruction gradients into the embedding table"),
        ("train.epochs", Int(10), "training epochs"),
        ("train.batch_size", Int(64), "sequences per batch (0 when token_batch_size is set)"),
        ("train.token_batch_size", Int(0), "padded-token budget per batch (0 = off)"),
        ("train.bucket_width", Int(0), "length-bucket width (0 = random batches)"),
        ("train.lr", s("noam"), "noam | fixed | step_decay"),
        ("train.warmup", Int(4000), "noam warm-up steps"),
        ("train.lr_factor", Float(1.0), "noam multiplier"),
        ("train.lr_value", Float(1e-3), "fixed rate, and step_decay base"),
        ("train.decay_factor", Float(0.8), "step_decay factor"),
        ("train.decay_every", Int(2), "step_decay period in epochs"),
        ("train.adam_beta1", Float(0.9), "Adam beta1"),
        ("train.adam_beta2", Float(0.98), "Adam beta2"),
        ("train.adam_eps", Float(1e-9), "Adam epsilon"),
        ("train.clip_norm", Float(1.0), "global gradient-norm clip (0 = off)"),
        ("train.seed", Int(1), "seed of initialization, shuffling and dropout"),
        ("train.bleu_samples", Int(100), "validation examples decoded for BLEU each epoch"),
        ("train.wall_clock", Bool(false), "log wall-clock ms (makes metric files non-reproducible)"),
        ("task.kind", s("copy"), "copy | reverse | sort | arith_translate | parallel_file"),
        ("task.vocab_size", Int(20), "vocabulary size including the 4 reserved ids; also the model vocabulary"),
        ("task.min_len", Int(3), "shortest source"),
        ("task.max_len", Int(12), "longest source (per side for parallel_file)"),
        ("task.train_count", Int(10000), "training examples"),
        ("task.valid_count", Int(1000), "validation examples"),
        ("task.seed", Int(1), "seed of the generated data and of the corpus split"),
        ("task.path", s(""), "tab-separated corpus for parallel_file"),
        ("eval.beam", Int(4), "beam width for eval and decode"),
        ("eval.alpha", Float(0.0), "length-normalization exponent"),
        ("eval.samples", Int(0), "validation examples decoded by eval (0 = all)"),
    ]
}

/// Schedule names accepted by `bai.schedule`.
pub const SCHEDULES: [&str; 10] = [
    "eq5",
    "lstar",
    "l1",
    "l2",
    "l3",
    "l4",
    "l5",
    "const",
    "linear_up",
    "linear_down",
];

/// A complete key → value map.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: key_table().into_iter().map(|(k, v, _)| (k.to_string(), v)).collect(),
        }
    }
}

/// Everything a command needs, typed.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub beam: usize,
    pub alpha: f64,
    pub eval_samples: usize,
    pub wall_clock: bool,
}

fn from_toml(key: &str, v: &toml::Value) -> CliResult<Value> {
    Ok(match v {
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Integer(i) => Value::Int(*i),
        toml::Value::Float(f) => Value::Float(*f),
        toml::Value::String(s) => Value::Str(s.clone()),
        toml::Value::Array(xs) => Value::IntList(
            xs.iter()
                .map(|x| x.as_integer())
                .collect::<Option<Vec<i64>>>()
                .ok_or_else(|| CliError::usage(format!("{key}: expected an array of integers")))?,
        ),
        other => return Err(CliError::usage(format!("{key}: unsupported value {other}"))),
    })
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys of a TOML document.
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut cfg = RunConfig::default();
        for (key, v) in flat {
            if key.starts_with("run.") {
                continue;
            }
            let v = from_toml(&key, &v)?;
            cfg.set(&key, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Sets `key`, checking that it exists and that the value has its type.
    /// Integers are accepted for float keys.
    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| CliError::usage(format!("unknown config key `{key}`")))?;
        let value = match (&*slot, value) {
            (Value::Float(_), Value::Int(i)) => Value::Float(i as f64),
            (Value::IntList(_), Value::Int(i)) => Value::IntList(vec![i]),
            (old, v) if std::mem::discriminant(old) != std::mem::discriminant(&v) => {
                return Err(CliError::usage(format!("{key}: expected {}, got {} {v}", old.kind(), v.kind())));
            }
            (_, v) => v,
        };
        *slot = value;
        Ok(())
    }

    /// Applies one `key=value` override. The value is read as a TOML value
    /// and falls back to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override `{spec}` is not of the form key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => from_toml(key, &t["v"])?,
            Err(_) => Value::Str(raw.to_string()),
        };
        self.set(key, value)
    }

    pub fn get(&self, key: &str) -> &Value {
        &self.values[key]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn int(&self, key: &str) -> CliResult<i64> {
        match self.get(key) {
            Value::Int(i) => Ok(*i),
            v => Err(CliError::usage(format!("{key}: expected integer, got {v}"))),
        }
    }

    fn count(&self, key: &str) -> CliResult<usize> {
        let i = self.int(key)?;
        usize::try_from(i).map_err(|_| CliError::usage(format!("{key}: must be non-negative, got {i}")))
    }

    fn float(&self, key: &str) -> CliResult<f64> {
        match self.get(key) {
            Value::Float(f) => Ok(*f),
            v => Err(CliError::usage(format!("{key}: expected float, got {v}"))),
        }
    }

    fn boolean(&self, key: &str) -> CliResult<bool> {
        match self.get(key) {
            Value::Bool(b) => Ok(*b),
            v => Err(CliError::usage(format!("{key}: expected boolean, got {v}"))),
        }
    }

    fn string(&self, key: &str) -> CliResult<&str> {
        match self.get(key) {
            Value::Str(s) => Ok(s),
            v => Err(CliError::usage(format!("{key}: expected string, got {v}"))),
        }
    }

    fn choice<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>, allowed: &str) -> CliResult<T> {
        let s = self.string(key)?;
        parse(s).ok_or_else(|| CliError::usage(format!("{key}: unknown value {s:?} (expected {allowed})")))
    }

    /// The `Λ` shape named by `bai.schedule`, with its parameters.
    pub fn schedule(&self) -> CliResult<ScheduleShape> {
        let name = self.string("bai.schedule")?;
        let floor = self.float("bai.floor")?;
        let epochs = self.float("bai.ramp_epochs")?;
        let shape = match name {
            "eq5" => ScheduleShape::Logistic {
                eta: self.float("bai.eta")?,
                gamma: self.float("bai.gamma")?,
                phi: self.float("bai.phi")?,
            },
            "const" => ScheduleShape::Const {
                value: self.float("bai.value")?,
            },
            "linear_up" => ScheduleShape::Linear { from: floor, to: 1.0, epochs },
            "linear_down" => ScheduleShape::Linear { from: 1.0, to: floor, epochs },
            other if SCHEDULES.contains(&other) => LambdaSchedule::preset(other, 1)?.shape,
            other => {
                return Err(CliError::usage(format!(
                    "bai.schedule: unknown schedule {other:?}; presets are {}",
                    SCHEDULES.join(", ")
                )))
            }
        };
        LambdaSchedule::new(shape, 1).map_err(|e| CliError::usage(format!("bai.schedule: {e}")))?;
        Ok(shape)
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        let groups = match self.get("model.expansion_groups") {
            Value::IntList(xs) => xs
                .iter()
                .map(|&x| usize::try_from(x))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::usage("model.expansion_groups: sizes must be non-negative"))?,
            v => return Err(CliError::usage(format!("model.expansion_groups: expected integer array, got {v}"))),
        };
        let dropout = self.float("model.dropout")?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(CliError::usage(format!("model.dropout: must lie in [0, 1), got {dropout}")));
        }
        let cfg = ModelConfig {
            arch: self.choice("model.arch", Arch::parse, "transformer, expansion or decoder_only")?,
            layers: self.count("model.layers")?,
            hidden: self.count("model.hidden")?,
            ff_size: self.count("model.ff_size")?,
            heads: self.count("model.heads")?,
            vocab: self.count("task.vocab_size")?,
            expansion_groups: groups,
            max_len: self.count("model.max_len")?,
            dropout,
            scale_embeddings: self.boolean("model.scale_embeddings")?,
            tie_embeddings: self.boolean("model.tie_embeddings")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task(&self) -> CliResult<TaskSpec> {
        let kind = self.choice(
            "task.kind",
            TaskKind::parse,
            "copy, reverse, sort, arith_translate or parallel_file",
        )?;
        let path = self.string("task.path")?;
        if kind == TaskKind::ParallelFile && path.is_empty() {
            return Err(CliError::usage("task.path: required when task.kind is parallel_file"));
        }
        Ok(TaskSpec {
            kind,
            vocab_size: self.count("task.vocab_size")?,
            min_len: self.count("task.min_len")?,
            max_len: self.count("task.max_len")?,
            train_count: self.count("task.train_count")?,
            valid_count: self.count("task.valid_count")?,
            seed: self.count("task.seed")? as u64,
            path: (!path.is_empty()).then(|| path.to_string()),
        })
    }

    /// Typed view of every section, with field-level errors.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let model = self.model()?;
        let lr = match self.string("train.lr")? {
            "noam" => LrSchedule::Noam {
                hidden: model.hidden,
                warmup: self.int("train.warmup")?.max(0) as u64,
                factor: self.float("train.lr_factor")?,
            },
            "fixed" => LrSchedule::Fixed {
                value: self.float("train.lr_value")?,
            },
            "step_decay" => LrSchedule::StepDecay {
                base: self.float("train.lr_value")?,
                factor: self.float("train.decay_factor")?,
                every: self.count("train.decay_every")? as u64,
            },
            other => {
                return Err(CliError::usage(format!(
                    "train.lr: unknown value {other:?} (expected noam, fixed or step_decay)"
                )))
            }
        };
        lr.validate().map_err(|e| CliError::usage(format!("train.lr: {e}")))?;
        let batch_size = match (self.count("train.batch_size")?, self.count("train.token_batch_size")?) {
            (n, 0) if n > 0 => BatchSize::Sequences(n),
            (0, n) if n > 0 => BatchSize::Tokens(n),
            _ => {
                return Err(CliError::usage(
                    "train.batch_size / train.token_batch_size: exactly one must be nonzero",
                ))
            }
        };
        let batch_policy = match self.count("train.bucket_width")? {
            0 => BatchPolicy::Random,
            width => BatchPolicy::LengthBucketed { width },
        };
        let clip = self.float("train.clip_norm")?;
        if clip < 0.0 || clip.is_nan() {
            return Err(CliError::usage(format!("train.clip_norm: must be non-negative, got {clip}")));
        }
        let epochs = self.int("train.epochs")?;
        if epochs < 1 {
            return Err(CliError::usage(format!("train.epochs: must be at least 1, got {epochs}")));
        }
        let train = TrainConfig {
            lambda: self.schedule()?,
            bai_enabled: self.boolean("bai.enabled")?,
            target: TargetOptions {
                embedding: self.choice("bai.target_embedding", TargetEmbedding::parse, "raw, scaled or positional")?,
                detach: self.boolean("bai.detach_targets")?,
            },
            epochs: epochs as u64,
            batch_size,
            batch_policy,
            lr,
            adam: AdamConfig {
                beta1: self.float("train.adam_beta1")?,
                beta2: self.float("train.adam_beta2")?,
                eps: self.float("train.adam_eps")?,
            },
            clip_norm: (clip > 0.0).then_some(clip),
            seed: self.count("train.seed")? as u64,
            bleu_samples: self.count("train.bleu_samples")?,
            model,
        };
        train.validate()?;
        let beam = self.count("eval.beam")?;
        if beam == 0 {
            return Err(CliError::usage("eval.beam: must be at least 1"));
        }
        Ok(Resolved {
            train,
            task: self.task()?,
            beam,
            alpha: self.float("eval.alpha")?,
            eval_samples: self.count("eval.samples")?,
            wall_clock: self.boolean("train.wall_clock")?,
        })
    }

    /// Canonical TOML text: one table per section, keys sorted.
    pub fn to_toml_string(&self) -> String {
        let mut root = toml::Table::new();
        for (key, v) in &self.values {
            let (section, name) = key.split_once('.').expect("keys are dotted");
            root.entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables")
                .insert(name.to_string(), v.to_toml());
        }
        toml::to_string(&root).expect("plain values serialize")
    }

    /// Hex SHA-256 of [`RunConfig::to_toml_string`].
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A run's configuration plus the artifact list, as written next to outputs.
pub fn render_manifest(cfg: &RunConfig, extra: &[(&str, String)]) -> String {
    let mut run = toml::Table::new();
    run.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("config_digest".into(), cfg.digest().into());
    for (k, v) in extra {
        run.insert((*k).to_string(), v.clone().into());
    }
    let mut wrapper = toml::Table::new();
    wrapper.insert("run".into(), toml::Value::Table(run));
    format!("{}\n{}", cfg.to_toml_string(), toml::to_string(&wrapper).expect("plain values serialize"))
}

//! The subcommands, callable without going through argument parsing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bai_core::bai::LambdaSchedule;
use bai_core::data::{dataset_from_pairs, generate, parse_parallel, Dataset, Example, TaskKind, TaskSpec};
use bai_core::decode::{self, BeamConfig, ModelScorer};
use bai_core::gradcheck::{self, GradcheckReport};
use bai_core::model::{Arch, Seq2Seq};
use bai_core::train::{self, MetricRecord, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{render_manifest, RunConfig, Value};
use crate::error::{CliError, CliResult};
use crate::metrics::{MetricsWriter, CSV_FILE, JSONL_FILE};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DECODED_FILE: &str = "decoded.txt";

/// Configuration sources shared by every command, in increasing precedence:
/// defaults, `--config`, `--override`, then the shortcut flags.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub bai: Option<bool>,
    pub schedule: Option<String>,
    pub beam: Option<usize>,
}

impl ConfigSource {
    pub fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.overrides.is_empty()
            && self.seed.is_none()
            && self.bai.is_none()
            && self.schedule.is_none()
            && self.beam.is_none()
    }

    /// Applies the sources on top of `base`.
    pub fn apply(&self, mut cfg: RunConfig) -> CliResult<RunConfig> {
        if let Some(path) = &self.config {
            if !path.exists() {
                return Err(CliError::usage(format!("config file {} does not exist", path.display())));
            }
            cfg = RunConfig::from_file(path)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::usage("--seed is too large"))?;
            cfg.set("train.seed", Value::Int(seed))?;
        }
        if let Some(on) = self.bai {
            cfg.set("bai.enabled", Value::Bool(on))?;
        }
        if let Some(s) = &self.schedule {
            cfg.set("bai.schedule", Value::Str(s.clone()))?;
        }
        if let Some(b) = self.beam {
            cfg.set("eval.beam", Value::Int(b as i64))?;
        }
        Ok(cfg)
    }

    pub fn load(&self) -> CliResult<RunConfig> {
        self.apply(RunConfig::default())
    }
}

/// Builds or reads the task's data.
pub fn load_dataset(spec: &TaskSpec) -> CliResult<Dataset> {
    if spec.kind != TaskKind::ParallelFile {
        return Ok(generate(spec)?);
    }
    let path = spec.path.as_deref().ok_or_else(|| CliError::usage("task.path: required for parallel_file"))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("task.path: cannot read {path}: {e}")))?;
    let corpus = parse_parallel(&text, spec.max_len)?;
    Ok(dataset_from_pairs(&corpus, spec.valid_count, spec.vocab_size, spec.seed)?)
}

fn check_vocab(data: &Dataset, model_vocab: usize) -> CliResult<()> {
    let used = data.vocab.len();
    if used > model_vocab {
        return Err(CliError::usage(format!(
            "task vocabulary has {used} tokens but the model holds {model_vocab}"
        )));
    }
    let over = data
        .train
        .iter()
        .chain(&data.valid)
        .flat_map(|e| e.src.iter().chain(&e.tgt))
        .any(|&t| t as usize >= model_vocab);
    if over {
        return Err(CliError::usage(format!("task uses token ids beyond the model vocabulary of {model_vocab}")));
    }
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// What a finished training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub final_checkpoint: PathBuf,
}

/// Trains from `source` (or resumes from a checkpoint) into `out`, writing
/// the manifest, both metric files and one checkpoint per epoch. A failure
/// mid-run leaves the checkpoints of completed epochs in place.
pub fn train(source: &ConfigSource, out: &Path, resume: Option<&Path>, log: &mut dyn FnMut(&str)) -> CliResult<TrainOutcome> {
    let (cfg, mut trainer) = match resume {
        Some(path) => {
            if !source.is_empty() {
                return Err(CliError::usage(
                    "--resume continues the stored configuration; drop --config, --override and the shortcut flags",
                ));
            }
            let ck = Checkpoint::load(path)?;
            let cfg = ck.config.clone();
            (cfg, ck.into_trainer()?)
        }
        None => {
            let cfg = source.load()?;
            let resolved = cfg.resolve()?;
            (cfg, Trainer::new(resolved.train)?)
        }
    };
    let resolved = cfg.resolve()?;
    let data = load_dataset(&resolved.task)?;
    check_vocab(&data, resolved.train.model.vocab)?;
    if trainer.finished() {
        return Err(CliError::usage(format!("the run already completed all {} epochs", resolved.train.epochs)));
    }

    create_dir(out)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let mut extra = vec![
        ("metrics_jsonl", JSONL_FILE.to_string()),
        ("metrics_csv", CSV_FILE.to_string()),
        ("checkpoints", CHECKPOINT_DIR.to_string()),
    ];
    if let Some(path) = resume {
        extra.push(("resumed_from", path.display().to_string()));
    }
    write_file(&out.join(MANIFEST_FILE), render_manifest(&cfg, &extra))?;

    let mut writer = MetricsWriter::create(out)?;
    let start = Instant::now();
    let mut all = Vec::new();
    let mut last = None;
    while !trainer.finished() {
        let mut records = trainer.run_epoch(&data.train, &data.valid)?;
        if resolved.wall_clock {
            if let Some(r) = records.last_mut() {
                r.wall_clock_ms = Some(start.elapsed().as_millis() as u64);
            }
        }
        writer.append(&records)?;
        let path = ckpt_dir.join(checkpoint_name(trainer.epoch));
        Checkpoint::from_trainer(&cfg, &trainer).save(&path)?;
        if let Some(r) = records.last() {
            log(&epoch_line(r));
        }
        all.extend(records);
        last = Some(path);
    }
    Ok(TrainOutcome {
        records: all,
        final_checkpoint: last.expect("at least one epoch ran"),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn epoch_line(r: &MetricRecord) -> String {
    format!(
        "epoch {} step {} ce {:.4} beta {} lambda {} valid_acc {} valid_bleu {} valid_beta {}",
        r.epoch + 1,
        r.iteration + 1,
        r.ce,
        opt(r.beta),
        opt(r.lambda),
        opt(r.valid_token_accuracy),
        opt(r.valid_bleu),
        opt(r.valid_beta)
    )
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub beam: usize,
    pub alpha: f64,
    pub examples: usize,
    pub decoded: usize,
    pub token_accuracy: f64,
    pub ce: f64,
    pub beta: f64,
    pub bleu: f64,
}

fn checkpoint_view(checkpoint: &Path, source: &ConfigSource) -> CliResult<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(checkpoint)?;
    if source.config.is_some() {
        return Err(CliError::usage("--config is not accepted here; the checkpoint carries its configuration"));
    }
    let cfg = source.apply(ck.config.clone())?;
    for (key, v) in cfg.iter() {
        let editable = key.starts_with("task.") || key.starts_with("eval.");
        if !editable && ck.config.get(key) != v {
            return Err(CliError::usage(format!("{key} is fixed by the checkpoint; only task.* and eval.* may change")));
        }
    }
    if cfg.model()? != ck.config.model()? {
        return Err(CliError::usage(
            "task.vocab_size must match the vocabulary of the checkpoint's model",
        ));
    }
    Ok((ck, cfg))
}

fn beam_decode(model: &Seq2Seq, ck: &Checkpoint, src: &[u32], width: usize, alpha: f64) -> CliResult<Vec<u32>> {
    let cfg = BeamConfig {
        width,
        max_steps: model.max_decode_steps(src.len()),
        alpha,
    };
    Ok(decode::beam_search(&mut ModelScorer::new(model, &ck.params, src), &cfg)?.tokens)
}

/// Teacher-forced accuracy, cross-entropy and `β` on the validation split,
/// plus beam-search BLEU.
pub fn eval(checkpoint: &Path, source: &ConfigSource) -> CliResult<EvalOutput> {
    let (ck, cfg) = checkpoint_view(checkpoint, source)?;
    let resolved = cfg.resolve()?;
    let data = load_dataset(&resolved.task)?;
    check_vocab(&data, resolved.train.model.vocab)?;
    if data.valid.is_empty() {
        return Err(CliError::usage("task.valid_count: evaluation needs validation examples"));
    }
    let model = Seq2Seq::new(resolved.train.model.clone())?;
    let report = train::evaluate(&model, &ck.params, resolved.train.target, &data.valid, 0)?;
    let n = match resolved.eval_samples {
        0 => data.valid.len(),
        k => k.min(data.valid.len()),
    };
    let subset = &data.valid[..n];
    let mut hyps = Vec::with_capacity(n);
    for e in subset {
        hyps.push(beam_decode(&model, &ck, &e.src, resolved.beam, resolved.alpha)?);
    }
    let cands: Vec<&[u32]> = hyps.iter().map(Vec::as_slice).collect();
    let refs: Vec<&[u32]> = subset.iter().map(|e| e.tgt.as_slice()).collect();
    Ok(EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        beam: resolved.beam,
        alpha: resolved.alpha,
        examples: data.valid.len(),
        decoded: n,
        token_accuracy: report.token_accuracy,
        ce: report.ce,
        beta: report.beta,
        bleu: decode::bleu(&cands, &refs, 4)?,
    })
}

/// Beam-decodes whitespace-tokenized lines from `input`, or the validation
/// sources when no input is given; returns one output line per source.
pub fn decode_lines(checkpoint: &Path, source: &ConfigSource, input: Option<&Path>) -> CliResult<Vec<String>> {
    let (ck, cfg) = checkpoint_view(checkpoint, source)?;
    let resolved = cfg.resolve()?;
    let data = load_dataset(&resolved.task)?;
    check_vocab(&data, resolved.train.model.vocab)?;
    let model = Seq2Seq::new(resolved.train.model.clone())?;
    let sources: Vec<Vec<u32>> = match input {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            text.lines().filter(|l| !l.trim().is_empty()).map(|l| data.vocab.encode(l)).collect()
        }
        None => data.valid.iter().map(|e: &Example| e.src.clone()).collect(),
    };
    sources
        .iter()
        .map(|src| Ok(data.vocab.decode(&beam_decode(&model, &ck, src, resolved.beam, resolved.alpha)?)))
        .collect()
}

/// `iteration,epoch_fraction,lambda` rows of the configured schedule, one per
/// optimizer step of `train.epochs` epochs.
pub fn lambda_csv(source: &ConfigSource, iters_per_epoch: usize) -> CliResult<String> {
    let cfg = source.load()?;
    let shape = cfg.schedule()?;
    let epochs = match cfg.get("train.epochs") {
        Value::Int(e) if *e >= 1 => *e as u64,
        v => return Err(CliError::usage(format!("train.epochs: must be at least 1, got {v}"))),
    };
    if iters_per_epoch == 0 {
        return Err(CliError::usage("--iters-per-epoch must be at least 1"));
    }
    let sched = LambdaSchedule::new(shape, iters_per_epoch)?;
    let mut out = String::from("iteration,epoch_fraction,lambda\n");
    for t in 0..epochs * iters_per_epoch as u64 {
        let x = t as f64 / iters_per_epoch as f64;
        writeln!(out, "{t},{x},{}", sched.weight(t)?).expect("writing to a string");
    }
    Ok(out)
}

/// One ablation row.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub schedule: String,
    pub best_valid_accuracy: Option<f64>,
    pub best_valid_bleu: Option<f64>,
    pub final_valid_beta: Option<f64>,
    pub final_ce: f64,
}

fn best(records: &[MetricRecord], f: impl Fn(&MetricRecord) -> Option<f64>) -> Option<f64> {
    records.iter().filter_map(f).reduce(f64::max)
}

/// Trains one run per schedule (`off` disables BAI) with the shared
/// configuration and seed, each into `out/<schedule>`. Runs go in parallel
/// threads; every run is deterministic on its own.
pub fn ablate(source: &ConfigSource, schedules: &[String], out: &Path) -> CliResult<Vec<AblationRow>> {
    if schedules.len() < 2 {
        return Err(CliError::usage("ablate needs at least two --schedule values"));
    }
    let base = ConfigSource {
        schedule: None,
        ..source.clone()
    }
    .load()?;
    let mut runs = Vec::new();
    for s in schedules {
        let mut cfg = base.clone();
        if s == "off" {
            cfg.set("bai.enabled", Value::Bool(false))?;
        } else {
            cfg.set("bai.enabled", Value::Bool(true))?;
            cfg.set("bai.schedule", Value::Str(s.clone()))?;
        }
        cfg.resolve()?;
        runs.push((s.clone(), cfg));
    }
    create_dir(out)?;
    let results: Vec<CliResult<AblationRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(name, cfg)| {
                scope.spawn(move || {
                    let dir = out.join(name);
                    create_dir(&dir)?;
                    let path = dir.join("config.toml");
                    write_file(&path, cfg.to_toml_string())?;
                    let src = ConfigSource {
                        config: Some(path),
                        ..ConfigSource::default()
                    };
                    let outcome = train(&src, &dir, None, &mut |_| {})?;
                    let r = &outcome.records;
                    Ok(AblationRow {
                        schedule: name.clone(),
                        best_valid_accuracy: best(r, |x| x.valid_token_accuracy),
                        best_valid_bleu: best(r, |x| x.valid_bleu),
                        final_valid_beta: r.iter().rev().find_map(|x| x.valid_beta),
                        final_ce: r.last().map_or(f64::NAN, |x| x.ce),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation run panicked")).collect()
    });
    let rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(|e| CliError::runtime(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<12} {:>10} {:>10} {:>12} {:>10}\n",
        "schedule", "best_acc", "best_bleu", "final_beta", "final_ce"
    );
    for r in rows {
        writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>12} {:>10.4}",
            r.schedule,
            opt(r.best_valid_accuracy),
            opt(r.best_valid_bleu),
            opt(r.final_valid_beta),
            r.final_ce
        )
        .expect("writing to a string");
    }
    s
}

/// Finite-difference report for `arch`.
pub fn gradcheck(arch: &str, seed: u64) -> CliResult<GradcheckReport> {
    let arch = Arch::parse(arch)
        .ok_or_else(|| CliError::usage(format!("unknown arch {arch:?} (expected transformer, expansion or decoder_only)")))?;
    Ok(gradcheck::run(arch, seed)?)
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut s = format!("{:<24} {:>12} {:>10}  status\n", "op", "max_rel_err", "elements");
    for r in &report.rows {
        let status = if r.max_rel_err <= report.tolerance { "ok" } else { "FAIL" };
        writeln!(s, "{:<24} {:>12.3e} {:>10}  {status}", r.name, r.max_rel_err, r.evaluated).expect("writing to a string");
    }
    s
}

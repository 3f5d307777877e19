//! The training driver: RSP pretraining, the mean-teacher loop, checkpoints
//! and the JSON-lines log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tmage_core::data::{normalize_masks, BatchSource, LabeledSource, SamplePair};
use tmage_core::losses::{rampup_mu, LossBreakdown};
use tmage_core::magenet::{init_model, Architecture};
use tmage_core::meanteacher::{finish_pretrain, lr_schedule, pretrain_rsp_step, train_step, TrainState};
use tmage_core::rng::Stream;
use tmage_core::FundusImage;

use crate::checkpoint::{checkpoint_name, latest_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::{streams, RunConfig};
use crate::error::{AppError, Result};
use crate::io::{ensure_dir, write_json};
use crate::manifest::{load_labeled, load_manifest, load_unlabeled};

pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub mu: f64,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

impl LogRecord {
    /// Equality on everything except wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        (self.phase, self.step, self.lr, self.mu) == (other.phase, other.step, other.lr, other.mu)
            && self.loss == other.loss
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| AppError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| AppError::json(path, e))
        })
        .collect()
}

/// In-memory training data.
pub struct Dataset {
    pub labeled: Vec<LabeledSource>,
    pub unlabeled: Vec<FundusImage>,
}

impl Dataset {
    /// Loads the manifests named in the configuration.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg
            .data
            .labeled_manifest
            .as_ref()
            .ok_or_else(|| AppError::Usage("data.labeled_manifest is required".into()))?;
        let labeled = load_labeled(&load_manifest(path)?, cfg.data.side)?;
        let unlabeled = match &cfg.data.unlabeled_manifest {
            Some(p) => load_unlabeled(&load_manifest(p)?, cfg.data.side)?,
            None => Vec::new(),
        };
        Ok(Self { labeled, unlabeled })
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Stop once this many training steps are done (defaults to
    /// `trainer.total_steps`); the schedule is unaffected.
    pub stop_at: Option<u64>,
    /// Stop after RSP pretraining.
    pub pretrain_only: bool,
}

pub struct FitResult {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

fn append(log: &mut File, path: &Path, r: &LogRecord) -> Result<()> {
    let mut line = serde_json::to_vec(r).map_err(|e| AppError::json(path, e))?;
    line.push(b'\n');
    log.write_all(&line).map_err(|e| AppError::io(path, e))
}

fn dump_non_finite(out: &Path, err: &tmage_core::Error, lr: f64, mu: f64) -> Result<()> {
    let path = out.join("non_finite.json");
    write_json(
        &path,
        &serde_json::json!({ "error": err.to_string(), "lr": lr, "mu": mu }),
    )?;
    log::error!("non-finite loss; diagnostics written to {}", path.display());
    Ok(())
}

/// Clean-image pairs used for RSP pretraining.
fn pretrain_pairs(data: &Dataset) -> Result<Vec<SamplePair>> {
    data.labeled
        .iter()
        .map(|s| {
            let masks = s
                .masks
                .as_deref()
                .ok_or_else(|| tmage_core::Error::Config(format!("record {} has no masks for RSP pretraining", s.id)))?;
            Ok(SamplePair {
                low: s.high.clone(),
                high: s.high.clone(),
                masks: Some(normalize_masks(masks, s.high.height(), s.high.width())?),
                record: None,
            })
        })
        .collect()
}

/// Runs pretraining (when configured) and the training loop, writing the
/// config snapshot, the log and checkpoints under `opts.out_dir`.
pub fn fit(cfg: &RunConfig, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    cfg.validate()?;
    let out = &opts.out_dir;
    ensure_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let arch = Architecture::new(&cfg.model)?;
    let t = &cfg.trainer;
    let stop = opts.stop_at.unwrap_or(t.total_steps).min(t.total_steps);
    let source = BatchSource::new(
        &data.labeled,
        &data.unlabeled,
        t.labeled_per_batch,
        t.unlabeled_per_batch,
        cfg.sampler.clone(),
        cfg.data.schedule,
        cfg.derived_seed(streams::DATA),
    )?;

    let mut state = match &opts.resume {
        Some(dir) => {
            let (state, saved) = load_checkpoint(dir)?;
            if &saved != cfg {
                return Err(AppError::Usage(format!(
                    "configuration differs from the one stored in {}",
                    dir.display()
                )));
            }
            state
        }
        None => {
            let w = init_model(&cfg.model, &mut Stream::new(cfg.derived_seed(streams::INIT)))?;
            TrainState::new(w, cfg.seed())
        }
    };
    state.validate(&arch)?;

    let log_path = out.join(LOG_FILE);
    let mut log = if opts.resume.is_some() && log_path.exists() {
        read_log(&log_path)?
            .into_iter()
            .filter(|r| match r.phase {
                Phase::Pretrain => r.step < state.pretrain_step,
                Phase::Train => r.step < state.step,
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(|e| AppError::io(&log_path, e))?;
    for r in &log {
        append(&mut file, &log_path, r)?;
    }
    if stop == 0 && !opts.pretrain_only {
        return Ok(FitResult { state, log });
    }
    let ckpt_root = out.join(CHECKPOINT_DIR);

    if state.pretrain_step < t.pretrain_steps {
        let pairs = pretrain_pairs(data)?;
        let batch = t.labeled_per_batch.clamp(1, pairs.len());
        while state.pretrain_step < t.pretrain_steps {
            let start = (state.pretrain_step as usize * batch) % pairs.len();
            let chunk: Vec<SamplePair> = (0..batch).map(|j| pairs[(start + j) % pairs.len()].clone()).collect();
            let clock = Instant::now();
            let step = state.pretrain_step;
            let b = pretrain_rsp_step(&mut state, t, &arch, &chunk).inspect_err(|e| {
                let _ = dump_non_finite(out, e, t.pretrain_lr, 0.0);
            })?;
            let r = LogRecord {
                phase: Phase::Pretrain,
                step,
                lr: t.pretrain_lr,
                mu: 0.0,
                loss: b,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            };
            append(&mut file, &log_path, &r)?;
            log.push(r);
        }
        finish_pretrain(&mut state);
        save_checkpoint(&ckpt_root.join(checkpoint_name(state.step)), &state, cfg)?;
        log::info!("RSP pretraining finished after {} steps", state.pretrain_step);
    }
    if opts.pretrain_only {
        return Ok(FitResult { state, log });
    }

    while state.step < stop {
        let step = state.step;
        let lr = lr_schedule(step, t)?;
        let mu = rampup_mu(step, t.loss.rampup_steps, t.loss.mu_max);
        let batch = source.batch(step)?;
        let clock = Instant::now();
        let b = train_step(&mut state, t, &arch, &batch.labeled, &batch.unlabeled).inspect_err(|e| {
            let _ = dump_non_finite(out, e, lr, mu);
        })?;
        let r = LogRecord {
            phase: Phase::Train,
            step,
            lr,
            mu,
            loss: b,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        append(&mut file, &log_path, &r)?;
        log::debug!("step {step} total {:.6}", r.loss.total);
        log.push(r);
        let done = state.step;
        if (t.checkpoint_every > 0 && done % t.checkpoint_every == 0) || done == stop {
            save_checkpoint(&ckpt_root.join(checkpoint_name(done)), &state, cfg)?;
        }
    }
    Ok(FitResult { state, log })
}

/// Resolves `--resume`: an explicit checkpoint directory, or the latest one
/// under the output directory.
pub fn resolve_resume(out_dir: &Path, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    latest_checkpoint(&out_dir.join(CHECKPOINT_DIR))?
        .ok_or_else(|| AppError::Usage(format!("no checkpoint to resume under {}", out_dir.display())))
}

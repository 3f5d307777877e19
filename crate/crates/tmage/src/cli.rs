//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use tmage_core::data::{fov_mask, pair_seed, resize, BatchSource};
use tmage_core::degrade::{degrade, sample_degradation};
use tmage_core::magenet::{forward, init_model, zero_residual, ModelConfig, WeightSet};
use tmage_core::metrics::{build_report, EvalPair, MetricReport};
use tmage_core::rng::{derive_seed, Stream};
use tmage_core::synthetic::synthetic_fundus;
use tmage_core::FundusImage;

use crate::checkpoint::{load_weights, check_fingerprint, save_weights};
use crate::config::{streams, RunConfig};
use crate::error::{AppError, Result};
use crate::fit::{fit, resolve_resume, Dataset, FitOptions, CONFIG_FILE};
use crate::io::{ensure_dir, list_pngs, read_image, stem, tensor_image, write_image, write_json, write_mask};
use crate::manifest::{load_manifest, save_record, Manifest, ManifestRecord, Role};

#[derive(Debug, Parser)]
#[command(name = "tmage", version, about = "Fundus image degradation, enhancement training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set trainer.total_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed (shorthand for `--set trainer.seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhichWeights {
    Student,
    Teacher,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade every PNG in a directory, writing images, records and a manifest.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the degraded pairs training would draw in one epoch.
    Materialize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic labeled/unlabeled dataset with vessel masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        unlabeled: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write freshly initialized weights.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Zero both residual heads so the model reproduces its input.
        #[arg(long)]
        zero_residual: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the RSP segmenter on the labeled masks.
    PretrainRsp {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean-teacher training.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many training steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint (the latest under --out when no path
        /// is given).
        #[arg(long, num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Enhance every PNG in a directory.
    Enhance {
        /// Weight archive or training checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = WhichWeights::Teacher)]
        weights: WhichWeights,
        /// Resize inputs to this square side first.
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        emit_stage1: bool,
        #[arg(long)]
        emit_seg: bool,
        /// Check the weights against this configuration's model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR/SSIM of enhanced images against ground truth.
    Eval {
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory (defaults to --enhanced).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        fov_only: bool,
        #[arg(long, default_value = "eval")]
        dataset: String,
    },
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Degrade {
            input,
            out,
            workers,
            cfg,
        } => cmd_degrade(&cfg.load()?, &input, &out, workers),
        Command::Materialize { out, epoch, cfg } => cmd_materialize(&cfg.load()?, &out, epoch),
        Command::Synth {
            out,
            count,
            unlabeled,
            side,
            cfg,
        } => cmd_synth(&cfg.load()?, &out, count, unlabeled, side),
        Command::Init {
            out,
            zero_residual: zero,
            cfg,
        } => cmd_init(&cfg.load()?, &out, zero),
        Command::PretrainRsp { out, cfg } => {
            let cfg = cfg.load()?;
            if cfg.trainer.pretrain_steps == 0 {
                return Err(AppError::Usage("trainer.pretrain_steps is 0".into()));
            }
            let data = Dataset::load(&cfg)?;
            let opts = FitOptions {
                out_dir: out,
                pretrain_only: true,
                ..FitOptions::default()
            };
            fit(&cfg, &data, &opts).map(|_| ())
        }
        Command::Train {
            out,
            steps,
            resume,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let resume = match resume {
                None => None,
                Some(p) => Some(resolve_resume(&out, p.as_deref())?),
            };
            if steps == Some(0) && resume.is_none() {
                ensure_dir(&out)?;
                return write_json(&out.join(CONFIG_FILE), &cfg);
            }
            let data = Dataset::load(&cfg)?;
            let opts = FitOptions {
                out_dir: out,
                resume,
                stop_at: steps,
                pretrain_only: false,
            };
            let r = fit(&cfg, &data, &opts)?;
            if let Some(last) = r.log.last() {
                log::info!(
                    "step {} supervised {:.6} consistency {:.6}",
                    last.step,
                    last.loss.supervised_total,
                    last.loss.consistency_total
                );
            }
            Ok(())
        }
        Command::Enhance {
            checkpoint,
            input,
            out,
            weights,
            side,
            emit_stage1,
            emit_seg,
            config,
        } => {
            let expected = match config {
                Some(p) => Some(RunConfig::load(Some(&p), &[], None)?.model),
                None => None,
            };
            let opts = EnhanceOptions {
                side,
                emit_stage1,
                emit_seg,
            };
            cmd_enhance(&checkpoint, weights, expected.as_ref(), &input, &out, &opts)
        }
        Command::Eval {
            enhanced,
            gt,
            out,
            fov_only,
            dataset,
        } => {
            let out = out.unwrap_or_else(|| enhanced.clone());
            let report = cmd_eval(&enhanced, &gt, &out, fov_only, &dataset)?;
            println!(
                "mean,{:.6},{:.6} ({} images)",
                report.mean_psnr,
                report.mean_ssim,
                report.rows.len()
            );
            Ok(())
        }
    }
}

fn input_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(AppError::Usage(format!("no input images in {}", dir.display())));
    }
    Ok(files)
}

/// Degrades every PNG in `input`. Per-image seeds derive from the run seed
/// and the file stem, so output is independent of worker count.
pub fn cmd_degrade(cfg: &RunConfig, input: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let files = input_images(input)?;
    ensure_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let base = cfg.derived_seed(streams::DEGRADE);
    let job = |path: &PathBuf| -> Result<ManifestRecord> {
        let id = stem(path);
        let img = read_image(path)?;
        let img = match cfg.data.side {
            Some(s) => resize(&img, s)?,
            None => img,
        };
        let seed = pair_seed(base, 0, &id);
        let fov = fov_mask(&img);
        let record = sample_degradation(seed, &cfg.sampler, img.height(), img.width(), Some(&fov))?;
        let low = degrade(&img, &record)?;
        write_image(&out.join(format!("{id}.png")), &low)?;
        save_record(&out.join(format!("{id}.json")), &record)?;
        let source = std::fs::canonicalize(path).map_err(|e| AppError::io(path, e))?;
        Ok(ManifestRecord {
            id,
            image_path: source,
            role: Role::LabeledHigh,
            mask_paths: None,
            degraded_path: Some(PathBuf::from(format!("{}.png", stem(path)))),
            record_path: Some(PathBuf::from(format!("{}.json", stem(path)))),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| AppError::Failed(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<ManifestRecord>> = pool.install(|| files.par_iter().map(job).collect());
    let mut records = Vec::new();
    let mut failures = 0;
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failures += 1;
                log::error!("{}: {e}", path.display());
            }
        }
    }
    if !records.is_empty() {
        Manifest::new("degraded", records).save(&out.join("manifest.json"))?;
    }
    if failures > 0 {
        return Err(AppError::Failed(format!("{failures} of {} images failed", files.len())));
    }
    log::info!("degraded {} images into {}", files.len(), out.display());
    Ok(())
}

/// Writes the pairs that training draws in `epoch`, with their records and
/// a manifest that replays them exactly.
pub fn cmd_materialize(cfg: &RunConfig, out: &Path, epoch: u64) -> Result<()> {
    let path = cfg
        .data
        .labeled_manifest
        .as_ref()
        .ok_or_else(|| AppError::Usage("data.labeled_manifest is required".into()))?;
    let manifest = load_manifest(path)?;
    let data = Dataset::load(cfg)?;
    let t = &cfg.trainer;
    let source = BatchSource::new(
        &data.labeled,
        &data.unlabeled,
        t.labeled_per_batch,
        t.unlabeled_per_batch,
        cfg.sampler.clone(),
        cfg.data.schedule,
        cfg.derived_seed(streams::DATA),
    )?;
    ensure_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let labeled: Vec<&ManifestRecord> = manifest.with_role(Role::LabeledHigh).collect();
    let mut records = Vec::with_capacity(labeled.len());
    for (i, rec) in labeled.into_iter().enumerate() {
        let pair = source.pair(i, epoch)?;
        let id = &rec.id;
        write_image(&out.join(format!("{id}.png")), &pair.low)?;
        let mut entry = ManifestRecord {
            id: id.clone(),
            image_path: absolute(&manifest.resolve(&rec.image_path))?,
            role: Role::LabeledHigh,
            mask_paths: rec
                .mask_paths
                .as_ref()
                .map(|m| m.iter().map(|p| absolute(&manifest.resolve(p))).collect::<Result<_>>())
                .transpose()?,
            degraded_path: Some(PathBuf::from(format!("{id}.png"))),
            record_path: None,
        };
        if let Some(r) = &pair.record {
            save_record(&out.join(format!("{id}.json")), r)?;
            entry.record_path = Some(PathBuf::from(format!("{id}.json")));
        }
        records.push(entry);
    }
    Manifest::new(&manifest.dataset, records).save(&out.join("manifest.json"))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| AppError::io(p, e))
}

/// Synthetic clean images with vessel masks plus degraded unlabeled images.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, count: usize, unlabeled: usize, side: usize) -> Result<()> {
    if count == 0 {
        return Err(AppError::Usage("--count must be at least 1".into()));
    }
    ensure_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let base = cfg.derived_seed(streams::SYNTH);
    let mut labeled = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("synth-{i:03}");
        let (img, mask) = synthetic_fundus(side, side, derive_seed(base, &[i as u64]))?;
        let image_path = PathBuf::from(format!("clean/{id}.png"));
        let mask_path = PathBuf::from(format!("masks/{id}.png"));
        write_image(&out.join(&image_path), &img)?;
        write_mask(&out.join(&mask_path), &mask)?;
        labeled.push(ManifestRecord {
            id,
            image_path,
            role: Role::LabeledHigh,
            mask_paths: Some(vec![mask_path]),
            degraded_path: None,
            record_path: None,
        });
    }
    Manifest::new("synthetic", labeled).save(&out.join("labeled.json"))?;
    if unlabeled > 0 {
        let mut records = Vec::with_capacity(unlabeled);
        for i in 0..unlabeled {
            let id = format!("synth-u{i:03}");
            let seed = derive_seed(base, &[(count + i) as u64]);
            let (img, _) = synthetic_fundus(side, side, seed)?;
            let rec = sample_degradation(seed, &cfg.sampler, side, side, Some(&fov_mask(&img)))?;
            let image_path = PathBuf::from(format!("unlabeled/{id}.png"));
            write_image(&out.join(&image_path), &degrade(&img, &rec)?)?;
            records.push(ManifestRecord {
                id,
                image_path,
                role: Role::UnlabeledLow,
                mask_paths: None,
                degraded_path: None,
                record_path: None,
            });
        }
        Manifest::new("synthetic", records).save(&out.join("unlabeled.json"))?;
    }
    Ok(())
}

pub fn cmd_init(cfg: &RunConfig, out: &Path, zero: bool) -> Result<()> {
    let mut w = init_model(&cfg.model, &mut Stream::new(cfg.derived_seed(streams::INIT)))?;
    if zero {
        zero_residual(&mut w);
    }
    save_weights(out, &cfg.model, &w)
}

/// Loads weights from an archive or from a training checkpoint directory.
pub fn load_inference_weights(
    path: &Path,
    which: WhichWeights,
    expected: Option<&ModelConfig>,
) -> Result<(ModelConfig, WeightSet<f32>)> {
    let file = if path.is_dir() {
        path.join(match which {
            WhichWeights::Student => "student.tmw",
            WhichWeights::Teacher => "teacher.tmw",
        })
    } else {
        path.to_path_buf()
    };
    let (model, w) = load_weights(&file)?;
    let model = expected.cloned().unwrap_or(model);
    check_fingerprint(&file, &model, &w)?;
    Ok((model, w))
}

#[derive(Clone, Debug, Default)]
pub struct EnhanceOptions {
    pub side: Option<usize>,
    pub emit_stage1: bool,
    pub emit_seg: bool,
}

pub fn cmd_enhance(
    checkpoint: &Path,
    which: WhichWeights,
    expected: Option<&ModelConfig>,
    input: &Path,
    out: &Path,
    opts: &EnhanceOptions,
) -> Result<()> {
    let (model, weights) = load_inference_weights(checkpoint, which, expected)?;
    let files = input_images(input)?;
    ensure_dir(out)?;
    for path in &files {
        let id = stem(path);
        let img = read_image(path)?;
        let img = match opts.side {
            Some(s) => resize(&img, s)?,
            None => img,
        };
        let o = forward(&img, &weights, &model)?;
        write_image(&out.join(format!("{id}.png")), &tensor_image(&o.enhanced[1])?)?;
        if opts.emit_stage1 {
            write_image(&out.join(format!("{id}.stage1.png")), &tensor_image(&o.enhanced[0])?)?;
        }
        if opts.emit_seg {
            for (v, s) in o.seg_native.iter().enumerate() {
                write_mask(&out.join(format!("{id}.seg{v}.png")), s)?;
            }
        }
    }
    log::info!("enhanced {} images into {}", files.len(), out.display());
    Ok(())
}

/// Scores every enhanced image against the ground truth with the same file
/// name; writes `report.csv` and `report.json` into `out`.
pub fn cmd_eval(enhanced: &Path, gt: &Path, out: &Path, fov_only: bool, dataset: &str) -> Result<MetricReport> {
    let names = |dir: &Path| -> Result<Vec<String>> {
        Ok(list_pngs(dir)?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .filter(|n| !n.contains(".stage1.") && !n.contains(".seg"))
            .collect())
    };
    let (e_names, g_names) = (names(enhanced)?, names(gt)?);
    if e_names.is_empty() {
        return Err(AppError::Usage(format!("no input images in {}", enhanced.display())));
    }
    let unmatched: Vec<&String> = e_names
        .iter()
        .filter(|n| !g_names.contains(n))
        .chain(g_names.iter().filter(|n| !e_names.contains(n)))
        .collect();
    if !unmatched.is_empty() {
        let list: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
        return Err(AppError::Failed(format!("unmatched file names: {}", list.join(", "))));
    }
    let mut loaded: Vec<(String, FundusImage, FundusImage)> = Vec::with_capacity(e_names.len());
    for n in &e_names {
        let e = read_image(&enhanced.join(n))?;
        let mut g = read_image(&gt.join(n))?;
        if fov_only {
            let m = fov_mask(&g);
            g = g.with_mask(Some(m))?;
        }
        loaded.push((n.trim_end_matches(".png").to_string(), e, g));
    }
    let pairs: Vec<EvalPair<'_>> = loaded
        .iter()
        .map(|(id, e, g)| EvalPair {
            enhanced: e,
            ground_truth: g,
            id,
        })
        .collect();
    let report = build_report(dataset, &pairs, fov_only)?;
    ensure_dir(out)?;
    write_report_csv(&out.join("report.csv"), &report)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let csv_err = |e: csv::Error| AppError::Failed(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "psnr", "ssim"]).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([r.id.clone(), format!("{:.6}", r.psnr), format!("{:.6}", r.ssim)])
            .map_err(csv_err)?;
    }
    w.write_record([
        "mean".to_string(),
        format!("{:.6}", report.mean_psnr),
        format!("{:.6}", report.mean_ssim),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| AppError::io(path, e))
}

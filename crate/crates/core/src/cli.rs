//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::data::{load_dataset, synth_generate, Manifest, ManifestRow, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{roc_curve, roc_to_csv};
use crate::model::{count_trainable, flops_estimate, logistic, BackboneConfig, HeadSettings, LoraSettings};
use crate::train::{evaluate, merge_checkpoint, model_from_checkpoint, run_crossval, snapshot_checkpoint, RunReport};

#[derive(Debug, Parser)]
#[command(name = "lora3d", version, about = "Low-rank adaptation of frozen 3D CNN backbones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stratified k-fold training and validation.
    Crossval {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// CSV with columns subject_id,label,path.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for report, logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a manifest with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the ROC curve as threshold,fpr,tpr.
        #[arg(long)]
        roc_out: Option<PathBuf>,
        /// Write subject_id,label,logit,score per subject.
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Trainable parameters per adapter and head layer.
    CountParams {
        #[arg(long, default_value = "resnet50-3d")]
        preset: String,
        #[arg(long, default_value_t = crate::lora::DEFAULT_RANK)]
        rank: usize,
        #[arg(long, default_value_t = 2)]
        in_channels: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
    },
    /// Multiply-accumulate and FLOP counts for one forward pass.
    Flops {
        #[arg(long, default_value = "resnet50-3d")]
        preset: String,
        /// Input extents D,H,W.
        #[arg(long, value_delimiter = ',', default_values_t = [128, 128, 128])]
        extents: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        in_channels: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
    },
    /// Fold adapters into the frozen kernels.
    MergeLora {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic two-class volume set and its manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Subjects per class.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 16, 16])]
        extents: Vec<usize>,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        #[arg(long, default_value_t = 2)]
        channels: usize,
    },
}

/// Exit code for an error: 2 for bad input, 1 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Load(_) | Error::Format { .. } => 2,
        _ => 1,
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

fn extents3(v: &[usize]) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(v).map_err(|_| Error::argument(format!("expected three extents, got {v:?}")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("writing output", e);
    match command {
        Command::Crossval {
            config,
            manifest,
            out: dir,
            jobs,
            quiet,
        } => {
            require_file(&config, "config")?;
            require_file(&manifest, "manifest")?;
            let cfg = RunConfig::load(&config)?;
            let manifest = Manifest::read(&manifest)?;
            crossval(&cfg, &manifest, &dir, jobs, quiet, out)
        }
        Command::Eval {
            checkpoint,
            manifest,
            threshold,
            roc_out,
            scores_out,
        } => {
            require_file(&checkpoint, "checkpoint")?;
            require_file(&manifest, "manifest")?;
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = Manifest::read(&manifest)?;
            let cfg = &ck.meta.config;
            let model = model_from_checkpoint(&ck)?;
            let samples = load_dataset(&manifest, cfg.data.extents, cfg.data.normalize)?;
            let refs: Vec<_> = samples.iter().collect();
            let ev = evaluate(&model, &refs, threshold)?;
            let cm = ev.confusion;
            writeln!(out, "subjects: {}", samples.len()).map_err(io)?;
            writeln!(out, "threshold: {threshold}").map_err(io)?;
            writeln!(out, "accuracy: {}", ev.accuracy).map_err(io)?;
            writeln!(out, "auc: {}", ev.auc).map_err(io)?;
            writeln!(out, "confusion: tp={} fp={} tn={} fn={}", cm.tp, cm.fp, cm.tn, cm.fn_).map_err(io)?;
            let hash = &ck.meta.config_hash;
            if let Some(path) = roc_out {
                let curve = roc_curve(&ev.scores, &ev.labels)?;
                write_file(&path, format!("# config_hash={hash}\n{}", roc_to_csv(&curve)))?;
            }
            if let Some(path) = scores_out {
                let mut text = format!("# config_hash={hash}\nsubject_id,label,logit,score\n");
                for chunk in refs.chunks(crate::train::EVAL_BATCH) {
                    let logits = model.logits(&crate::data::stack::<f32>(chunk)?)?;
                    for (s, &z) in chunk.iter().zip(logits.data()) {
                        text.push_str(&format!("{},{},{},{}\n", s.id, s.label, z, logistic(z as f64)));
                    }
                }
                write_file(&path, text)?;
            }
            Ok(())
        }
        Command::CountParams {
            preset,
            rank,
            in_channels,
            hidden,
        } => {
            let backbone = BackboneConfig::preset(&preset, in_channels).map_err(|e| Error::Config(e.to_string()))?;
            if rank == 0 {
                return Err(Error::Config("rank must be positive".into()));
            }
            let lora = LoraSettings {
                rank,
                ..LoraSettings::default()
            };
            let head = HeadSettings {
                hidden,
                ..HeadSettings::default()
            };
            let count = count_trainable(&backbone, &lora, &head);
            writeln!(out, "preset: {preset}").map_err(io)?;
            writeln!(out, "rank: {rank}").map_err(io)?;
            writeln!(out, "layer,params").map_err(io)?;
            for (name, n) in &count.breakdown {
                writeln!(out, "{name},{n}").map_err(io)?;
            }
            let head_total: usize = count.breakdown.iter().filter(|(n, _)| n.starts_with("head.")).map(|(_, c)| c).sum();
            writeln!(out, "adapters: {}", count.total - head_total).map_err(io)?;
            writeln!(out, "head: {head_total}").map_err(io)?;
            writeln!(out, "total: {}", count.total).map_err(io)?;
            Ok(())
        }
        Command::Flops {
            preset,
            extents,
            in_channels,
            hidden,
        } => {
            let backbone = BackboneConfig::preset(&preset, in_channels).map_err(|e| Error::Config(e.to_string()))?;
            let head = HeadSettings {
                hidden,
                ..HeadSettings::default()
            };
            let ext = extents3(&extents)?;
            let report = flops_estimate(&backbone, &head, ext).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(out, "preset: {preset}").map_err(io)?;
            writeln!(out, "input: {}x{}x{}x{}", in_channels, ext[0], ext[1], ext[2]).map_err(io)?;
            writeln!(out, "layer,macs").map_err(io)?;
            for (name, m) in &report.rows {
                writeln!(out, "{name},{m}").map_err(io)?;
            }
            writeln!(out, "total_macs: {}", report.total_macs).map_err(io)?;
            writeln!(out, "total_flops: {}", report.total_flops).map_err(io)?;
            writeln!(out, "tflops: {:.4}", report.total_flops as f64 / 1e12).map_err(io)?;
            Ok(())
        }
        Command::MergeLora { checkpoint, out: path } => {
            require_file(&checkpoint, "checkpoint")?;
            let merged = merge_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            merged.save(&path)?;
            writeln!(out, "wrote {} ({} tensors)", path.display(), merged.tensors.len()).map_err(io)?;
            Ok(())
        }
        Command::GenSynth {
            out: dir,
            n,
            seed,
            extents,
            separation,
            channels,
        } => {
            let spec = SynthSpec {
                n_per_class: n,
                extents: extents3(&extents)?,
                channels,
                seed,
                separation,
            };
            let m = synth_generate(&dir, &spec)?;
            writeln!(out, "wrote {} subjects to {}", m.len(), dir.display()).map_err(io)?;
            Ok(())
        }
    }
}

/// Manifest with absolute volume paths, for files written outside the
/// original manifest directory.
fn absolute_rows(manifest: &Manifest, ids: &[String]) -> Manifest {
    let sub = manifest.subset(ids);
    let rows = sub
        .rows
        .iter()
        .map(|r| {
            let p = manifest.resolve(r);
            ManifestRow {
                path: fs::canonicalize(&p).unwrap_or(p),
                ..r.clone()
            }
        })
        .collect();
    Manifest {
        rows,
        base_dir: PathBuf::new(),
    }
}

fn crossval(
    cfg: &RunConfig,
    manifest: &Manifest,
    dir: &Path,
    jobs: usize,
    quiet: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let io = |e: std::io::Error| Error::io("writing output", e);
    let start = Instant::now();
    let samples = load_dataset(manifest, cfg.data.extents, cfg.data.normalize)?;
    let progress = |fold: usize, r: &crate::train::EpochRecord| {
        eprintln!(
            "fold {fold} epoch {} loss {:.4} val_acc {:.4} val_auc {:.4}",
            r.epoch, r.train_loss, r.val_acc, r.val_auc
        );
    };
    let outcome = run_crossval(cfg, manifest, &samples, jobs, if quiet { None } else { Some(&progress) })?;
    let report = RunReport::new(cfg, &outcome, start.elapsed().as_secs_f64());
    let hash = cfg.hash();
    create_dir(dir)?;
    for f in &outcome.folds {
        let fdir = dir.join(format!("fold{}", f.fold));
        create_dir(&fdir)?;
        write_file(&fdir.join("train_log.csv"), f.training.log.to_csv(&hash))?;
        let val = absolute_rows(manifest, &f.val_ids);
        write_file(&fdir.join("val_manifest.csv"), format!("# config_hash={hash}\n{}", val.to_csv()))?;
        for (kind, snap, file) in [
            (CheckpointKind::BestAcc, &f.training.best_acc, "best_acc.l3ck"),
            (CheckpointKind::BestAuc, &f.training.best_auc, "best_auc.l3ck"),
        ] {
            snapshot_checkpoint(cfg, f.fold, kind, snap, &f.model).save(&fdir.join(file))?;
        }
    }
    write_file(&dir.join("report.json"), report.to_json())?;
    writeln!(out, "config_hash: {hash}").map_err(io)?;
    writeln!(out, "fold,best_acc_epoch,acc,auc,best_auc_epoch,acc,auc").map_err(io)?;
    for f in &report.folds {
        writeln!(
            out,
            "{},{},{:.4},{:.4},{},{:.4},{:.4}",
            f.fold, f.best_acc.epoch, f.best_acc.accuracy, f.best_acc.auc, f.best_auc.epoch, f.best_auc.accuracy, f.best_auc.auc
        )
        .map_err(io)?;
    }
    for m in report.means.iter().chain(std::iter::once(&report.final_epoch_mean)) {
        writeln!(out, "mean {}: accuracy {:.4} auc {:.4}", m.variant, m.accuracy, m.auc).map_err(io)?;
    }
    writeln!(out, "trainable_params: {}", report.trainable_params).map_err(io)?;
    Ok(())
}

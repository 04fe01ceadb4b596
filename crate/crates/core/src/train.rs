//! Fold training, best-checkpoint selection and cross-validation.
//!
//! Random streams, all derived from the config seed:
//! - backbone draws: `seed`, stream 0, identical for every fold;
//! - adapter and head initialization: `seed + fold`, stream 1;
//! - batch shuffling and dropout: `seed + fold`, stream 2.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{stack, stratified_kfold, FoldSplit, Manifest, Sample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion, roc_auc, ConfusionMatrix};
use crate::model::{build_classifier, Classifier, Role, TensorMap};
use crate::optim::{bce_batch, default_groups, AdamW};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Validation decision threshold on the logistic score.
pub const THRESHOLD: f64 = 0.5;
/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

pub fn backbone_rng(cfg: &RunConfig) -> RandomSource {
    RandomSource::with_stream(cfg.seed, 0)
}

pub fn init_rng(cfg: &RunConfig, fold: usize) -> RandomSource {
    RandomSource::with_stream(cfg.seed.wrapping_add(fold as u64), 1)
}

pub fn train_rng(cfg: &RunConfig, fold: usize) -> RandomSource {
    RandomSource::with_stream(cfg.seed.wrapping_add(fold as u64), 2)
}

fn backbone_weights(cfg: &RunConfig) -> Result<Option<TensorMap<f32>>> {
    cfg.model
        .backbone_weights
        .as_ref()
        .map(|p| Checkpoint::load(p).map(|ck| ck.tensor_map()))
        .transpose()
}

/// Fresh model for `fold`: shared frozen backbone, fold-specific adapters
/// and head.
pub fn build_model(cfg: &RunConfig, fold: usize) -> Result<Classifier<f32>> {
    let weights = backbone_weights(cfg)?;
    build_classifier(
        &cfg.backbone()?,
        &cfg.model.lora,
        &cfg.model.head,
        weights.as_ref(),
        &mut backbone_rng(cfg),
        &mut init_rng(cfg, fold),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,train_loss,val_acc,val_auc` rows, preceded by a comment line
    /// carrying the config hash.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nepoch,train_loss,val_acc,val_auc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_acc, r.val_auc));
        }
        out
    }
}

/// Trainable tensors captured at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_acc: f64,
    pub val_auc: f64,
    pub tensors: TensorMap<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub auc: f64,
}

/// Scores every sample in evaluation mode and computes accuracy at
/// `threshold` and ROC AUC.
pub fn evaluate(model: &Classifier<f32>, samples: &[&Sample], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        scores.extend(model.predict_scores(&stack::<f32>(chunk)?)?);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&scores, &labels, threshold)?;
    Ok(Evaluation {
        accuracy: accuracy(&cm)?,
        auc: roc_auc(&scores, &labels)?,
        confusion: cm,
        scores,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldTraining {
    pub log: TrainLog,
    pub best_acc: Snapshot,
    pub best_auc: Snapshot,
}

pub type Progress<'a> = &'a (dyn Fn(usize, &EpochRecord) + Sync);

/// Train `model` for `cfg.train.epochs` epochs. After every epoch the
/// validation metrics are logged and the trainable tensors are kept when
/// they beat the best accuracy or best AUC so far; ties keep the earlier
/// epoch.
pub fn train_fold(
    model: &mut Classifier<f32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &RunConfig,
    rng: &mut RandomSource,
    fold: usize,
    progress: Option<Progress>,
) -> Result<FoldTraining> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold}: {} training and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let t = &cfg.train;
    let groups = default_groups(&model.trainable_names(), t.lr_lora, t.lr_head, t.weight_decay)?;
    let mut opt = AdamW::new(groups, t.adamw.clone())?;
    let mut log = TrainLog::default();
    let mut best_acc: Option<Snapshot> = None;
    let mut best_auc: Option<Snapshot> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=t.epochs {
        model.set_training(true);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for idx in order.chunks(t.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let x = stack::<f32>(&batch)?;
            let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
            let (logits, cache) = model.forward_cached(&x, Some(&mut *rng))?;
            let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
            let (loss, dz) = bce_batch(&z, &labels)?;
            loss_sum += loss * batch.len() as f64;
            let grad = Tensor::from_vec([dz.len()], dz.iter().map(|&g| g as f32).collect())?;
            let grads = model.backward(&cache, &grad)?;
            opt.step_model(model, &grads)?;
        }
        model.set_training(false);
        let ev = evaluate(model, val, THRESHOLD)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_acc: ev.accuracy,
            val_auc: ev.auc,
        };
        log.rows.push(rec);
        if let Some(p) = progress {
            p(fold, &rec);
        }
        let snapshot = || Snapshot {
            epoch,
            val_acc: ev.accuracy,
            val_auc: ev.auc,
            tensors: model.trainable_tensors(),
        };
        if best_acc.as_ref().is_none_or(|s| ev.accuracy > s.val_acc) {
            best_acc = Some(snapshot());
        }
        if best_auc.as_ref().is_none_or(|s| ev.auc > s.val_auc) {
            best_auc = Some(snapshot());
        }
    }
    Ok(FoldTraining {
        log,
        best_acc: best_acc.expect("at least one epoch"),
        best_auc: best_auc.expect("at least one epoch"),
    })
}

/// Everything one fold produces.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub training: FoldTraining,
    /// Model state after the last epoch.
    pub model: Classifier<f32>,
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub split: FoldSplit,
    pub folds: Vec<FoldOutcome>,
}

fn run_fold(
    cfg: &RunConfig,
    split: &FoldSplit,
    by_id: &HashMap<&str, &Sample>,
    fold: usize,
    progress: Option<Progress>,
) -> Result<FoldOutcome> {
    let val_ids = split.validation(fold).to_vec();
    let train_ids = split.training(fold);
    let pick = |ids: &[String]| -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Config(format!("subject {id:?} has no loaded sample")))
            })
            .collect()
    };
    let (train, val) = (pick(&train_ids)?, pick(&val_ids)?);
    let mut model = build_model(cfg, fold)?;
    let training = train_fold(&mut model, &train, &val, cfg, &mut train_rng(cfg, fold), fold, progress)?;
    Ok(FoldOutcome {
        fold,
        train_ids,
        val_ids,
        training,
        model,
    })
}

/// Stratified k-fold cross-validation. Each fold trains a fresh model;
/// with `jobs > 1` folds run on that many threads, and results are
/// ordered by fold index either way.
pub fn run_crossval(
    cfg: &RunConfig,
    manifest: &Manifest,
    samples: &[Sample],
    jobs: usize,
    progress: Option<Progress>,
) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let split = stratified_kfold(manifest, cfg.train.folds, cfg.seed)?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let k = split.k;
    let mut folds: Vec<FoldOutcome> = if jobs <= 1 {
        (0..k)
            .map(|f| run_fold(cfg, &split, &by_id, f, progress))
            .collect::<Result<_>>()?
    } else {
        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::with_capacity(k));
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(k) {
                scope.spawn(|| loop {
                    let f = next.fetch_add(1, Ordering::SeqCst);
                    if f >= k {
                        break;
                    }
                    let r = run_fold(cfg, &split, &by_id, f, progress);
                    results.lock().expect("no panics while holding the lock").push((f, r));
                });
            }
        });
        let mut results = results.into_inner().expect("threads joined");
        results.sort_by_key(|(f, _)| *f);
        results.into_iter().map(|(_, r)| r).collect::<Result<_>>()?
    };
    folds.sort_by_key(|f| f.fold);
    Ok(CrossvalOutcome { split, folds })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VariantMetrics {
    pub epoch: usize,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub best_acc: VariantMetrics,
    pub best_auc: VariantMetrics,
    pub final_epoch: VariantMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanRow {
    pub variant: String,
    pub accuracy: f64,
    pub auc: f64,
}

/// Cross-validation report. `means` holds the best-accuracy and best-AUC
/// checkpoint rows; selection uses the validation fold itself, so
/// `final_epoch_mean` is the unselected reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub trainable_params: usize,
    pub n_subjects: usize,
    pub folds: Vec<FoldSummary>,
    pub means: Vec<MeanRow>,
    pub final_epoch_mean: MeanRow,
    pub wall_clock_seconds: f64,
}

fn mean_row(variant: &str, rows: &[VariantMetrics]) -> MeanRow {
    let n = rows.len() as f64;
    MeanRow {
        variant: variant.into(),
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        auc: rows.iter().map(|r| r.auc).sum::<f64>() / n,
    }
}

impl RunReport {
    pub fn new(cfg: &RunConfig, outcome: &CrossvalOutcome, wall_clock_seconds: f64) -> Self {
        let variant = |s: &Snapshot| VariantMetrics {
            epoch: s.epoch,
            accuracy: s.val_acc,
            auc: s.val_auc,
        };
        let folds: Vec<FoldSummary> = outcome
            .folds
            .iter()
            .map(|f| {
                let last = f.training.log.rows.last().expect("at least one epoch");
                FoldSummary {
                    fold: f.fold,
                    n_train: f.train_ids.len(),
                    n_val: f.val_ids.len(),
                    best_acc: variant(&f.training.best_acc),
                    best_auc: variant(&f.training.best_auc),
                    final_epoch: VariantMetrics {
                        epoch: last.epoch,
                        accuracy: last.val_acc,
                        auc: last.val_auc,
                    },
                }
            })
            .collect();
        let collect = |pick: fn(&FoldSummary) -> VariantMetrics| folds.iter().map(pick).collect::<Vec<_>>();
        let means = vec![
            mean_row("best_acc", &collect(|f| f.best_acc)),
            mean_row("best_auc", &collect(|f| f.best_auc)),
        ];
        let final_epoch_mean = mean_row("final_epoch", &collect(|f| f.final_epoch));
        let trainable_params = outcome.folds.first().map_or(0, |f| f.model.trainable_param_count().total);
        Self {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            trainable_params,
            n_subjects: outcome.split.folds.iter().map(Vec::len).sum(),
            folds,
            means,
            final_epoch_mean,
            wall_clock_seconds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Checkpoint of a snapshot. Frozen tensors are included when
/// `train.save_backbone` is set.
pub fn snapshot_checkpoint(
    cfg: &RunConfig,
    fold: usize,
    kind: CheckpointKind,
    snapshot: &Snapshot,
    model: &Classifier<f32>,
) -> Checkpoint {
    let mut tensors = snapshot.tensors.clone();
    if cfg.train.save_backbone {
        tensors.extend(model.backbone_tensors());
    }
    let meta = CheckpointMeta {
        kind,
        epoch: snapshot.epoch,
        fold,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        val_acc: Some(snapshot.val_acc),
        val_auc: Some(snapshot.val_auc),
        merged: false,
        includes_backbone: cfg.train.save_backbone,
        config: cfg.clone(),
    };
    Checkpoint::from_map(meta, &tensors)
}

/// Rebuild the model a checkpoint was taken from. Frozen tensors come from
/// the checkpoint when stored, otherwise from the embedded configuration.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Classifier<f32>> {
    let cfg = &ck.meta.config;
    cfg.validate()?;
    let table: TensorMap<f32> = ck.tensor_map();
    let mut model = if ck.meta.includes_backbone {
        build_classifier(
            &cfg.backbone()?,
            &cfg.model.lora,
            &cfg.model.head,
            Some(&table),
            &mut backbone_rng(cfg),
            &mut init_rng(cfg, ck.meta.fold),
        )?
    } else {
        build_model(cfg, ck.meta.fold)?
    };
    if ck.meta.merged {
        model = model.without_adapters();
    }
    let mut expected = Vec::new();
    model.visit(|n, role, _| {
        if role == Role::Trainable {
            expected.push(n.to_string());
        }
    });
    if let Some(missing) = expected.iter().find(|n| !table.contains_key(*n)) {
        return Err(Error::Load(format!("trainable tensor {missing:?} missing from checkpoint")));
    }
    model.load_tensors(&table)?;
    model.set_training(false);
    Ok(model)
}

/// Fold adapters into the frozen kernels; the result stores every tensor.
pub fn merge_checkpoint(ck: &Checkpoint) -> Result<Checkpoint> {
    if ck.meta.merged {
        return Err(Error::argument("checkpoint is already merged"));
    }
    let mut model = model_from_checkpoint(ck)?;
    model.merge_adapters();
    let mut tensors = model.backbone_tensors();
    tensors.extend(model.trainable_tensors());
    let meta = CheckpointMeta {
        kind: CheckpointKind::Merged,
        merged: true,
        includes_backbone: true,
        ..ck.meta.clone()
    };
    Ok(Checkpoint::from_map(meta, &tensors))
}

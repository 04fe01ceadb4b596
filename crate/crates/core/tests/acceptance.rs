//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use common::grad::{conv_case, numeric_grad, rel_error, weighted_sum, INSTANCES, TOL};
use lora3d::checkpoint::{Checkpoint, CheckpointKind};
use lora3d::data::{load_dataset, stratified_kfold, synth_generate, Manifest, ManifestRow, Sample, SynthSpec};
use lora3d::lora::{AdaptedConv3d, LoraAdapter};
use lora3d::metrics::{auc_rank_oracle, roc_auc};
use lora3d::model::{build_classifier, count_trainable, head_param_count, AdapterPath, BackboneConfig};
use lora3d::nn::{gelu, gelu_backward, Conv3d, Linear};
use lora3d::train::{
    build_model, evaluate, model_from_checkpoint, run_crossval, snapshot_checkpoint, train_fold, train_rng,
    CrossvalOutcome, RunReport, THRESHOLD,
};
use lora3d::{lora_param_count, HeadSettings, LoraSettings, RandomSource, RunConfig, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Shared end-to-end runs

const E2E_EXTENTS: [usize; 3] = [16, 16, 16];

/// Tiny preset with every training default, on the synthetic grid.
fn e2e_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.preset = "tiny".into();
    cfg.data.extents = E2E_EXTENTS;
    cfg
}

struct E2eRun {
    cfg: RunConfig,
    samples: Vec<Sample>,
    outcome: CrossvalOutcome,
    report: RunReport,
    seconds: f64,
}

/// Generate the default synthetic cohort on disk, load it back through the
/// manifest, and cross-validate.
fn e2e_run(separation: f64) -> E2eRun {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        extents: E2E_EXTENTS,
        separation,
        ..SynthSpec::default()
    };
    synth_generate(dir.path(), &spec).unwrap();
    let manifest = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
    let cfg = e2e_config();
    let samples = load_dataset(&manifest, cfg.data.extents, cfg.data.normalize).unwrap();
    let start = Instant::now();
    let outcome = run_crossval(&cfg, &manifest, &samples, 1, None).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let report = RunReport::new(&cfg, &outcome, seconds);
    E2eRun {
        cfg,
        samples,
        outcome,
        report,
        seconds,
    }
}

fn separated() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| e2e_run(2.0))
}

fn null() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| e2e_run(0.0))
}

// ---------------------------------------------------------------------------
// Criteria

fn ac1_init_noop() -> Outcome {
    let mut worst = 0.0f64;
    for preset in ["tiny", "resnet50-3d"] {
        let config = BackboneConfig::preset(preset, 2).unwrap();
        for seed in 0..5u64 {
            let model = build_classifier::<f32>(
                &config,
                &LoraSettings::default(),
                &HeadSettings::default(),
                None,
                &mut RandomSource::with_stream(seed, 0),
                &mut RandomSource::with_stream(seed, 1),
            )
            .unwrap();
            let frozen = model.without_adapters();
            ensure(model.conv_and_adapter_counts().1 == config.conv_specs().len(), || {
                format!("{preset}: not every convolution is adapted")
            })?;
            let x = Tensor::randn([2, 2, 16, 16, 16], &mut RandomSource::with_stream(seed, 9), 0.0, 1.0).unwrap();
            let d = model.logits(&x).unwrap().max_abs_diff(&frozen.logits(&x).unwrap()).unwrap();
            worst = worst.max(d);
            ensure(d <= 1e-6, || format!("{preset} seed {seed}: |Δlogit| = {d:e}"))?;
        }
    }
    Ok(format!("max |Δlogit| {worst:e} over 2 presets x 5 seeds (tol 1e-6)"))
}

fn ac2_merge_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_per_class: 4,
        extents: [16, 16, 16],
        ..SynthSpec::default()
    };
    let manifest = synth_generate(dir.path(), &spec).unwrap();
    let samples = load_dataset(&manifest, [16, 16, 16], true).unwrap();
    let set: Vec<&Sample> = samples.iter().collect();
    // Eight subjects in batches of four: two steps per epoch.
    let mut cfg = e2e_config();
    cfg.train.epochs = 25;
    let mut model = build_model(&cfg, 0).unwrap();
    train_fold(&mut model, &set, &set, &cfg, &mut train_rng(&cfg, 0), 0, None).unwrap();
    let max_b = model
        .trainable_tensors()
        .iter()
        .filter(|(n, _)| n.ends_with(".lora_b"))
        .flat_map(|(_, t)| t.data().to_vec())
        .fold(0.0f32, |m, v| m.max(v.abs()));
    ensure(max_b > 0.0, || "adapters did not move in 50 steps".into())?;

    let mut parallel = model.clone();
    parallel.set_adapter_path(AdapterPath::Parallel);
    let mut merged = model.clone();
    merged.merge_adapters();
    ensure(merged.conv_and_adapter_counts().1 == 0, || "merge left adapters behind".into())?;
    let mut r = RandomSource::new(2024);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let x = Tensor::randn([1, 2, 16, 16, 16], &mut r, 0.0, 1.0).unwrap();
        let d = merged.logits(&x).unwrap().max_abs_diff(&parallel.logits(&x).unwrap()).unwrap();
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("input {i}: |Δlogit| = {d:e}"))?;
    }
    Ok(format!("50 steps, max |B| {max_b:.2e}, max |Δlogit| {worst:e} over 20 inputs (tol 1e-5)"))
}

fn ac3_gradients() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |what: &'static str, analytic: &Tensor<f64>, numeric: &[f64]| {
        let e = rel_error(analytic.data(), numeric);
        let w = worst.entry(what).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..INSTANCES {
        let c = conv_case(seed);
        let conv = |w: &Tensor<f64>, b: &Tensor<f64>| Conv3d::new(w.clone(), Some(b.clone()), c.stride, c.padding).unwrap();
        let base = conv(&c.weight, &c.bias);
        let y = base.forward(&c.x).unwrap();
        let mut r = RandomSource::new(seed + 500);
        let coeff = Tensor::randn(y.shape().to_vec(), &mut r, 0.0, 1.0).unwrap();
        let g = base.backward(&c.x, &coeff).unwrap();
        record("conv3d weight", g.param("weight").unwrap(), &numeric_grad(&c.weight, |w| {
            weighted_sum(&conv(w, &c.bias).forward(&c.x).unwrap(), &coeff)
        }));
        record("conv3d bias", g.param("bias").unwrap(), &numeric_grad(&c.bias, |b| {
            weighted_sum(&conv(&c.weight, b).forward(&c.x).unwrap(), &coeff)
        }));
        record("conv3d input", &g.input, &numeric_grad(&c.x, |x| weighted_sum(&base.forward(x).unwrap(), &coeff)));

        let [d_out, d_in, k, _, _] = <[usize; 5]>::try_from(c.weight.shape()).unwrap();
        let rank = 1 + r.below(d_out.min(d_in * k * k * k).min(3));
        let a = Tensor::randn([rank, d_in * k * k * k], &mut r, 0.0, 0.5).unwrap();
        let b = Tensor::randn([d_out, rank], &mut r, 0.0, 0.5).unwrap();
        let adapted = |a: &Tensor<f64>, b: &Tensor<f64>| {
            AdaptedConv3d::new(base.clone(), Some(LoraAdapter::from_factors(a.clone(), b.clone(), 1.0).unwrap())).unwrap()
        };
        let ga = adapted(&a, &b).backward(&c.x, &coeff).unwrap();
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| weighted_sum(&adapted(a, b).forward(&c.x).unwrap(), &coeff);
        record("adapter A", ga.param("lora_a").unwrap(), &numeric_grad(&a, |a| loss(a, &b)));
        record("adapter B", ga.param("lora_b").unwrap(), &numeric_grad(&b, |b| loss(&a, b)));

        let (n, fin, fout) = (1 + r.below(4), 1 + r.below(6), 1 + r.below(5));
        let x = Tensor::randn([n, fin], &mut r, 0.0, 1.0).unwrap();
        let w = Tensor::randn([fout, fin], &mut r, 0.0, 1.0).unwrap();
        let bias = Tensor::randn([fout], &mut r, 0.0, 1.0).unwrap();
        let lc = Tensor::randn([n, fout], &mut r, 0.0, 1.0).unwrap();
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>| Linear::new(w.clone(), b.clone()).unwrap();
        let gl = lin(&w, &bias).backward(&x, &lc).unwrap();
        record("linear weight", gl.param("weight").unwrap(), &numeric_grad(&w, |w| {
            weighted_sum(&lin(w, &bias).forward(&x).unwrap(), &lc)
        }));
        record("linear bias", gl.param("bias").unwrap(), &numeric_grad(&bias, |b| {
            weighted_sum(&lin(&w, b).forward(&x).unwrap(), &lc)
        }));
        record("linear input", &gl.input, &numeric_grad(&x, |x| weighted_sum(&lin(&w, &bias).forward(x).unwrap(), &lc)));

        let gx = Tensor::randn([3, 1 + r.below(10)], &mut r, 0.0, 2.0).unwrap();
        let gc = Tensor::randn(gx.shape().to_vec(), &mut r, 0.0, 1.0).unwrap();
        record("gelu", &gelu_backward(&gx, &gc).unwrap(), &numeric_grad(&gx, |x| weighted_sum(&gelu(x), &gc)));
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(max <= TOL, || format!("relative error {max:e} > {TOL:e}: {detail}"))?;
    Ok(format!("{INSTANCES} instances, worst relative error per gradient: {detail} (tol {TOL:e})"))
}

fn ac4_frozen_backbone() -> Outcome {
    let run = separated();
    let init = build_model(&run.cfg, 0).unwrap().backbone_tensors();
    let n: usize = init.values().map(|t| t.len()).sum();
    for f in &run.outcome.folds {
        let after = f.model.backbone_tensors();
        ensure(after.keys().eq(init.keys()), || format!("fold {}: backbone tensor set changed", f.fold))?;
        for (name, t) in &init {
            let same = t.shape() == after[name].shape()
                && t.data().iter().zip(after[name].data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("fold {}: {name} changed", f.fold))?;
        }
    }
    Ok(format!(
        "{} backbone tensors ({n} values) bit-identical in all {} folds after {} epochs",
        init.len(),
        run.outcome.folds.len(),
        run.cfg.train.epochs
    ))
}

fn ac5_accounting() -> Outcome {
    let lora = LoraSettings::default();
    let head = HeadSettings::default();
    let tiny = BackboneConfig::tiny(2);
    let summed: usize = tiny
        .conv_specs()
        .iter()
        .map(|s| lora_param_count(s.d_out, s.d_in, s.kernel, lora.rank))
        .sum::<usize>()
        + head_param_count(tiny.feature_dim(), head.hidden);
    let model = build_model(&e2e_config(), 0).unwrap();
    let tensor_sum: usize = model.trainable_tensors().values().map(|t| t.len()).sum();
    let counted = count_trainable(&tiny, &lora, &head).total;
    ensure(summed == counted && counted == tensor_sum, || {
        format!("tiny: formula {summed}, counter {counted}, tensors {tensor_sum}")
    })?;

    let big = BackboneConfig::resnet50_3d(2);
    let count = count_trainable(&big, &lora, &head);
    let head_total: usize = count.breakdown.iter().filter(|(n, _)| n.starts_with("head.")).map(|(_, c)| c).sum();
    ensure(head_total == 262_401, || format!("head subtotal {head_total}, expected 262401"))?;
    let reference = 1_640_000.0;
    Ok(format!(
        "tiny total {counted} by formula, counter and tensor sizes; resnet50-3d r=4 total {} (adapters {}, head {head_total}) vs reference 1.64M, ratio {:.3}",
        count.total,
        count.total - head_total,
        count.total as f64 / reference
    ))
}

fn ac6_metric_oracle() -> Outcome {
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    ensure(worked == 0.75, || format!("worked example gave {worked}"))?;
    let mut r = RandomSource::new(6);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 2 + r.below(60);
        let mut labels: Vec<u8> = (0..n).map(|_| r.below(2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse grids produce ties.
        let grid = [3, 10, 1000][r.below(3)] as f64;
        let scores: Vec<f64> = (0..n).map(|_| (r.uniform() * grid).floor() / grid).collect();
        let d = (roc_auc(&scores, &labels).unwrap() - auc_rank_oracle(&scores, &labels).unwrap()).abs();
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("set {i}: |Δauc| = {d:e}"))?;
    }
    Ok(format!("worked example 0.75; max |trapezoid - rank| {worst:e} over 1000 sets (tol 1e-12)"))
}

fn e2e_summary(run: &E2eRun) -> String {
    let rows: Vec<String> = run
        .report
        .means
        .iter()
        .chain([&run.report.final_epoch_mean])
        .map(|m| format!("{} acc {:.4} auc {:.4}", m.variant, m.accuracy, m.auc))
        .collect();
    format!("{} ({:.0}s)", rows.join("; "), run.seconds)
}

fn ac7_learning_signal() -> Outcome {
    let sep = separated();
    let fin = &sep.report.final_epoch_mean;
    let sep_ok = fin.auc >= 0.9 && fin.accuracy >= 0.8;
    let nul = null();
    let nfin = &nul.report.final_epoch_mean;
    let null_ok = (0.4..=0.6).contains(&nfin.auc);
    let detail = format!(
        "separation 2 [{}] needs final auc >= 0.9, acc >= 0.8; separation 0 [{}] needs final auc in [0.4, 0.6]",
        e2e_summary(sep),
        e2e_summary(nul)
    );
    ensure(sep_ok && null_ok, || detail.clone())?;
    Ok(detail)
}

fn ac8_selection() -> Outcome {
    let run = separated();
    let by_id: HashMap<&str, &Sample> = run.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for f in &run.outcome.folds {
        let rows = &f.training.log.rows;
        let max_acc = rows.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);
        let max_auc = rows.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
        let (ba, bu) = (&f.training.best_acc, &f.training.best_auc);
        ensure(ba.val_acc == max_acc && bu.val_auc == max_auc, || {
            format!("fold {}: selected {} / {}, logged maxima {max_acc} / {max_auc}", f.fold, ba.val_acc, bu.val_auc)
        })?;
        ensure(rows[ba.epoch - 1].val_acc == ba.val_acc && rows[bu.epoch - 1].val_auc == bu.val_auc, || {
            format!("fold {}: snapshot epochs disagree with the log", f.fold)
        })?;
        let val: Vec<&Sample> = f.val_ids.iter().map(|id| by_id[id.as_str()]).collect();
        for (kind, snap, logged) in [
            (CheckpointKind::BestAcc, ba, ba.val_acc),
            (CheckpointKind::BestAuc, bu, bu.val_auc),
        ] {
            let bytes = snapshot_checkpoint(&run.cfg, f.fold, kind, snap, &f.model).encode().unwrap();
            let model = model_from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            let ev = evaluate(&model, &val, THRESHOLD).unwrap();
            let got = if kind == CheckpointKind::BestAcc { ev.accuracy } else { ev.auc };
            ensure(got == logged, || format!("fold {} {kind:?}: re-evaluated {got}, logged {logged}", f.fold))?;
        }
    }
    Ok(format!(
        "{} folds: both checkpoints hold the logged maxima and re-evaluate exactly",
        run.outcome.folds.len()
    ))
}

fn ac9_fold_partition() -> Outcome {
    let rows: Vec<ManifestRow> = (0..129)
        .map(|i| ManifestRow {
            subject_id: format!("s{i:03}"),
            label: u8::from(i >= 76),
            path: PathBuf::from(format!("s{i:03}.vol")),
        })
        .collect();
    let labels: HashMap<String, u8> = rows.iter().map(|r| (r.subject_id.clone(), r.label)).collect();
    let manifest = Manifest::new(rows, ".").unwrap();
    let seeds = 50u64;
    for seed in 0..seeds {
        let split = stratified_kfold(&manifest, 5, seed).unwrap();
        let mut seen: Vec<&String> = split.folds.iter().flatten().collect();
        seen.sort();
        let n = seen.len();
        seen.dedup();
        ensure(n == 129 && seen.len() == 129, || format!("seed {seed}: {n} assignments, {} distinct", seen.len()))?;
        for (i, fold) in split.folds.iter().enumerate() {
            let pos = fold.iter().filter(|id| labels[*id] == 1).count();
            let neg = fold.len() - pos;
            ensure((15..=16).contains(&neg) && (10..=11).contains(&pos), || {
                format!("seed {seed} fold {i}: {neg}/{pos}")
            })?;
        }
    }
    Ok(format!("76/53 split into folds of {{15,16}}/{{10,11}}, disjoint and exhaustive for {seeds} seeds"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lora3d")).args(args).output().map_err(|e| e.to_string())?;
    ensure(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn ac10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    cli(&["gen-synth", "--out", &s(&d.join("data")), "--n", "10", "--extents", "8,8,8"])?;
    fs::write(d.join("run.toml"), "seed = 5\n[model]\npreset = \"tiny\"\n[data]\nextents = [8, 8, 8]\n[train]\nepochs = 4\n").unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        cli(&[
            "crossval",
            "--config",
            &s(&d.join("run.toml")),
            "--manifest",
            &s(&d.join("data/manifest.csv")),
            "--out",
            &s(&out),
            "--quiet",
        ])?;
        let mut files = files_under(&out);
        let report = files.get_mut(Path::new("report.json")).ok_or("no report.json")?;
        let mut json: serde_json::Value = serde_json::from_slice(report).map_err(|e| e.to_string())?;
        json.as_object_mut().unwrap().remove("wall_clock_seconds").ok_or("no wall_clock_seconds")?;
        *report = serde_json::to_vec(&json).unwrap();
        trees.push(files);
    }
    let checkpoints = trees[0].keys().filter(|p| p.extension().is_some_and(|e| e == "l3ck")).count();
    ensure(checkpoints == 10, || format!("{checkpoints} checkpoints written"))?;
    ensure(trees[0].keys().eq(trees[1].keys()), || "file sets differ".into())?;
    for (path, bytes) in &trees[0] {
        ensure(&trees[1][path] == bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!(
        "{} files identical across two runs, {checkpoints} checkpoints, report minus wall clock",
        trees[0].len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("init no-op", ac1_init_noop),
        ("merge equivalence", ac2_merge_equivalence),
        ("gradient exactness", ac3_gradients),
        ("frozen immutability", ac4_frozen_backbone),
        ("parameter accounting", ac5_accounting),
        ("metric oracle equivalence", ac6_metric_oracle),
        ("end-to-end learning signal", ac7_learning_signal),
        ("selection contract", ac8_selection),
        ("fold partition", ac9_fold_partition),
        ("determinism", ac10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("AC{:<2} PASS {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("AC{:<2} FAIL {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

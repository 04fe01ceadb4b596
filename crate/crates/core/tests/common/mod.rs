#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use lora3d::data::{synth_volume, Manifest, ManifestRow, Sample, SynthSpec};
use lora3d::{RandomSource, RunConfig};

/// In-memory synthetic subjects, alternating labels, already z-scored.
pub fn synth_samples(n_per_class: usize, extents: [usize; 3], separation: f64, seed: u64) -> (Manifest, Vec<Sample>) {
    let spec = SynthSpec {
        n_per_class,
        extents,
        channels: 2,
        seed,
        separation,
    };
    let mut rng = RandomSource::new(seed);
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for i in 0..2 * n_per_class {
        let label = (i % 2) as u8;
        let id = format!("s{i:03}");
        let volume = lora3d::data::normalize(&synth_volume(label, &spec, &mut rng).unwrap()).unwrap();
        rows.push(ManifestRow {
            subject_id: id.clone(),
            label,
            path: PathBuf::from(format!("{id}.vol")),
        });
        samples.push(Sample { id, label, volume });
    }
    (Manifest::new(rows, ".").unwrap(), samples)
}

/// Tiny preset on a small grid.
pub fn tiny_config(extents: [usize; 3], epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.preset = "tiny".into();
    cfg.data.extents = extents;
    cfg.train.epochs = epochs;
    cfg
}

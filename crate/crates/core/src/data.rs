//! Volume files, resampling, normalization, manifests, fold splits and the
//! synthetic two-class generator.
//!
//! `VOL1` layout, all integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `VOL1` |
//! | 4 | 4 | channels `c` (u32) |
//! | 8 | 12 | extents `D, H, W` (u32 each) |
//! | 20 | 1 | dtype code, `0` = f32 |
//! | 21 | `4·c·D·H·W` | voxels, `[c, D, H, W]` row-major |

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{DType, Scalar, Tensor};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
const VOLUME_HEADER: usize = 21;

pub fn encode_volume(v: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = v.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(Error::shape(format!("volume must be [c, D, H, W] with positive extents, got {s:?}")));
    }
    let mut out = Vec::with_capacity(VOLUME_HEADER + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for &e in s {
        let e = u32::try_from(e).map_err(|_| Error::shape(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(DType::F32.code());
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file ends inside the magic"));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"VOL1\"", &bytes[..4])));
    }
    let mut shape = [0usize; 4];
    for (i, slot) in shape.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        let field = bytes
            .get(at..at + 4)
            .ok_or_else(|| Error::format(bytes.len() as u64, "file ends inside the header"))?;
        let v = u32::from_le_bytes(field.try_into().expect("4 bytes"));
        if v == 0 {
            return Err(Error::format(at as u64, "zero extent"));
        }
        *slot = v as usize;
    }
    let dtype = *bytes
        .get(20)
        .ok_or_else(|| Error::format(bytes.len() as u64, "file ends before the dtype code"))?;
    if dtype != DType::F32.code() {
        return Err(Error::format(20, format!("unsupported dtype code {dtype}, volumes are f32 (0)")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(4, "payload size overflows"))?;
    let payload = &bytes[VOLUME_HEADER..];
    if payload.len() < count {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {count} bytes", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(Error::format((VOLUME_HEADER + count) as u64, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_volume(path: &Path, v: &Tensor<f32>) -> Result<()> {
    let bytes = encode_volume(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_volume(&bytes)
}

/// Per-axis sampling plan: for each target index, the two source indices and
/// the weight of the upper one.
fn axis_plan(source: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|t| {
            let pos = if target == 1 {
                (source - 1) as f64 / 2.0
            } else {
                t as f64 * (source - 1) as f64 / (target - 1) as f64
            };
            let lo = (pos.floor() as usize).min(source - 1);
            let hi = (lo + 1).min(source - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of `[c, D, H, W]` with corner-aligned coordinates:
/// target index `t` samples source position `t·(S−1)/(T−1)`, or the centre
/// `(S−1)/2` when `T = 1`.
pub fn resize_trilinear<T: Scalar>(v: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let s = v.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(Error::shape(format!("volume must be [c, D, H, W] with positive extents, got {s:?}")));
    }
    if target.contains(&0) {
        return Err(Error::shape(format!("target extents must be positive, got {target:?}")));
    }
    let (c, src) = (s[0], [s[1], s[2], s[3]]);
    let [pd, ph, pw] = [0, 1, 2].map(|a| axis_plan(src[a], target[a]));
    let src_plane = src[1] * src[2];
    let src_vol = src[0] * src_plane;
    let x = v.data();
    let mut out = Vec::with_capacity(c * target.iter().product::<usize>());
    for ch in 0..c {
        let base = ch * src_vol;
        for &(d0, d1, fd) in &pd {
            for &(h0, h1, fh) in &ph {
                for &(w0, w1, fw) in &pw {
                    let at = |d: usize, h: usize, w: usize| Scalar::to_f64(x[base + d * src_plane + h * src[2] + w]);
                    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                    let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), fw);
                    let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), fw);
                    let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), fw);
                    let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), fw);
                    let val = lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd);
                    out.push(T::from_f64(val));
                }
            }
        }
    }
    Tensor::from_vec([c, target[0], target[1], target[2]], out)
}

pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-channel z-score of `[c, ...]`: `(x − mean_c) / (std_c + 1e-8)` with
/// the population standard deviation.
pub fn normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let s = v.shape();
    if s.is_empty() || s[0] == 0 {
        return Err(Error::shape(format!("normalize needs a leading channel axis, got {s:?}")));
    }
    let per = v.len() / s[0];
    let mut out = v.clone();
    if per == 0 {
        return Ok(out);
    }
    for chunk in out.data_mut().chunks_mut(per) {
        let n = per as f64;
        let mean = chunk.iter().map(|&x| x.to_f64()).sum::<f64>() / n;
        let var = chunk.iter().map(|&x| (x.to_f64() - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + NORMALIZE_EPS;
        for x in chunk.iter_mut() {
            *x = T::from_f64((Scalar::to_f64(*x) - mean) / denom);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub label: u8,
    /// As written in the manifest; relative paths resolve against
    /// [`Manifest::base_dir`].
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if r.label > 1 {
                return Err(Error::Config(format!("subject {:?} has label {}, expected 0 or 1", r.subject_id, r.label)));
            }
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::Config(format!("duplicate subject id {:?}", r.subject_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.rows.iter().filter(|r| r.label == 1).count();
        [self.rows.len() - pos, pos]
    }

    /// Parse `subject_id,label,path` rows after a header line.
    pub fn from_csv(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Config(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["subject_id", "label", "path"] {
            return Err(Error::Config(format!(
                "manifest header must be subject_id,label,path, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<ManifestRow>() {
            rows.push(rec.map_err(|e| Error::Config(format!("manifest row: {e}")))?);
        }
        Self::new(rows, base_dir)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_csv(&text, base)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,label,path\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.subject_id, r.label, r.path.display()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Rows whose ids are in `ids`, in manifest order.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            rows: self.rows.iter().filter(|r| keep.contains(r.subject_id.as_str())).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Validation folds of a stratified k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every id outside fold `fold`, in fold order.
    pub fn training(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Shuffle each class with one seeded stream (label 0 first) and deal the
/// subjects round-robin into `k` folds. Dealing continues across classes,
/// so total fold sizes also differ by at most one.
pub fn stratified_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let counts = manifest.class_counts();
    for (label, &n) in counts.iter().enumerate() {
        if n < k {
            return Err(Error::Config(format!("class {label} has {n} subjects, fewer than {k} folds")));
        }
    }
    let mut rng = RandomSource::new(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for label in 0..2u8 {
        let mut ids: Vec<String> = manifest
            .rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.subject_id.clone())
            .collect();
        rng.shuffle(&mut ids);
        for id in ids {
            folds[next % k].push(id);
            next += 1;
        }
    }
    Ok(FoldSplit { k, seed, folds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub volume: Tensor<f32>,
}

/// Load every manifest row, resampling to `extents` when the stored grid
/// differs, then z-scoring each channel when `normalize_channels` is set.
pub fn load_dataset(manifest: &Manifest, extents: [usize; 3], normalize_channels: bool) -> Result<Vec<Sample>> {
    manifest
        .rows
        .iter()
        .map(|r| {
            let path = manifest.resolve(r);
            let mut v = load_volume(&path)?;
            if v.shape()[1..] != extents {
                v = resize_trilinear(&v, extents)?;
            }
            if normalize_channels {
                v = normalize(&v)?;
            }
            Ok(Sample {
                id: r.subject_id.clone(),
                label: r.label,
                volume: v,
            })
        })
        .collect()
}

/// Stack samples into a batch `[n, c, D, H, W]`.
pub fn stack<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::argument("cannot stack an empty batch"))?;
    let shape = first.volume.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.volume.len());
    for s in samples {
        if s.volume.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "sample {:?} has shape {:?}, batch expects {shape:?}",
                s.id,
                s.volume.shape()
            )));
        }
        data.extend(s.volume.data().iter().map(|&x| T::from_f64(x as f64)));
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::from_vec(full, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Subjects per class.
    pub n_per_class: usize,
    pub extents: [usize; 3],
    pub channels: usize,
    pub seed: u64,
    pub separation: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            extents: [16, 16, 16],
            channels: 2,
            seed: 0,
            separation: 2.0,
        }
    }
}

/// Unit-peak Gaussian centred in the grid, per-axis σ = extent/4.
fn centred_blob(extents: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = n as f64 / 4.0;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let (gd, gh, gw) = (axis(extents[0]), axis(extents[1]), axis(extents[2]));
    let mut out = Vec::with_capacity(extents.iter().product());
    for &a in &gd {
        for &b in &gh {
            for &c in &gw {
                out.push(a * b * c);
            }
        }
    }
    out
}

/// White noise smoothed by a periodic 3³ box, rescaled to unit variance.
fn smoothed_noise(extents: [usize; 3], rng: &mut RandomSource) -> Vec<f64> {
    let [d, h, w] = extents;
    let white: Vec<f64> = (0..d * h * w).map(|_| rng.standard_normal()).collect();
    let norm = 27f64.sqrt();
    let mut out = vec![0.0; white.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dz in [d - 1, 0, 1] {
                    for dy in [h - 1, 0, 1] {
                        for dx in [w - 1, 0, 1] {
                            let (zz, yy, xx) = ((z + dz) % d, (y + dy) % h, (x + dx) % w);
                            acc += white[(zz * h + yy) * w + xx];
                        }
                    }
                }
                out[(z * h + y) * w + x] = acc / norm;
            }
        }
    }
    out
}

/// One synthetic subject: smoothed noise per channel, and for label 1 a
/// centred blob of height `separation` added to channel 0 and of height
/// `separation/2` subtracted from channel 1.
pub fn synth_volume(label: u8, spec: &SynthSpec, rng: &mut RandomSource) -> Result<Tensor<f32>> {
    let blob = centred_blob(spec.extents);
    let mut data = Vec::with_capacity(spec.channels * blob.len());
    for ch in 0..spec.channels {
        let noise = smoothed_noise(spec.extents, rng);
        let gain = match (label, ch) {
            (1, 0) => spec.separation,
            (1, 1) => -0.5 * spec.separation,
            _ => 0.0,
        };
        data.extend(noise.iter().zip(&blob).map(|(n, b)| (n + gain * b) as f32));
    }
    let [d, h, w] = spec.extents;
    Tensor::from_vec([spec.channels, d, h, w], data)
}

/// Write `2·n_per_class` volumes and `manifest.csv` into `out_dir`.
/// Subject `i` is `synth_{i:04}` with label `i mod 2`.
pub fn synth_generate(out_dir: &Path, spec: &SynthSpec) -> Result<Manifest> {
    if spec.n_per_class == 0 {
        return Err(Error::argument("synthetic set needs at least one subject per class"));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::argument(format!("separation must be finite and non-negative, got {}", spec.separation)));
    }
    if spec.channels == 0 || spec.extents.contains(&0) {
        return Err(Error::argument("channels and extents must be positive"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut rng = RandomSource::new(spec.seed);
    let mut rows = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..2 * spec.n_per_class {
        let label = (i % 2) as u8;
        let id = format!("synth_{i:04}");
        let file = format!("{id}.vol");
        save_volume(&out_dir.join(&file), &synth_volume(label, spec, &mut rng)?)?;
        rows.push(ManifestRow {
            subject_id: id,
            label,
            path: PathBuf::from(file),
        });
    }
    let manifest = Manifest::new(rows, out_dir)?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

//! Synthetic classification datasets in `[0, 1]` feature space and the MMDS
//! file format.
//!
//! ```text
//! "MMDS" | version u32 | classes u32 | samples u32 | rank u8 | dims u32 * rank
//! features f64 * (samples * prod(dims)) | labels u16 * samples
//! metadata (u32 len + UTF-8 `key=value` lines)
//! ```
//!
//! `rank`/`dims` describe one sample. All integers and floats little-endian.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::{ReadError, Reader, Writer};
use crate::tensorcore::Tensor;

const MAGIC: &[u8; 4] = b"MMDS";
const VERSION: u32 = 1;
const PATCH: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("not a dataset (bad magic bytes)")]
    NotADataset,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated dataset: {0}")]
    Truncated(String),
    #[error("sample {index} has label {label}, but the dataset has {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("cannot access dataset {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<ReadError> for DatasetError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Truncated(_) => DatasetError::Truncated(e.to_string()),
            ReadError::Utf8(_) => DatasetError::Corrupt(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::Corrupt(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Generator name, seed, noise, margin and any generator parameters.
    pub meta: BTreeMap<String, String>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Nominal noiseless class separation in feature units.
    pub fn margin(&self) -> Option<f64> {
        self.meta.get("margin")?.parse().ok()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.features.shape().first() != Some(&self.labels.len()) {
            return Err(DatasetError::Corrupt(format!(
                "{} labels for features of shape {:?}",
                self.labels.len(),
                self.features.shape()
            )));
        }
        for (index, &label) in self.labels.iter().enumerate() {
            if label >= self.classes {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label,
                    classes: self.classes,
                });
            }
        }
        if let Some(v) = self.features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::Corrupt(format!("feature value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    rng
}

fn normal(noise: f64) -> Result<Normal<f64>, DatasetError> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(DatasetError::Invalid(format!("noise must be >= 0, got {noise}")));
    }
    Ok(Normal::new(0.0, noise).expect("validated"))
}

/// Uniform scale and offset mapping a raw box (padded by `pad`) into the unit
/// square, centred along the shorter side.
struct UnitMap {
    scale: f64,
    offset: [f64; 2],
}

impl UnitMap {
    fn new(lo: [f64; 2], hi: [f64; 2], pad: f64) -> Self {
        let ext = [hi[0] - lo[0] + 2.0 * pad, hi[1] - lo[1] + 2.0 * pad];
        let scale = 1.0 / ext[0].max(ext[1]);
        let offset = [0, 1].map(|k| (1.0 - ext[k] * scale) / 2.0 - (lo[k] - pad) * scale);
        Self { scale, offset }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| (p[k] * self.scale + self.offset[k]).clamp(0.0, 1.0))
    }
}

fn moon(label: usize, t: f64) -> [f64; 2] {
    if label == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// Smallest distance between the two noiseless half-circles.
fn moons_gap() -> f64 {
    let k = 1000;
    let ts: Vec<f64> = (0..=k).map(|i| PI * i as f64 / k as f64).collect();
    let mut best = f64::INFINITY;
    for &a in &ts {
        let p = moon(0, a);
        for &b in &ts {
            let q = moon(1, b);
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    best
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Two interleaving half-circles with isotropic Gaussian noise. Class 0 gets
/// `ceil(n/2)` points. The raw box padded by `3σ` is mapped uniformly into the
/// unit square and stray points are clamped.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64, split: Split) -> Result<DatasetBundle, DatasetError> {
    if n < 2 {
        return Err(DatasetError::Invalid(format!("two-moons needs n >= 2, got {n}")));
    }
    let dist = normal(noise)?;
    let mut rng = rng_for(seed, split);
    let map = UnitMap::new([-1.0, -0.5], [2.0, 1.0], 3.0 * noise);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random_range(0.0..=PI);
        let p = moon(label, t);
        let e = [dist.sample(&mut rng), dist.sample(&mut rng)];
        data.extend(map.apply([p[0] + e[0], p[1] + e[1]]));
        labels.push(label);
    }
    let margin = moons_gap() * map.scale;
    Ok(DatasetBundle {
        features: Tensor::from_parts(vec![n, 2], data),
        labels,
        classes: 2,
        split,
        meta: meta(&[
            ("generator", "two-moons".into()),
            ("seed", seed.to_string()),
            ("noise", noise.to_string()),
            ("margin", margin.to_string()),
        ]),
    })
}

fn grid_centers(classes: usize, spacing: f64) -> Vec<[f64; 2]> {
    let cols = (classes as f64).sqrt().ceil() as usize;
    (0..classes)
        .map(|c| [(c % cols) as f64 * spacing, (c / cols) as f64 * spacing])
        .collect()
}

fn check_grid(classes: usize, per_class: usize, spacing: f64) -> Result<(), DatasetError> {
    if classes < 2 || per_class < 1 {
        return Err(DatasetError::Invalid(format!(
            "blob grid needs classes >= 2 and per_class >= 1, got {classes} and {per_class}"
        )));
    }
    if classes > u16::MAX as usize + 1 {
        return Err(DatasetError::Invalid(format!("too many classes: {classes}")));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(DatasetError::Invalid(format!("spacing must be > 0, got {spacing}")));
    }
    Ok(())
}

/// Noisy 2-D points per class, plus the centres, in raw units.
fn grid_points(
    classes: usize,
    per_class: usize,
    spacing: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f64; 2]>, Vec<usize>, Vec<[f64; 2]>), DatasetError> {
    let dist = normal(noise)?;
    let centers = grid_centers(classes, spacing);
    let mut points = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        let e = [dist.sample(rng), dist.sample(rng)];
        points.push([centers[c][0] + e[0], centers[c][1] + e[1]]);
        labels.push(c);
    }
    Ok((points, labels, centers))
}

fn grid_map(centers: &[[f64; 2]], spacing: f64, noise: f64) -> UnitMap {
    let hi = centers
        .iter()
        .fold([0.0f64; 2], |a, c| [a[0].max(c[0]), a[1].max(c[1])]);
    UnitMap::new([0.0, 0.0], hi, (3.0 * noise).max(spacing / 2.0))
}

/// Gaussian blobs on a square grid of pitch `spacing`, labels cycling over
/// classes. The `margin` entry is the grid pitch in feature units.
pub fn gen_blob_grid(
    classes: usize,
    per_class: usize,
    spacing: f64,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<DatasetBundle, DatasetError> {
    check_grid(classes, per_class, spacing)?;
    let mut rng = rng_for(seed, split);
    let (points, labels, centers) = grid_points(classes, per_class, spacing, noise, &mut rng)?;
    let map = grid_map(&centers, spacing, noise);
    let data = points.iter().flat_map(|&p| map.apply(p)).collect();
    Ok(DatasetBundle {
        features: Tensor::from_parts(vec![labels.len(), 2], data),
        labels,
        classes,
        split,
        meta: meta(&[
            ("generator", "blobs".into()),
            ("seed", seed.to_string()),
            ("noise", noise.to_string()),
            ("spacing", spacing.to_string()),
            ("margin", (spacing * map.scale).to_string()),
        ]),
    })
}

/// Gaussian bump of width 0.15 centred at `p` on an 8x8 pixel grid over `[0,1]²`.
fn render(p: [f64; 2]) -> Vec<f64> {
    let w2 = 2.0 * 0.15f64.powi(2);
    let px = |i: usize| (i as f64 + 0.5) / PATCH as f64;
    let mut img = Vec::with_capacity(PATCH * PATCH);
    for r in 0..PATCH {
        for c in 0..PATCH {
            let d2 = (px(c) - p[0]).powi(2) + (px(r) - p[1]).powi(2);
            img.push((-d2 / w2).exp());
        }
    }
    img
}

/// Image-shaped blob grid: each point is rendered as a `1x8x8` intensity patch.
/// The `margin` entry is the smallest L∞ distance between two class prototypes.
pub fn gen_blob_patches(
    classes: usize,
    per_class: usize,
    spacing: f64,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<DatasetBundle, DatasetError> {
    check_grid(classes, per_class, spacing)?;
    let mut rng = rng_for(seed, split);
    let (points, labels, centers) = grid_points(classes, per_class, spacing, noise, &mut rng)?;
    let map = grid_map(&centers, spacing, noise);
    let data: Vec<f64> = points.iter().flat_map(|&p| render(map.apply(p))).collect();
    let protos: Vec<Vec<f64>> = centers.iter().map(|&c| render(map.apply(c))).collect();
    let mut margin = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d = protos[a]
                .iter()
                .zip(&protos[b])
                .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
            margin = margin.min(d);
        }
    }
    Ok(DatasetBundle {
        features: Tensor::from_parts(vec![labels.len(), 1, PATCH, PATCH], data),
        labels,
        classes,
        split,
        meta: meta(&[
            ("generator", "patches".into()),
            ("seed", seed.to_string()),
            ("noise", noise.to_string()),
            ("spacing", spacing.to_string()),
            ("margin", margin.to_string()),
        ]),
    })
}

pub fn encode_dataset(bundle: &DatasetBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(bundle.classes as u32);
    w.u32(bundle.len() as u32);
    let dims = bundle.sample_shape();
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
    for &v in bundle.features.data() {
        w.f64(v);
    }
    for &l in &bundle.labels {
        w.u16(l as u16);
    }
    let mut lines = format!("split={}\n", bundle.split);
    for (k, v) in &bundle.meta {
        lines.push_str(&format!("{k}={v}\n"));
    }
    w.str(&lines);
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetBundle, DatasetError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(DatasetError::NotADataset);
    }
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let classes = r.u32("class count")? as usize;
    let n = r.u32("sample count")? as usize;
    let rank = r.u8("feature rank")? as usize;
    let dims = (0..rank)
        .map(|_| r.u32("dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let numel = n.saturating_mul(dims.iter().product());
    if numel.saturating_mul(8) > r.remaining() {
        return Err(DatasetError::Truncated("features".into()));
    }
    let data = (0..numel).map(|_| r.f64("features")).collect::<Result<Vec<_>, _>>()?;
    let labels = (0..n)
        .map(|_| r.u16("labels").map(|l| l as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let text = r.str("metadata")?;
    if r.remaining() != 0 {
        return Err(DatasetError::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DatasetError::Corrupt(format!("metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let split = meta
        .remove("split")
        .ok_or_else(|| DatasetError::Corrupt("missing split".into()))?
        .parse()?;
    let mut shape = vec![n];
    shape.extend(dims);
    let features = Tensor::new(shape, data).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    let bundle = DatasetBundle {
        features,
        labels,
        classes,
        split,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_dataset(bundle: &DatasetBundle, path: &Path) -> Result<(), DatasetError> {
    bundle.validate()?;
    fs::write(path, encode_dataset(bundle)).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<DatasetBundle, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_dataset(&bytes)
}

//! Datasets: IDX image files, closed-form synthetic tasks, batching.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × features` or `N × C × H × W`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return invalid(format!("{} inputs but {} labels", inputs.rows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return invalid(format!("label {l} out of range for {classes} classes"));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Keep the first `n` samples.
    pub fn truncate(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Per-feature mean and standard deviation.
    pub fn compute_norm(&self) -> NormStats {
        let w = self.inputs.row_len();
        let n = self.len() as f64;
        let mut mean = vec![0f64; w];
        for r in 0..self.len() {
            for (m, &v) in mean.iter_mut().zip(self.inputs.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; w];
        for r in 0..self.len() {
            for ((s, &v), m) in var.iter_mut().zip(self.inputs.row(r)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| (s / n).sqrt() as f32).collect(),
        }
    }

    /// Standardize features with `stats`; constant features are only centered.
    pub fn normalize_with(&mut self, stats: &NormStats) {
        let w = self.inputs.row_len();
        for (i, v) in self.inputs.data_mut().iter_mut().enumerate() {
            let f = i % w;
            let sd = if stats.std[f] > 1e-12 { stats.std[f] } else { 1.0 };
            *v = ((*v as f64 - stats.mean[f] as f64) / sd as f64) as f32;
        }
        self.norm = Some(stats.clone());
    }

    /// Write `features..., label` rows with a header line.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let w = self.inputs.row_len();
        let header: Vec<String> = (0..w).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
        writeln!(f, "{}", header.join(","))?;
        for r in 0..self.len() {
            let row: Vec<String> = self.inputs.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{}", row.join(","), self.labels[r])?;
        }
        f.flush()?;
        Ok(())
    }
}

fn idx_err<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(Error::Idx {
        offset,
        reason: reason.into(),
    })
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => idx_err(offset.min(bytes.len()), "truncated header"),
    }
}

/// Parse an IDX image file: magic, then `N`, rows, cols, then `N·rows·cols`
/// unsigned bytes. Returns `N × 1 × rows × cols` in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    if bytes.is_empty() {
        return idx_err(0, "empty file");
    }
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return idx_err(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return idx_err(4, format!("zero dimension in {n}x{rows}x{cols}"));
    }
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return idx_err(bytes.len(), format!("truncated pixel data: need {need} bytes, have {}", payload.len()));
    }
    if payload.len() > need {
        return idx_err(16 + need, "trailing bytes after pixel data");
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.is_empty() {
        return idx_err(0, "empty file");
    }
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return idx_err(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return idx_err(bytes.len(), format!("truncated labels: need {n} bytes, have {}", payload.len()));
    }
    if payload.len() > n {
        return idx_err(8 + n, "trailing bytes after labels");
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label pair. The class count is `max label + 1`
/// (at least 2).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if x.rows() != y.len() {
        return idx_err(4, format!("image count {} does not match label count {}", x.rows(), y.len()));
    }
    let classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(x, y, classes)
}

/// Encode images (values in [0, 1], scaled back to bytes) and labels as IDX.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.inputs.shape();
    let (rows, cols) = match s.len() {
        4 if s[1] == 1 => (s[2], s[3]),
        3 => (s[1], s[2]),
        2 => (1, s[1]),
        _ => return invalid(format!("cannot encode shape {s:?} as IDX images")),
    };
    let mut img = Vec::with_capacity(16 + data.inputs.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &data.labels {
        if l > 255 {
            return invalid(format!("label {l} does not fit in an IDX byte"));
        }
        lab.push(l as u8);
    }
    Ok((img, lab))
}

pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(data)?;
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two isotropic Gaussians centred at (±1, 0).
    TwoClusters,
    /// Concentric circles of radius 1 (class 0) and 2 (class 1).
    Rings,
    /// Points in [-1, 1]², label = sign(x) xor sign(y).
    XorGrid,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_clusters" => Ok(Self::TwoClusters),
            "rings" => Ok(Self::Rings),
            "xor_grid" => Ok(Self::XorGrid),
            other => invalid(format!("unknown synthetic dataset kind {other:?}")),
        }
    }
}

/// Deterministic 2-D two-class task. Sample `i` has class `i % 2`, so
/// classes are balanced to within one sample.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    if !(noise >= 0.0) {
        return invalid(format!("noise must be >= 0, got {noise}"));
    }
    let mut rng = stream(seed, &[Purpose::Generate as u64, kind as u64]);
    let gauss = |rng: &mut crate::rng::StreamRng| -> f64 { StandardNormal.sample(rng) };
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (x, y) = match kind {
            SyntheticKind::TwoClusters => {
                let cx = if class == 0 { -1.0 } else { 1.0 };
                (cx + noise * gauss(&mut rng), noise * gauss(&mut rng))
            }
            SyntheticKind::Rings => {
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let r = (class + 1) as f64 + noise * gauss(&mut rng);
                (r * angle.cos(), r * angle.sin())
            }
            SyntheticKind::XorGrid => {
                // class 0: quadrants I and III, class 1: II and IV
                let mut x = rng.random::<f64>();
                let mut y = rng.random::<f64>();
                let flip = rng.random::<bool>();
                if class == 0 {
                    if flip {
                        x = -x;
                        y = -y;
                    }
                } else if flip {
                    x = -x;
                } else {
                    y = -y;
                }
                (x + noise * gauss(&mut rng), y + noise * gauss(&mut rng))
            }
        };
        data.push(x as f32);
        data.push(y as f32);
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Deterministic train/test split: a seeded permutation, the first
/// `1 − test_fraction` of it for training.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return invalid(format!("test fraction must be in (0, 1), got {test_fraction}"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, &[Purpose::Split as u64]));
    let n_train = ((1.0 - test_fraction) * data.len() as f64).round() as usize;
    if n_train == 0 || n_train == data.len() {
        return invalid("split leaves an empty side");
    }
    Ok((data.subset(&idx[..n_train]), data.subset(&idx[n_train..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

/// Batches of one epoch: a permutation from the `(seed, epoch)` stream cut
/// into consecutive slices.
pub fn batches(n: usize, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return invalid("batch size must be >= 1");
    }
    if plan.drop_last && plan.batch_size > n {
        return invalid(format!("batch size {} exceeds {n} samples with drop_last", plan.batch_size));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(plan.seed, &[Purpose::Shuffle as u64, epoch]));
    Ok(idx
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

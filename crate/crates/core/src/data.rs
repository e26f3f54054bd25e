//! Dataset generation, IDX ingestion, and seeded splitting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// A labeled dataset. `origin_indices`, when present, records which rows of
/// the parent dataset this split was cut from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Option<SplitTag>,
    pub origin_indices: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        inputs.check_finite("dataset inputs")?;
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split: None,
            origin_indices: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows and labels at the given positions, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let mut out = Dataset::new(inputs, labels, self.num_classes)?;
        out.origin_indices = Some(idx.to_vec());
        Ok(out)
    }
}

/// Gaussian clusters, one mean per class drawn from N(0, I), points drawn
/// from N(mean, spread^2 I). Labels are balanced by construction.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("gen_blobs needs at least 2 classes"));
    }
    if per_class < 1 || input_dim < 1 {
        return Err(Error::invalid("gen_blobs sizes must be positive"));
    }
    if spread < 0.0 || !spread.is_finite() {
        return Err(Error::invalid("spread must be finite and >= 0"));
    }
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.normal()).collect())
        .collect();
    let n = num_classes * per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = mean.iter().map(|m| m + spread * rng.normal()).collect();
            rows.push(row);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_rows(&rows)?, labels, num_classes)
}

/// Interleaved 2-D spiral arms, one arm per class. Arms start at radius
/// 0.3 and wind 1.75 turns outward to radius 1; `noise` is the standard
/// deviation of isotropic Gaussian jitter.
pub fn gen_spirals(
    num_classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("gen_spirals needs at least 2 classes"));
    }
    if per_class < 1 {
        return Err(Error::invalid("per_class must be positive"));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::invalid("noise must be finite and >= 0"));
    }
    let mut rng = Rng::new(seed);
    let turns = 1.75;
    let n = num_classes * per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let phase = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        for k in 0..per_class {
            let t = if per_class == 1 {
                0.5
            } else {
                k as f64 / (per_class - 1) as f64
            };
            let r = 0.3 + 0.7 * t;
            let angle = phase + t * turns * 2.0 * std::f64::consts::PI;
            let x = r * angle.cos() + noise * rng.normal();
            let y = r * angle.sin() + noise * rng.normal();
            rows.push(vec![x, y]);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_rows(&rows)?, labels, num_classes)
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!("truncated file reading {field}")));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (the MNIST container format).
/// Pixels are scaled from [0, 255] to [0, 1] and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels_raw = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_be_u32(&images, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad magic in images file: 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_be_u32(&images, 4, "images count")? as usize;
    let h = read_be_u32(&images, 8, "images rows")? as usize;
    let w = read_be_u32(&images, 12, "images cols")? as usize;
    let pixel_count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("images dimensions overflow".into()))?;
    let pixels = &images[16..];
    if pixels.len() < pixel_count {
        return Err(Error::Format(format!(
            "truncated images payload: {} bytes for {} pixels",
            pixels.len(),
            pixel_count
        )));
    }

    let lmagic = read_be_u32(&labels_raw, 0, "labels magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic in labels file: 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let ln = read_be_u32(&labels_raw, 4, "labels count")? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "count mismatch: {n} images but {ln} labels"
        )));
    }
    let label_bytes = &labels_raw[8..];
    if label_bytes.len() < ln {
        return Err(Error::Format(format!(
            "truncated labels payload: {} bytes for {ln} labels",
            label_bytes.len()
        )));
    }

    let dim = h * w;
    let data: Vec<f64> = pixels[..pixel_count]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..ln].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::from_vec(n, dim, data)?, labels, num_classes)
}

/// The index partition produced by [`split`], kept for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPartition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle followed by a contiguous partition into train/val/test.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitPartition)> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::invalid("split fractions must be positive"));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions sum to {}, expected 1",
            ft + fv + fe
        )));
    }
    let n = dataset.len();
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "degenerate split: sizes {n_train}/{n_val}/{n_test} for N={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let partition = SplitPartition {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    let mut train = dataset.subset(&partition.train)?;
    let mut val = dataset.subset(&partition.val)?;
    let mut test = dataset.subset(&partition.test)?;
    train.split = Some(SplitTag::Train);
    val.split = Some(SplitTag::Val);
    test.split = Some(SplitTag::Test);
    Ok((train, val, test, partition))
}

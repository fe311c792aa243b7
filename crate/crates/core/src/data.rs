//! Datasets: IDX (MNIST-style) files and a synthetic two-blob manifold.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, RvaeError};
use crate::linalg::DenseMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Seed of the fixed embedding network behind [`make_toy_manifold`].
pub const TOY_EMBEDDING_SEED: u64 = 0x7a3e_51c9;
pub const TOY_AMBIENT_DIM: usize = 100;
const TOY_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × M`, entries in `[0, 1]`
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(RvaeError::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(RvaeError::contract("dataset features must be finite"));
        }
        Ok(Dataset { features, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let m = self.dim();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: DenseMatrix::from_vec(indices.len(), m, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// Shuffled split into `(first, second)` with `round(frac · N)` rows in
    /// the first part.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((frac * self.len() as f64).round() as usize).min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// First `n` rows (all rows when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "IDX header is truncated"))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_idx<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(RvaeError::format(format!(
            "{what}: expected IDX magic {magic}, found {found}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = bytes.get(start..start + count).ok_or_else(|| {
        io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("{what}: expected {count} payload bytes, file has {}", bytes.len().saturating_sub(start)),
        )
    })?;
    Ok((dims, payload))
}

/// Parses an IDX image/label pair from memory; pixels are scaled by 1/255.
pub fn parse_idx_pair(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, label_bytes) = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    let n = idims[0];
    if ldims[0] != n {
        return Err(RvaeError::format(format!("{n} images but {} labels", ldims[0])));
    }
    let m = idims[1] * idims[2];
    let features = DenseMatrix::from_vec(n, m, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(features, label_bytes.iter().map(|&l| l as usize).collect(), name)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    parse_idx_pair(&images, &labels, &name)
}

/// Serializes `[0, 1]` features as an IDX image file of `rows × cols`
/// pixels, and labels as an IDX label file.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(RvaeError::contract(format!(
            "{rows}x{cols} images do not hold {} features",
            ds.dim()
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.features.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        labels.push(u8::try_from(l).map_err(|_| RvaeError::contract("IDX labels must fit in a byte"))?);
    }
    Ok((images, labels))
}

/// Rows with the given label, order preserved.
pub fn filter_label(ds: &Dataset, label: usize) -> Dataset {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == label).collect();
    let mut out = ds.subset(&idx);
    out.name = format!("{}-label{label}", ds.name);
    out
}

/// Two Gaussian blobs in the plane (centers `(±2, 0)`, std 0.5) pushed
/// through a fixed random `2 → 64 → 100` tanh network into `[0, 1]^100`
/// with N(0, 0.01²) noise. Labels are the blob index.
pub fn make_toy_manifold(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(RvaeError::contract("toy manifold needs at least one point"));
    }
    let mut net_rng = ChaCha8Rng::seed_from_u64(TOY_EMBEDDING_SEED);
    let w1 = Normal::new(0.0, 0.8).expect("valid std");
    let w2 = Normal::new(0.0, 1.5 / (TOY_HIDDEN as f64).sqrt()).expect("valid std");
    let first: Vec<[f64; 3]> = (0..TOY_HIDDEN)
        .map(|_| [w1.sample(&mut net_rng), w1.sample(&mut net_rng), w1.sample(&mut net_rng)])
        .collect();
    let second: Vec<Vec<f64>> = (0..TOY_AMBIENT_DIM)
        .map(|_| (0..=TOY_HIDDEN).map(|_| w2.sample(&mut net_rng)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, 0.5).expect("valid std");
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let mut data = Vec::with_capacity(n * TOY_AMBIENT_DIM);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..2usize);
        let cx = if label == 0 { -2.0 } else { 2.0 };
        let z = [cx + spread.sample(&mut rng), spread.sample(&mut rng)];
        let hidden: Vec<f64> = first.iter().map(|w| (w[0] * z[0] + w[1] * z[1] + w[2]).tanh()).collect();
        for row in &second {
            let a: f64 = row[..TOY_HIDDEN].iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + row[TOY_HIDDEN];
            let x = 0.5 + 0.4 * a.tanh() + noise.sample(&mut rng);
            data.push(x.clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    Dataset::new(DenseMatrix::from_vec(n, TOY_AMBIENT_DIM, data)?, labels, "toy")
}

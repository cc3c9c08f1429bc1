//! Synthetic regression data, label-chunk partitioning and the gradient
//! correlation check.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Substreams};

/// Local data of one device: `x` is `M x N_k` (one column per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
    /// Variance of the entries of `x`.
    pub scale: f64,
}

impl DeviceDataset {
    pub fn new(x: DMatrix<f64>, z: DVector<f64>, scale: f64) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::invalid("dataset needs at least one sample and one feature"));
        }
        if x.ncols() != z.len() {
            return Err(Error::invalid(format!("{} samples but {} targets", x.ncols(), z.len())));
        }
        if !(scale >= 0.0) {
            return Err(Error::invalid("scale must be non-negative"));
        }
        Ok(Self { x, z, scale })
    }

    pub fn dimension(&self) -> usize {
        self.x.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Heterogeneity {
    /// Each device draws its scale uniformly from `(0, max_scale)`.
    Heterogeneous {
        #[serde(default = "default_max_scale")]
        max_scale: f64,
    },
    Homogeneous { scale: f64 },
}

fn default_max_scale() -> f64 {
    5.0
}

impl Default for Heterogeneity {
    fn default() -> Self {
        Heterogeneity::Heterogeneous { max_scale: default_max_scale() }
    }
}

/// Device `k` of a synthetic task; depends only on `(seed, k)`.
pub fn gen_device<R: Rng>(n_k: usize, m: usize, heterogeneity: Heterogeneity, rng: &mut R) -> Result<DeviceDataset> {
    if n_k == 0 || m == 0 {
        return Err(Error::invalid("N_k and M must be positive"));
    }
    let scale = match heterogeneity {
        Heterogeneity::Heterogeneous { max_scale } => {
            if !(max_scale > 0.0) {
                return Err(Error::invalid("max_scale must be positive"));
            }
            loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u * max_scale;
                }
            }
        }
        Heterogeneity::Homogeneous { scale } => {
            if !(scale >= 0.0) {
                return Err(Error::invalid("scale must be non-negative"));
            }
            scale
        }
    };
    let std = scale.sqrt();
    let x = DMatrix::from_fn(m, n_k, |_, _| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    let z = DVector::from_fn(n_k, |_, _| StandardNormal.sample(rng));
    DeviceDataset::new(x, z, scale)
}

pub fn gen_synthetic(
    k: usize,
    n_k: usize,
    m: usize,
    heterogeneity: Heterogeneity,
    streams: Substreams,
) -> Result<Vec<DeviceDataset>> {
    if k == 0 {
        return Err(Error::invalid("need at least one device"));
    }
    (0..k)
        .map(|i| gen_device(n_k, m, heterogeneity, &mut streams.stream(Purpose::Dataset, i as u64, 0)))
        .collect()
}

/// Splits each class into `k` chunks and hands every device
/// `chunks_per_user` chunks from distinct classes, never reusing a chunk.
pub fn chunk_partition<R: Rng + ?Sized>(
    labels: &[usize],
    k: usize,
    chunks_per_user: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || chunks_per_user == 0 {
        return Err(Error::invalid("need at least one device and one chunk per device"));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    by_class.retain(|v| !v.is_empty());
    if chunks_per_user > by_class.len() {
        return Err(Error::invalid(format!(
            "{chunks_per_user} distinct classes per device requested but only {} classes exist",
            by_class.len()
        )));
    }

    // chunks[c] holds the still-unassigned chunks of class c
    let mut chunks: Vec<Vec<Vec<usize>>> = by_class
        .iter()
        .map(|idx| {
            let base = idx.len() / k;
            (0..k)
                .map(|j| {
                    let start = j * base;
                    let end = if j + 1 == k { idx.len() } else { start + base };
                    idx[start..end].to_vec()
                })
                .filter(|c| !c.is_empty())
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(k);
    for device in 0..k {
        let mut classes: Vec<usize> = (0..chunks.len()).filter(|&c| !chunks[c].is_empty()).collect();
        if classes.len() < chunks_per_user {
            return Err(Error::invalid(format!(
                "only {} classes have chunks left for device {device}",
                classes.len()
            )));
        }
        classes.shuffle(rng);
        // most remaining chunks first keeps later devices feasible
        classes.sort_by_key(|&c| std::cmp::Reverse(chunks[c].len()));
        let mut mine = Vec::new();
        for &c in classes.iter().take(chunks_per_user) {
            let pick = rng.random_range(0..chunks[c].len());
            mine.extend(chunks[c].swap_remove(pick));
        }
        mine.sort_unstable();
        out.push(mine);
    }
    Ok(out)
}

/// Four Gaussian blobs in the plane, 100 points each; labels 0..4.
pub fn gaussian_blobs<R: Rng + ?Sized>(rng: &mut R) -> (Vec<[f64; 2]>, Vec<usize>) {
    let centers = [[-3.0, -3.0], [3.0, -3.0], [-3.0, 3.0], [3.0, 3.0]];
    let mut points = Vec::with_capacity(400);
    let mut labels = Vec::with_capacity(400);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..100 {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            points.push([center[0] + dx, center[1] + dy]);
            labels.push(c);
        }
    }
    (points, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCheck {
    pub predicted: DMatrix<f64>,
    pub empirical: DMatrix<f64>,
    /// Largest entrywise deviation divided by the largest predicted entry.
    pub max_relative_deviation: f64,
}

/// Monte Carlo check of `E[g_k g_l^T | w] = 4 R_k w w^T R_l` for gradients
/// `g = 2 X (X^T w - z)` of independent datasets with `E[X X^T] = R` and
/// `E[X z] = 0`.
pub fn gradient_correlation_check<R: Rng + ?Sized>(
    r_k: &DMatrix<f64>,
    r_l: &DMatrix<f64>,
    w: &DVector<f64>,
    samples: usize,
    n_trials: usize,
    rng: &mut R,
) -> Result<CorrelationCheck> {
    let m = w.len();
    if r_k.shape() != (m, m) || r_l.shape() != (m, m) || samples == 0 || n_trials == 0 {
        return Err(Error::invalid("correlation check inputs have inconsistent sizes"));
    }
    let factor = |r: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        // Eigen-factor so that PSD (not only PD) matrices are accepted.
        let eig = r.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| v < -1e-12) {
            return Err(Error::invalid("correlation matrix must be positive semidefinite"));
        }
        let sqrt = eig.eigenvalues.map(|v| (v.max(0.0) / samples as f64).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    };
    let (a_k, a_l) = (factor(r_k)?, factor(r_l)?);
    let grad = |a: &DMatrix<f64>, rng: &mut R| -> DVector<f64> {
        let mut g = DVector::zeros(m);
        for _ in 0..samples {
            let u = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
            let x = a * u;
            let z: f64 = StandardNormal.sample(rng);
            g += &x * (2.0 * (x.dot(w) - z));
        }
        g
    };
    let mut acc = DMatrix::zeros(m, m);
    for _ in 0..n_trials {
        let gk = grad(&a_k, rng);
        let gl = grad(&a_l, rng);
        acc += &gk * gl.transpose();
    }
    let empirical = acc / n_trials as f64;
    let predicted = (r_k * w) * (r_l * w).transpose() * 4.0;
    let scale = predicted.amax();
    let dev = (&empirical - &predicted).amax();
    let max_relative_deviation = if scale > 0.0 { dev / scale } else { dev };
    Ok(CorrelationCheck { predicted, empirical, max_relative_deviation })
}

const DATASET_MAGIC: &[u8; 8] = b"SBFLDS01";

/// Writes datasets as: magic, device count, then per device `M`, `N`,
/// scale, `X` row-major and `z`; all integers u64 and all reals f64,
/// little-endian.
pub fn write_datasets<W: Write>(mut out: W, datasets: &[DeviceDataset]) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(datasets.len() as u64).to_le_bytes())?;
    for d in datasets {
        out.write_all(&(d.dimension() as u64).to_le_bytes())?;
        out.write_all(&(d.samples() as u64).to_le_bytes())?;
        out.write_all(&d.scale.to_le_bytes())?;
        for r in 0..d.dimension() {
            for c in 0..d.samples() {
                out.write_all(&d.x[(r, c)].to_le_bytes())?;
            }
        }
        for v in d.z.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_datasets<R: Read>(mut input: R) -> Result<Vec<DeviceDataset>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::invalid("not a dataset file"));
    }
    let mut word = [0u8; 8];
    let mut next = |input: &mut R| -> Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let k = u64::from_le_bytes(next(&mut input)?) as usize;
    let mut out = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let m = u64::from_le_bytes(next(&mut input)?) as usize;
        let n = u64::from_le_bytes(next(&mut input)?) as usize;
        let scale = f64::from_le_bytes(next(&mut input)?);
        let mut x = DMatrix::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                x[(r, c)] = f64::from_le_bytes(next(&mut input)?);
            }
        }
        let mut z = DVector::zeros(n);
        for v in z.iter_mut() {
            *v = f64::from_le_bytes(next(&mut input)?);
        }
        out.push(DeviceDataset::new(x, z, scale)?);
    }
    Ok(out)
}

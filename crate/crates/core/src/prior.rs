//! Device-side processing: prior estimation, centering, sign quantization
//! and B-bit quantization of the prior scalars.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian model of the coordinates of one local gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu: f64,
    pub nu: f64,
}

/// Laplacian model of the coordinates of one local gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacianPrior {
    pub mu: f64,
    pub lambda: f64,
}

/// Entries are always -1 or +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("sign vector entries must be -1 or +1"));
        }
        Ok(Self(signs))
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&s| f64::from(s)).collect()
    }
}

/// `sign` with the convention `sign(0) = +1`, so the result is always a
/// valid BPSK symbol.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn estimate_gaussian_prior(g: &[f64]) -> Result<GaussianPrior> {
    if g.is_empty() {
        return Err(Error::invalid("cannot estimate a prior from an empty gradient"));
    }
    let m = g.len() as f64;
    let mu = g.iter().sum::<f64>() / m;
    let second = g.iter().map(|x| x * x).sum::<f64>() / m;
    let nu = (second - mu * mu).max(0.0).sqrt();
    Ok(GaussianPrior { mu, nu })
}

/// Laplace scale of an already centered gradient: the mean absolute value.
pub fn estimate_laplacian_scale(g_centered: &[f64]) -> Result<f64> {
    if g_centered.is_empty() {
        return Err(Error::invalid("cannot estimate a scale from an empty gradient"));
    }
    Ok(g_centered.iter().map(|x| x.abs()).sum::<f64>() / g_centered.len() as f64)
}

pub fn center(g: &[f64], mu: f64) -> Vec<f64> {
    g.iter().map(|x| x - mu).collect()
}

pub fn sign_quantize(g: &[f64]) -> SignVector {
    SignVector(g.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect())
}

/// A scalar quantizer with `2^bits` bins.
///
/// Bin `l` is the half-open interval `[boundaries[l], boundaries[l + 1])`
/// and maps to `outputs[l]`. Inputs outside the outer boundaries saturate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    bits: u32,
    boundaries: Vec<f64>,
    outputs: Vec<f64>,
}

impl QuantizerSpec {
    pub fn new(bits: u32, boundaries: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::invalid(format!("quantizer bits must be in 1..=24, got {bits}")));
        }
        let levels = 1usize << bits;
        if outputs.len() != levels || boundaries.len() != levels + 1 {
            return Err(Error::invalid(format!(
                "{bits}-bit quantizer needs {} boundaries and {levels} outputs",
                levels + 1
            )));
        }
        if boundaries.iter().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::invalid("quantizer values must be finite"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("quantizer boundaries must be strictly increasing"));
        }
        // Outputs sit inside their own half-open bin so that quantization is idempotent.
        for (l, &q) in outputs.iter().enumerate() {
            let upper_ok = q < boundaries[l + 1] || (l + 1 == levels && q <= boundaries[l + 1]);
            if q < boundaries[l] || !upper_ok {
                return Err(Error::invalid(format!("output {l} lies outside its bin")));
            }
        }
        Ok(Self { bits, boundaries, outputs })
    }

    /// Uniform bins over `[lo, hi]` with midpoint reconstruction.
    pub fn uniform(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("empty quantizer range [{lo}, {hi}]")));
        }
        if bits == 0 || bits > 24 {
            return Err(Error::invalid(format!("quantizer bits must be in 1..=24, got {bits}")));
        }
        let levels = 1usize << bits;
        let step = (hi - lo) / levels as f64;
        let mut boundaries: Vec<f64> = (0..=levels).map(|i| lo + step * i as f64).collect();
        boundaries[levels] = hi;
        let outputs = boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self::new(bits, boundaries, outputs)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Index of the bin that `x` falls into, after saturation.
    pub fn bin_index(&self, x: f64) -> usize {
        let interior = &self.boundaries[1..self.boundaries.len() - 1];
        // Number of interior boundaries <= x.
        interior.partition_point(|&b| b <= x)
    }
}

pub fn scalar_quantize(x: f64, spec: &QuantizerSpec) -> f64 {
    spec.outputs[spec.bin_index(x)]
}

/// How the prior scalars reach the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorEncoding {
    /// Real-valued parameters delivered without error.
    Exact {},
    /// Uniform B-bit quantization. The spread parameter (nu or lambda) uses
    /// bins over `[0, cap]`; the mean uses bins over
    /// `[-mu_spread * spread_hat, mu_spread * spread_hat]`, which the server
    /// can rebuild after decoding the spread.
    Quantized {
        bits: u32,
        #[serde(default = "default_mu_spread")]
        mu_spread: f64,
        cap: ScaleCap,
    },
}

fn default_mu_spread() -> f64 {
    4.0
}

/// Upper end of the quantizer range for the spread parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleCap {
    Fixed { value: f64 },
    /// `headroom` times the largest decoded spread of the previous round;
    /// `initial` in the first round.
    Tracking { initial: f64, headroom: f64 },
}

impl Default for PriorEncoding {
    fn default() -> Self {
        PriorEncoding::Exact {}
    }
}

impl PriorEncoding {
    /// Default 4-bit uniform encoding.
    pub fn four_bit(initial_cap: f64) -> Self {
        PriorEncoding::Quantized {
            bits: 4,
            mu_spread: default_mu_spread(),
            cap: ScaleCap::Tracking { initial: initial_cap, headroom: 2.0 },
        }
    }

    /// Side-information bits per device per round, before channel coding.
    pub fn payload_bits(&self) -> Option<u32> {
        match self {
            PriorEncoding::Exact {} => None,
            PriorEncoding::Quantized { bits, .. } => Some(2 * bits),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PriorEncoding::Quantized { bits, mu_spread, cap } = *self {
            if bits == 0 || bits > 24 {
                return Err(Error::invalid("prior quantizer bits must be in 1..=24"));
            }
            if !(mu_spread > 0.0 && mu_spread.is_finite()) {
                return Err(Error::invalid("mu_spread must be positive"));
            }
            let ok = match cap {
                ScaleCap::Fixed { value } => value > 0.0 && value.is_finite(),
                ScaleCap::Tracking { initial, headroom } => {
                    initial > 0.0 && initial.is_finite() && headroom >= 1.0 && headroom.is_finite()
                }
            };
            if !ok {
                return Err(Error::invalid("invalid spread cap"));
            }
        }
        Ok(())
    }

    /// Quantizes `(mu, spread)` given the current cap. Returns the values
    /// the server decodes.
    pub fn encode(&self, mu: f64, spread: f64, cap: f64) -> Result<(f64, f64)> {
        match *self {
            PriorEncoding::Exact {} => Ok((mu, spread)),
            PriorEncoding::Quantized { bits, mu_spread, .. } => {
                let spread_q = QuantizerSpec::uniform(bits, 0.0, cap)?;
                let spread_hat = scalar_quantize(spread, &spread_q);
                let half = mu_spread * spread_hat;
                let mu_q = QuantizerSpec::uniform(bits, -half, half)?;
                Ok((scalar_quantize(mu, &mu_q), spread_hat))
            }
        }
    }

    /// Cap for the next round given the spreads decoded in this one.
    pub fn next_cap(&self, current: f64, decoded_spreads: &[f64]) -> f64 {
        match *self {
            PriorEncoding::Exact {} => current,
            PriorEncoding::Quantized { cap: ScaleCap::Fixed { value }, .. } => value,
            PriorEncoding::Quantized { cap: ScaleCap::Tracking { initial, headroom }, .. } => {
                let top = decoded_spreads.iter().copied().fold(0.0, f64::max);
                if top > 0.0 {
                    headroom * top
                } else {
                    initial
                }
            }
        }
    }

    pub fn initial_cap(&self) -> f64 {
        match *self {
            PriorEncoding::Exact {} => f64::INFINITY,
            PriorEncoding::Quantized { cap: ScaleCap::Fixed { value }, .. } => value,
            PriorEncoding::Quantized { cap: ScaleCap::Tracking { initial, .. }, .. } => initial,
        }
    }
}

//! Real-valued block-fading AWGN uplink.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::SignVector;

/// Smallest noise variance used when simulating; a configured variance of
/// zero is treated as this value.
pub const SIGMA2_FLOOR: f64 = 1e-30;

/// Channel realization of one device in one round, known exactly to the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkState {
    pub h: f64,
    pub sigma2: f64,
}

impl LinkState {
    pub fn new(h: f64, sigma2: f64) -> Result<Self> {
        let link = Self { h, sigma2 };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.h.is_finite() {
            return Err(Error::invalid("fading gain must be finite"));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid("noise variance must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn snr(&self) -> f64 {
        self.h * self.h / self.sigma2.max(SIGMA2_FLOOR)
    }
}

pub fn draw_fading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `y_m = h s_m + n_m` with `n_m ~ N(0, sigma2)`.
pub fn transmit<R: Rng + ?Sized>(s: &SignVector, link: LinkState, rng: &mut R) -> Vec<f64> {
    let std = link.sigma2.max(SIGMA2_FLOOR).sqrt();
    s.as_slice()
        .iter()
        .map(|&sm| {
            let n: f64 = StandardNormal.sample(rng);
            link.h * f64::from(sm) + std * n
        })
        .collect()
}

/// Density of `y` given the transmitted symbol `s`.
pub fn likelihood(y: f64, s: f64, link: LinkState) -> f64 {
    let var = link.sigma2.max(SIGMA2_FLOOR);
    let d = y - link.h * s;
    (-(d * d) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

pub fn log_likelihood(y: f64, s: f64, link: LinkState) -> f64 {
    let var = link.sigma2.max(SIGMA2_FLOOR);
    let d = y - link.h * s;
    -(d * d) / (2.0 * var) - 0.5 * (2.0 * PI * var).ln()
}

/// Likelihood of a whole received vector: the product over coordinates.
pub fn likelihood_vector(y: &[f64], s: &SignVector, link: LinkState) -> f64 {
    y.iter()
        .zip(s.as_slice())
        .map(|(&ym, &sm)| likelihood(ym, f64::from(sm), link))
        .product()
}

/// Density of `y` when the transmitted sign is equiprobable.
pub fn marginal_density(y: f64, link: LinkState) -> f64 {
    let var = link.sigma2.max(SIGMA2_FLOOR);
    let sigma = var.sqrt();
    let a = y - link.h;
    let b = y + link.h;
    ((-(a * a) / (2.0 * var)).exp() + (-(b * b) / (2.0 * var)).exp()) / (2.0 * (2.0 * PI).sqrt() * sigma)
}

/// Single-cell link budget parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkGeometry {
    pub cell_radius_m: f64,
    pub bs_height_m: f64,
    pub device_height_m: f64,
    pub carrier_mhz: f64,
    pub tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
    /// Metropolitan correction of the COST-231 Hata model (3 dB urban, 0 dB suburban).
    pub area_correction_db: f64,
}

impl Default for NetworkGeometry {
    fn default() -> Self {
        Self {
            cell_radius_m: 1000.0,
            bs_height_m: 70.0,
            device_height_m: 1.5,
            carrier_mhz: 2000.0,
            tx_power_dbm: 23.0,
            noise_floor_dbm: -100.0,
            area_correction_db: 3.0,
        }
    }
}

/// Closest device distance at which the path-loss model is evaluated.
pub const MIN_DISTANCE_M: f64 = 20.0;

impl NetworkGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.cell_radius_m,
            self.bs_height_m,
            self.device_height_m,
            self.carrier_mhz,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("geometry lengths and carrier frequency must be positive"));
        }
        if !(self.tx_power_dbm.is_finite() && self.noise_floor_dbm.is_finite()) {
            return Err(Error::invalid("link budget powers must be finite"));
        }
        Ok(())
    }

    /// COST-231 Hata path loss in dB at distance `distance_m`.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        let d_km = distance_m.max(MIN_DISTANCE_M) / 1000.0;
        let lf = self.carrier_mhz.log10();
        let lhb = self.bs_height_m.log10();
        let mobile_correction = (1.1 * lf - 0.7) * self.device_height_m - (1.56 * lf - 0.8);
        46.3 + 33.9 * lf - 13.82 * lhb - mobile_correction
            + (44.9 - 6.55 * lhb) * d_km.log10()
            + self.area_correction_db
    }

    pub fn snr_db(&self, distance_m: f64) -> f64 {
        self.tx_power_dbm - self.path_loss_db(distance_m) - self.noise_floor_dbm
    }

    /// Noise variance relative to a unit-power fading gain, `1 / SNR`.
    pub fn sigma2_at(&self, distance_m: f64) -> f64 {
        10f64.powf(-self.snr_db(distance_m) / 10.0)
    }
}

/// A device dropped in the cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePlacement {
    pub distance_m: f64,
    pub sigma2: f64,
}

/// Drops a device uniformly in the disk and evaluates its noise variance.
pub fn place_device<R: Rng + ?Sized>(geom: &NetworkGeometry, rng: &mut R) -> DevicePlacement {
    let u: f64 = rng.random();
    let distance_m = (geom.cell_radius_m * u.sqrt()).max(MIN_DISTANCE_M);
    DevicePlacement { distance_m, sigma2: geom.sigma2_at(distance_m) }
}

/// Places `k` devices, each from its own generator, and returns their
/// noise variances.
pub fn geometry_to_links<R: Rng>(
    geom: &NetworkGeometry,
    k: usize,
    mut rng_for_device: impl FnMut(usize) -> R,
) -> Result<Vec<DevicePlacement>> {
    if k == 0 {
        return Err(Error::invalid("need at least one device"));
    }
    geom.validate()?;
    Ok((0..k).map(|i| place_device(geom, &mut rng_for_device(i))).collect())
}

/// Gaussian noise generator for a fixed variance.
pub fn awgn(sigma2: f64) -> Normal<f64> {
    Normal::new(0.0, sigma2.max(SIGMA2_FLOOR).sqrt()).expect("finite positive std")
}

//! `mse-verify` and `oracle`: theory against simulation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MseGridConfig, OracleConfig};
use crate::aggregate::{blmmse, high_snr_blmmse, high_snr_mmse, mmse_gaussian_with, AggregationInput, Formulation};
use crate::channel::{transmit, LinkState};
use crate::prior::{sign_quantize, GaussianPrior};
use crate::rng::{Purpose, Substreams};
use crate::theory::{
    blmmse_mse_closed_form, genie_bfl_conditional_mean, mse_high_snr_closed_form, mse_monte_carlo_many,
    mse_quadrature_with, separable_conditional_mean, GENIE_MAX_DEVICES,
};
use crate::{Error, Result};

/// Agreement within this many standard errors.
pub const STDERR_MULTIPLE: f64 = 3.0;

/// One `(nu, h, sigma2)` cell of the MSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub nu: f64,
    pub h: f64,
    pub sigma2: f64,
    pub dimension: usize,
    pub formulation: Formulation,
    pub samples: usize,
    pub quadrature: f64,
    pub quadrature_paper_literal: f64,
    pub high_snr_closed_form: f64,
    pub blmmse_closed_form_corrected: f64,
    pub blmmse_closed_form_paper_literal: f64,
    pub mc_mmse: f64,
    pub mc_mmse_stderr: f64,
    pub mc_blmmse_corrected: f64,
    pub mc_blmmse_corrected_stderr: f64,
    pub mc_blmmse_paper_literal: f64,
    pub mc_blmmse_paper_literal_stderr: f64,
    /// Absent when `h = 0`, where the high-SNR estimators are undefined.
    pub mc_high_snr_mmse: Option<f64>,
    pub mc_high_snr_mmse_stderr: Option<f64>,
    pub mc_high_snr_blmmse: Option<f64>,
    pub mc_high_snr_blmmse_stderr: Option<f64>,
    /// Quadrature within 3 stderr of the conditional-mean Monte Carlo.
    pub quadrature_matches_mc: bool,
    /// Corrected BLMMSE closed form within 3 stderr of its Monte Carlo.
    pub blmmse_matches_mc: bool,
    /// Conditional mean no worse than corrected BLMMSE up to one stderr.
    pub mmse_not_worse: bool,
}

pub fn grid_cells(cfg: &MseGridConfig) -> Vec<[f64; 3]> {
    let mut cells = Vec::new();
    for &nu in &cfg.nu {
        for &h in &cfg.h {
            for &s in &cfg.sigma2 {
                cells.push([nu, h, s]);
            }
        }
    }
    cells.extend(cfg.extra.iter().copied());
    cells
}

fn within(a: f64, b: f64, stderr: f64) -> bool {
    (a - b).abs() <= STDERR_MULTIPLE * stderr
}

type Estimator = Box<dyn Fn(&AggregationInput) -> Result<Vec<f64>> + Sync>;

/// All quantities of one cell; the cell index keys its random substream.
pub fn mse_row(
    nu: f64,
    h: f64,
    sigma2: f64,
    m: usize,
    samples: usize,
    formulation: Formulation,
    streams: Substreams,
) -> Result<MseRow> {
    let priors = [GaussianPrior { mu: 0.0, nu }];
    let links = [LinkState::new(h, sigma2)?];
    let mut estimators: Vec<Estimator> = vec![
        Box::new(move |i: &AggregationInput| mmse_gaussian_with(i, formulation)),
        Box::new(|i: &AggregationInput| blmmse(i, Formulation::Corrected)),
        Box::new(|i: &AggregationInput| blmmse(i, Formulation::PaperLiteral)),
    ];
    if h != 0.0 {
        estimators.push(Box::new(high_snr_mmse));
        estimators.push(Box::new(high_snr_blmmse));
    }
    let mc = mse_monte_carlo_many(&estimators, &priors, &links, m, samples, streams)?;
    let quadrature = mse_quadrature_with(&priors, &links, m, formulation)?.value;
    let blmmse_cf = blmmse_mse_closed_form(&priors, &links, m, Formulation::Corrected)?.value;
    let slack = mc[0].stderr.max(mc[1].stderr);
    Ok(MseRow {
        nu,
        h,
        sigma2,
        dimension: m,
        formulation,
        samples,
        quadrature,
        quadrature_paper_literal: mse_quadrature_with(&priors, &links, m, Formulation::PaperLiteral)?.value,
        high_snr_closed_form: mse_high_snr_closed_form(&priors, m).value,
        blmmse_closed_form_corrected: blmmse_cf,
        blmmse_closed_form_paper_literal: blmmse_mse_closed_form(&priors, &links, m, Formulation::PaperLiteral)?.value,
        mc_mmse: mc[0].value,
        mc_mmse_stderr: mc[0].stderr,
        mc_blmmse_corrected: mc[1].value,
        mc_blmmse_corrected_stderr: mc[1].stderr,
        mc_blmmse_paper_literal: mc[2].value,
        mc_blmmse_paper_literal_stderr: mc[2].stderr,
        mc_high_snr_mmse: mc.get(3).map(|r| r.value),
        mc_high_snr_mmse_stderr: mc.get(3).map(|r| r.stderr),
        mc_high_snr_blmmse: mc.get(4).map(|r| r.value),
        mc_high_snr_blmmse_stderr: mc.get(4).map(|r| r.stderr),
        quadrature_matches_mc: within(quadrature, mc[0].value, mc[0].stderr),
        blmmse_matches_mc: within(blmmse_cf, mc[1].value, mc[1].stderr),
        mmse_not_worse: mc[0].value <= mc[1].value + slack,
    })
}

pub fn mse_verify(cfg: &MseGridConfig, formulation: Formulation) -> Result<Vec<MseRow>> {
    let streams = Substreams::new(cfg.seed);
    grid_cells(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, [nu, h, s])| {
            // each cell gets its own master key so cells are independent
            let key = streams.stream(Purpose::MonteCarlo, u64::MAX, i as u64).random::<u64>();
            mse_row(nu, h, s, cfg.dimension, cfg.samples, formulation, Substreams::new(key))
        })
        .collect()
}

/// One received point of the genie comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub point: usize,
    pub y: Vec<f64>,
    pub genie: Vec<f64>,
    /// Elementwise SBFL estimate with each device's marginal prior.
    pub sbfl: Vec<f64>,
    pub max_abs_deviation: f64,
}

fn covariance(cfg: &OracleConfig) -> Result<DMatrix<f64>> {
    let k = cfg.variances.len();
    if k == 0 || k > GENIE_MAX_DEVICES || cfg.links.len() != k {
        return Err(Error::invalid(format!("oracle needs 1..={GENIE_MAX_DEVICES} devices with one link each")));
    }
    if !(-1.0..1.0).contains(&cfg.correlation) {
        return Err(Error::invalid("correlation must lie in (-1, 1)"));
    }
    let sd: Vec<f64> = cfg.variances.iter().map(|v| v.sqrt()).collect();
    Ok(DMatrix::from_fn(k, k, |i, j| if i == j { cfg.variances[i] } else { cfg.correlation * sd[i] * sd[j] }))
}

/// Draws points from the model and compares the genie posterior mean with
/// the separable estimator.
pub fn oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let cov = covariance(cfg)?;
    let k = cfg.variances.len();
    let chol = cov.clone().cholesky().ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    let mean = vec![0.0; k];
    let streams = Substreams::new(cfg.seed);
    (0..cfg.points)
        .into_par_iter()
        .map(|p| {
            let mut rng = streams.stream(Purpose::MonteCarlo, p as u64, 1);
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            let z = nalgebra::DVector::from_fn(k, |_, _| n.sample(&mut rng));
            let g = chol.l() * z;
            let y: Vec<f64> = (0..k)
                .map(|i| transmit(&sign_quantize(&[g[i]]), cfg.links[i], &mut rng)[0])
                .collect();
            let genie = genie_bfl_conditional_mean(&mean, &cov, &y, &cfg.links, cfg.method)?;
            let sbfl = separable_conditional_mean(&mean, &cfg.variances, &y, &cfg.links);
            let max_abs_deviation = genie.iter().zip(&sbfl).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(OracleRow { point: p, y, genie, sbfl, max_abs_deviation })
        })
        .collect()
}

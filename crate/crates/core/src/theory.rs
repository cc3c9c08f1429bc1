//! Mean-squared-error analysis of the aggregators and the convergence bound.

use std::f64::consts::{FRAC_2_PI, PI};

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{conditional_mean_elementwise, AggregationInput, Formulation, PriorParams};
use crate::channel::{likelihood, marginal_density, LinkState};
use crate::error::{Error, Result};
use crate::prior::{sign, GaussianPrior};
use crate::quadrature::{integrate, Tolerance};
use crate::rng::{Purpose, Substreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseMethod {
    Quadrature,
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub value: f64,
    pub method: MseMethod,
    /// Zero for deterministic methods.
    pub stderr: f64,
}

impl MseReport {
    fn exact(value: f64, method: MseMethod) -> Self {
        Self { value, method, stderr: 0.0 }
    }
}

fn check_lengths(priors: &[GaussianPrior], links: &[LinkState]) -> Result<()> {
    if priors.len() != links.len() || priors.is_empty() {
        return Err(Error::invalid("priors and links must be non-empty and of equal length"));
    }
    Ok(())
}

/// Absolute tolerance of the single-device `tanh^2` integral.
pub const MSE_QUADRATURE_TOL: f64 = 1e-10;

/// `E[tanh^2(c h y / sigma^2)]` under the equiprobable-sign marginal of `y`,
/// with `c` given by the formulation.
pub fn tanh_squared_expectation(link: LinkState, formulation: Formulation) -> Result<f64> {
    link.validate()?;
    if link.h == 0.0 {
        return Ok(0.0);
    }
    if link.sigma2 == 0.0 {
        return Ok(1.0);
    }
    let h = link.h.abs();
    let sigma = link.sigma2.sqrt();
    let reach = h + 10.0 * sigma;
    let link = LinkState { h, sigma2: link.sigma2 };
    // tanh saturation scale and the peak of the received density.
    let c = formulation.tanh_scale();
    let knee = link.sigma2 / (c * h);
    let mut breaks = vec![knee, 5.0 * knee, h];
    breaks.extend((1..=6).flat_map(|j| [h - j as f64 * sigma, h + j as f64 * sigma]));
    let integrand = |y: f64| {
        let t = crate::aggregate::clamped_tanh(c * h * y / link.sigma2);
        t * t * marginal_density(y, link)
    };
    // even integrand: integrate over the positive half and double
    let half = integrate(integrand, 0.0, reach, &breaks, Tolerance::absolute(0.5 * MSE_QUADRATURE_TOL))?;
    Ok(2.0 * half.value)
}

/// Minimum MSE of the conditional-mean aggregator, by quadrature.
pub fn mse_quadrature(priors: &[GaussianPrior], links: &[LinkState], m: usize) -> Result<MseReport> {
    mse_quadrature_with(priors, links, m, Formulation::Corrected)
}

/// `M sum_k nu_k^2 [1 - (2/pi) E tanh^2]`. Only the corrected formulation
/// is the MSE of an actual estimator; the literal variant evaluates the
/// printed expression.
pub fn mse_quadrature_with(
    priors: &[GaussianPrior],
    links: &[LinkState],
    m: usize,
    formulation: Formulation,
) -> Result<MseReport> {
    check_lengths(priors, links)?;
    let mut total = 0.0;
    for (p, link) in priors.iter().zip(links) {
        let e = tanh_squared_expectation(*link, formulation)?;
        total += p.nu * p.nu * (1.0 - FRAC_2_PI * e);
    }
    Ok(MseReport::exact(m as f64 * total, MseMethod::Quadrature))
}

pub fn mse_high_snr_closed_form(priors: &[GaussianPrior], m: usize) -> MseReport {
    let s: f64 = priors.iter().map(|p| p.nu * p.nu).sum();
    MseReport::exact(m as f64 * (1.0 - FRAC_2_PI) * s, MseMethod::ClosedForm)
}

pub fn blmmse_mse_closed_form(
    priors: &[GaussianPrior],
    links: &[LinkState],
    m: usize,
    mode: Formulation,
) -> Result<MseReport> {
    check_lengths(priors, links)?;
    let mut total = 0.0;
    for (p, l) in priors.iter().zip(links) {
        let h2 = l.h * l.h;
        let denom = match mode {
            Formulation::Corrected => h2 + l.sigma2,
            Formulation::PaperLiteral => FRAC_2_PI * h2 + l.sigma2,
        };
        let captured = if denom == 0.0 { 0.0 } else { FRAC_2_PI * h2 / denom };
        total += p.nu * p.nu * (1.0 - captured);
    }
    Ok(MseReport::exact(m as f64 * total, MseMethod::ClosedForm))
}

/// Samples per Monte Carlo batch; batches are the unit of parallel work and
/// each owns a substream.
const MC_BATCH: usize = 4096;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Monte Carlo MSE of several aggregators evaluated on the same samples.
///
/// Each sample draws one `M`-dimensional gradient per device from its
/// Gaussian prior, sends the signs of the centered gradients through the
/// device's link, and scores `||aggregate - g_sum||^2`.
pub fn mse_monte_carlo_many<F>(
    aggregators: &[F],
    priors: &[GaussianPrior],
    links: &[LinkState],
    m: usize,
    n_samples: usize,
    streams: Substreams,
) -> Result<Vec<MseReport>>
where
    F: Fn(&AggregationInput) -> Result<Vec<f64>> + Sync,
{
    check_lengths(priors, links)?;
    if n_samples < 1000 {
        return Err(Error::invalid("Monte Carlo MSE needs at least 1000 samples"));
    }
    if m == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let k = priors.len();
    let n_batches = n_samples.div_ceil(MC_BATCH);
    let prior_params: Vec<PriorParams> = priors.iter().map(|p| PriorParams::Gaussian(*p)).collect();

    let partials: Vec<Result<Vec<(f64, f64)>>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let count = MC_BATCH.min(n_samples - b * MC_BATCH);
            let len = count * m;
            let mut rng = streams.stream(Purpose::MonteCarlo, b as u64, 0);
            let mut g_sum = vec![0.0; len];
            let mut received = Vec::with_capacity(k);
            for (p, link) in priors.iter().zip(links) {
                let prior = Normal::new(0.0, p.nu.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
                let noise = crate::channel::awgn(link.sigma2);
                let mut y = Vec::with_capacity(len);
                for acc in g_sum.iter_mut() {
                    let centered: f64 = prior.sample(&mut rng);
                    *acc += p.mu + centered;
                    y.push(link.h * sign(centered) + noise.sample(&mut rng));
                }
                received.push(y);
            }
            let input = AggregationInput { received, priors: prior_params.clone(), links: links.to_vec() };
            aggregators
                .iter()
                .map(|agg| {
                    let est = agg(&input)?;
                    if est.len() != len {
                        return Err(Error::invalid("aggregator changed the dimension"));
                    }
                    let mut s = CompensatedSum::default();
                    let mut s2 = CompensatedSum::default();
                    for (e_chunk, g_chunk) in est.chunks(m).zip(g_sum.chunks(m)) {
                        let err: f64 = e_chunk.iter().zip(g_chunk).map(|(a, b)| (a - b) * (a - b)).sum();
                        s.add(err);
                        s2.add(err * err);
                    }
                    Ok((s.value(), s2.value()))
                })
                .collect()
        })
        .collect();

    let mut sums = vec![(CompensatedSum::default(), CompensatedSum::default()); aggregators.len()];
    for batch in partials {
        for (acc, (s, s2)) in sums.iter_mut().zip(batch?) {
            acc.0.add(s);
            acc.1.add(s2);
        }
    }
    let n = n_samples as f64;
    Ok(sums
        .into_iter()
        .map(|(s, s2)| {
            let mean = s.value() / n;
            let var = ((s2.value() / n - mean * mean) * n / (n - 1.0)).max(0.0);
            MseReport { value: mean, method: MseMethod::MonteCarlo, stderr: (var / n).sqrt() }
        })
        .collect())
}

pub fn mse_monte_carlo<F>(
    aggregator: F,
    priors: &[GaussianPrior],
    links: &[LinkState],
    m: usize,
    n_samples: usize,
    streams: Substreams,
) -> Result<MseReport>
where
    F: Fn(&AggregationInput) -> Result<Vec<f64>> + Sync,
{
    Ok(mse_monte_carlo_many(&[aggregator], priors, links, m, n_samples, streams)?[0])
}

/// How the genie-aided conditional mean is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenieMethod {
    /// Full K-dimensional integral of the joint posterior.
    #[default]
    Joint,
    /// Each peer's likelihood marginalized against the conditional prior
    /// given device k alone; exact for two devices.
    PairwiseFactorized,
}

pub const GENIE_MAX_DEVICES: usize = 3;

/// Standard deviations covered on each integration axis.
const GENIE_REACH: f64 = 10.0;

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

fn axis_breaks(mean: f64, std: f64) -> (f64, f64, Vec<f64>) {
    let lo = mean - GENIE_REACH * std;
    let hi = mean + GENIE_REACH * std;
    let mut breaks = vec![0.0, mean];
    breaks.extend((1..=4).flat_map(|j| [mean - j as f64 * std, mean + j as f64 * std]));
    (lo, hi, breaks)
}

fn genie_tolerance() -> Tolerance {
    Tolerance { abs: 1e-14, rel: 1e-10, max_segments: 2000 }
}

/// Conditional mean of every device's (scalar) gradient given all received
/// symbols, under a jointly Gaussian prior. Small `K` only.
pub fn genie_bfl_conditional_mean(
    mean: &[f64],
    covariance: &DMatrix<f64>,
    ys: &[f64],
    links: &[LinkState],
    method: GenieMethod,
) -> Result<Vec<f64>> {
    let k = mean.len();
    if k > GENIE_MAX_DEVICES {
        return Err(Error::Capability(format!(
            "genie quadrature supports at most {GENIE_MAX_DEVICES} devices, got {k}"
        )));
    }
    if k == 0 || ys.len() != k || links.len() != k || covariance.shape() != (k, k) {
        return Err(Error::invalid("genie inputs have inconsistent sizes"));
    }
    for l in links {
        l.validate()?;
    }
    if (0..k).any(|i| (0..k).any(|j| (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12)) {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    let chol = covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("covariance must be positive definite"))?;
    let lower = chol.l();
    let centered = match method {
        GenieMethod::Joint => genie_joint(&lower, ys, links)?,
        GenieMethod::PairwiseFactorized => genie_factorized(covariance, ys, links)?,
    };
    Ok(centered.iter().zip(mean).map(|(c, m)| c + m).collect())
}

/// Nested integration over `x_1, ..., x_K` with `x = L z`; at depth `j` the
/// axis density is the Gaussian conditional of `x_j` given the outer axes.
fn genie_joint(lower: &DMatrix<f64>, ys: &[f64], links: &[LinkState]) -> Result<Vec<f64>> {
    let k = ys.len();
    let weight = |j: usize, x: f64| likelihood(ys[j], sign(x), links[j]);

    // moment = None integrates the posterior mass; Some(i) the first moment of x_i.
    fn level(
        j: usize,
        z: &mut Vec<f64>,
        xs: &mut Vec<f64>,
        lower: &DMatrix<f64>,
        weight: &dyn Fn(usize, f64) -> f64,
        moment: Option<usize>,
    ) -> Result<f64> {
        let k = lower.nrows();
        if j == k {
            return Ok(moment.map_or(1.0, |i| xs[i]));
        }
        let cond_mean: f64 = (0..j).map(|l| lower[(j, l)] * z[l]).sum();
        let cond_std = lower[(j, j)];
        let (lo, hi, breaks) = axis_breaks(cond_mean, cond_std);
        let mut failure = None;
        let r = integrate(
            |x| {
                z.push((x - cond_mean) / cond_std);
                xs.push(x);
                let inner = level(j + 1, z, xs, lower, weight, moment);
                z.pop();
                xs.pop();
                match inner {
                    Ok(v) => v * normal_pdf(x, cond_mean, cond_std) * weight(j, x),
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                }
            },
            lo,
            hi,
            &breaks,
            genie_tolerance(),
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(r.value)
    }

    let mut z = Vec::with_capacity(k);
    let mut xs = Vec::with_capacity(k);
    let mass = level(0, &mut z, &mut xs, lower, &weight, None)?;
    (0..k)
        .map(|i| Ok(level(0, &mut z, &mut xs, lower, &weight, Some(i))? / mass))
        .collect()
}

fn genie_factorized(cov: &DMatrix<f64>, ys: &[f64], links: &[LinkState]) -> Result<Vec<f64>> {
    let k = ys.len();
    let mut out = Vec::with_capacity(k);
    for target in 0..k {
        let var_t = cov[(target, target)];
        let std_t = var_t.sqrt();
        // P(y_i | x_target) = \int P(y_i | x_i) P(x_i | x_target) dx_i
        let peer = |i: usize, xt: f64| -> Result<f64> {
            let cm = cov[(i, target)] / var_t * xt;
            let cs = (cov[(i, i)] - cov[(i, target)] * cov[(i, target)] / var_t).max(0.0).sqrt();
            if cs < 1e-12 * cov[(i, i)].sqrt() {
                return Ok(likelihood(ys[i], sign(cm), links[i]));
            }
            let (lo, hi, breaks) = axis_breaks(cm, cs);
            let r = integrate(
                |xi| likelihood(ys[i], sign(xi), links[i]) * normal_pdf(xi, cm, cs),
                lo,
                hi,
                &breaks,
                genie_tolerance(),
            )?;
            Ok(r.value)
        };
        let (lo, hi, breaks) = axis_breaks(0.0, std_t);
        let mut integrals = [0.0; 2];
        for (slot, power) in integrals.iter_mut().zip([0, 1]) {
            let mut failure = None;
            let r = integrate(
                |xt| {
                    let mut w = likelihood(ys[target], sign(xt), links[target]) * normal_pdf(xt, 0.0, std_t);
                    for i in (0..k).filter(|&i| i != target) {
                        match peer(i, xt) {
                            Ok(p) => w *= p,
                            Err(e) => {
                                failure.get_or_insert(e);
                                return 0.0;
                            }
                        }
                    }
                    w * xt.powi(power)
                },
                lo,
                hi,
                &breaks,
                genie_tolerance(),
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            *slot = r.value;
        }
        out.push(integrals[1] / integrals[0]);
    }
    Ok(out)
}

/// Separable estimate used as the reference for the genie under independence.
pub fn separable_conditional_mean(mean: &[f64], variances: &[f64], ys: &[f64], links: &[LinkState]) -> Vec<f64> {
    mean.iter()
        .zip(variances)
        .zip(ys.iter().zip(links))
        .map(|((mu, var), (y, l))| {
            mu + conditional_mean_elementwise(*y, &PriorParams::Gaussian(GaussianPrior { mu: 0.0, nu: var.sqrt() }), *l)
        })
        .collect()
}

/// Inputs of the non-convex convergence bound with step `gamma / sqrt(t + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBoundInputs {
    pub rounds: usize,
    pub gamma: f64,
    pub smoothness: f64,
    /// Largest per-round aggregation MSE.
    pub sigma_mse: f64,
    pub f0: f64,
    pub fstar: f64,
}

impl ConvergenceBoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("bound needs at least one round"));
        }
        if !(self.gamma > 0.0 && self.smoothness > 0.0) {
            return Err(Error::invalid("gamma and L must be positive"));
        }
        if self.gamma * self.smoothness >= 2.0 {
            return Err(Error::invalid(format!(
                "gamma * L = {} >= 2 makes the bound vacuous",
                self.gamma * self.smoothness
            )));
        }
        if !(self.sigma_mse >= 0.0) || self.f0 < self.fstar || !self.f0.is_finite() || !self.fstar.is_finite() {
            return Err(Error::invalid("need sigma_mse >= 0 and f0 >= fstar"));
        }
        Ok(())
    }
}

/// Upper bound on the average squared gradient norm over `rounds` rounds,
/// in its usual printed form.
pub fn convergence_bound(inputs: &ConvergenceBoundInputs) -> Result<f64> {
    convergence_bound_with(inputs, Formulation::PaperLiteral)
}

/// The printed form divides the noise term by `1 - gamma L / 2` only. Carrying
/// the telescoped inequality through divides it by `gamma (1 - gamma L / 2)`,
/// which is what `Corrected` evaluates.
pub fn convergence_bound_with(inputs: &ConvergenceBoundInputs, formulation: Formulation) -> Result<f64> {
    inputs.validate()?;
    let t = inputs.rounds as f64;
    let gl = inputs.gamma * inputs.smoothness;
    let slack = 1.0 - gl / 2.0;
    let descent = (inputs.f0 - inputs.fstar) / (inputs.gamma * slack);
    let noise_scale = match formulation {
        Formulation::PaperLiteral => inputs.gamma * gl / 2.0,
        Formulation::Corrected => gl / 2.0,
    };
    let noise = inputs.sigma_mse * (1.0 + t.ln()) * noise_scale / slack;
    Ok((descent + noise) / t.sqrt())
}

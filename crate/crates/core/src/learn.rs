//! Federated training loops on the synthetic least-squares task.
//!
//! Device `k` holds `f_k(w) = ||X_k^T w - z_k||^2`; the server estimates the
//! gradient of the global loss `F(w) = sum_k f_k(w)` from one-bit messages.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    blmmse, high_snr_mmse, majority_vote, mmse_gaussian_with, mmse_laplacian_with, AggregationInput, Formulation,
    PriorParams,
};
use crate::channel::{draw_fading, transmit, LinkState};
use crate::data::DeviceDataset;
use crate::prior::{
    center, estimate_gaussian_prior, estimate_laplacian_scale, sign, sign_quantize, GaussianPrior, LaplacianPrior,
    PriorEncoding,
};
use crate::rng::{Purpose, Substreams};
use crate::{Error, Result};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: DVector<f64>,
    pub momentum: DVector<f64>,
    pub round: usize,
}

impl ModelState {
    pub fn new(w: DVector<f64>) -> Self {
        let m = w.len();
        Self { w, momentum: DVector::zeros(m), round: 0 }
    }

    pub fn zeros(m: usize) -> Self {
        Self::new(DVector::zeros(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "signsgd")]
    SignSgd,
    SbflGaussian,
    SbflLaplacian,
    SbflBlmmse,
    SbflHighsnr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::SignSgd,
        Algorithm::SbflGaussian,
        Algorithm::SbflLaplacian,
        Algorithm::SbflBlmmse,
        Algorithm::SbflHighsnr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SignSgd => "signsgd",
            Algorithm::SbflGaussian => "sbfl_gaussian",
            Algorithm::SbflLaplacian => "sbfl_laplacian",
            Algorithm::SbflBlmmse => "sbfl_blmmse",
            Algorithm::SbflHighsnr => "sbfl_highsnr",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    InverseSqrt,
}

impl Schedule {
    pub fn rate(self, gamma: f64, round: usize) -> f64 {
        match self {
            Schedule::Constant => gamma,
            Schedule::InverseSqrt => gamma / ((round + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub algorithm: Algorithm,
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub downlink_compression: bool,
    pub rounds: usize,
    #[serde(default)]
    pub prior_encoding: PriorEncoding,
    /// Samples per device per round; full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub formulation: Formulation,
}

impl TrainingPlan {
    pub fn new(algorithm: Algorithm, gamma: f64, rounds: usize) -> Self {
        Self {
            algorithm,
            gamma,
            delta: 0.0,
            schedule: Schedule::InverseSqrt,
            downlink_compression: false,
            rounds,
            prior_encoding: PriorEncoding::Exact {},
            batch_size: None,
            formulation: Formulation::Corrected,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid("delta must lie in [0, 1)"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("need at least one round"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.prior_encoding.validate()
    }
}

/// Where each round's links come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinkSchedule {
    /// The same links every round.
    Fixed { links: Vec<LinkState> },
    /// Fresh `h ~ N(0, 1)` per device and round with fixed noise variances.
    BlockFading { sigma2: Vec<f64> },
}

impl LinkSchedule {
    pub fn devices(&self) -> usize {
        match self {
            LinkSchedule::Fixed { links } => links.len(),
            LinkSchedule::BlockFading { sigma2 } => sigma2.len(),
        }
    }

    pub fn links(&self, round: usize, streams: Substreams) -> Vec<LinkState> {
        match self {
            LinkSchedule::Fixed { links } => links.clone(),
            LinkSchedule::BlockFading { sigma2 } => sigma2
                .iter()
                .enumerate()
                .map(|(k, &s2)| LinkState {
                    h: draw_fading(&mut streams.stream(Purpose::Fading, k as u64, round as u64)),
                    sigma2: s2,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LinkSchedule::Fixed { links } => links.iter().try_for_each(LinkState::validate),
            LinkSchedule::BlockFading { sigma2 } => {
                if sigma2.iter().all(|s| *s >= 0.0 && s.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::invalid("noise variances must be finite and non-negative"))
                }
            }
        }
    }
}

/// Per-device view of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    /// Prior scalars as decoded by the server.
    pub mu: f64,
    pub spread: f64,
    pub h: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// `F(w^t)` before the update.
    pub loss: f64,
    /// Loss of the model held at the end of the round; the last record's
    /// value is the run's final loss.
    pub loss_after: f64,
    /// `||g_Sigma^t||^2` of the exact full-batch gradient.
    pub grad_norm_sq: f64,
    /// `||g_hat^t||^2` of the server's estimate (the vote for signSGD).
    pub aggregate_norm_sq: f64,
    /// `||g_hat^t - g_Sigma^t||^2`.
    pub aggregate_error_sq: f64,
    pub learning_rate: f64,
    pub devices: Vec<DeviceTrace>,
    pub wall_time_s: f64,
}

impl RoundTrace {
    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &RoundTrace) -> bool {
        RoundTrace { wall_time_s: 0.0, ..self.clone() } == RoundTrace { wall_time_s: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub round: usize,
    pub loss: f64,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::Diverged { round: d.round, loss: d.loss }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub traces: Vec<RoundTrace>,
    /// Loss after the last completed update.
    pub final_loss: f64,
    pub final_model: DVector<f64>,
    pub divergence: Option<Divergence>,
}

impl TrainingRun {
    pub fn into_result(self) -> Result<Self> {
        match self.divergence {
            Some(d) => Err(d.into()),
            None => Ok(self),
        }
    }
}

/// `2 X (X^T w - z)`.
pub fn local_gradient_linreg(x: &DMatrix<f64>, z: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != w.len() || x.ncols() != z.len() {
        return Err(Error::invalid(format!(
            "X is {}x{}, w has {} entries, z has {}",
            x.nrows(),
            x.ncols(),
            w.len(),
            z.len()
        )));
    }
    let r = x.tr_mul(w) - z;
    Ok(x * r * 2.0)
}

pub fn local_loss(d: &DeviceDataset, w: &DVector<f64>) -> f64 {
    (d.x.tr_mul(w) - &d.z).norm_squared()
}

pub fn global_loss(devices: &[DeviceDataset], w: &DVector<f64>) -> f64 {
    devices.iter().map(|d| local_loss(d, w)).sum()
}

pub fn global_gradient(devices: &[DeviceDataset], w: &DVector<f64>) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(w.len());
    for d in devices {
        g += local_gradient_linreg(&d.x, &d.z, w)?;
    }
    Ok(g)
}

/// Hessian of the global loss, `2 sum_k X_k X_k^T`.
pub fn global_hessian(devices: &[DeviceDataset]) -> Result<DMatrix<f64>> {
    let m = check_devices(devices)?;
    let mut h = DMatrix::zeros(m, m);
    for d in devices {
        h += &d.x * d.x.transpose();
    }
    Ok(h * 2.0)
}

fn check_devices(devices: &[DeviceDataset]) -> Result<usize> {
    let m = devices.first().ok_or_else(|| Error::invalid("no devices"))?.dimension();
    if devices.iter().any(|d| d.dimension() != m) {
        return Err(Error::invalid("devices disagree on the model dimension"));
    }
    Ok(m)
}

pub const POWER_ITERATION_TOL: f64 = 1e-8;

/// Largest eigenvalue of the global Hessian by power iteration.
pub fn smoothness_constant(devices: &[DeviceDataset]) -> Result<f64> {
    let h = global_hessian(devices)?;
    let m = h.nrows();
    let mut v = DVector::from_fn(m, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let hv = &h * &v;
        let next = v.dot(&hv);
        let norm = hv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = hv / norm;
        // Rayleigh quotient and vector norm bracket the top eigenvalue.
        if (norm - next).abs() <= POWER_ITERATION_TOL * next.abs() * 0.5 && (next - lambda).abs() <= POWER_ITERATION_TOL * next {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::NumericalFailure { achieved: f64::NAN, requested: POWER_ITERATION_TOL })
}

/// Least-squares minimizer of the global loss and its value.
pub fn least_squares_optimum(devices: &[DeviceDataset]) -> Result<(DVector<f64>, f64)> {
    let m = check_devices(devices)?;
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for d in devices {
        a += &d.x * d.x.transpose();
        b += &d.x * &d.z;
    }
    let w = a.svd(true, true).solve(&b, 1e-12).map_err(|e| Error::invalid(e.to_string()))?;
    let f = global_loss(devices, &w);
    Ok((w, f))
}

/// What the server holds after one uplink phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub input: AggregationInput,
    /// Exact full-batch `g_Sigma`, for tracing only.
    pub true_gradient: DVector<f64>,
    pub payload_bits: Option<u32>,
}

/// Device side of a round: gradients, priors, signs and the channel.
/// `cap` is the current upper end of the spread quantizer.
pub fn run_round_uplink(
    w: &DVector<f64>,
    plan: &TrainingPlan,
    devices: &[DeviceDataset],
    links: &[LinkState],
    cap: f64,
    streams: Substreams,
    round: usize,
) -> Result<Uplink> {
    let m = check_devices(devices)?;
    if w.len() != m {
        return Err(Error::invalid(format!("model has {} entries, data has {m} features", w.len())));
    }
    if links.len() != devices.len() {
        return Err(Error::invalid(format!("{} links for {} devices", links.len(), devices.len())));
    }
    let per_device: Vec<Result<(Vec<f64>, PriorParams, DVector<f64>)>> = devices
        .par_iter()
        .zip(links.par_iter())
        .enumerate()
        .map(|(k, (d, link))| {
            let full = local_gradient_linreg(&d.x, &d.z, w)?;
            let g = match plan.batch_size {
                Some(b) if b < d.samples() => {
                    let mut rng = streams.stream(Purpose::Batch, k as u64, round as u64);
                    let idx = sample(&mut rng, d.samples(), b).into_vec();
                    let x = d.x.select_columns(&idx);
                    let z = DVector::from_iterator(b, idx.iter().map(|&i| d.z[i]));
                    local_gradient_linreg(&x, &z, w)? * (d.samples() as f64 / b as f64)
                }
                _ => full.clone(),
            };
            let g = g.as_slice();
            let (signs, prior) = match plan.algorithm {
                Algorithm::SignSgd => {
                    (sign_quantize(g), PriorParams::Gaussian(GaussianPrior { mu: 0.0, nu: 0.0 }))
                }
                Algorithm::SbflLaplacian => {
                    let p = estimate_gaussian_prior(g)?;
                    let centered = center(g, p.mu);
                    let lambda = estimate_laplacian_scale(&centered)?;
                    let (mu, lambda) = plan.prior_encoding.encode(p.mu, lambda, cap)?;
                    (sign_quantize(&centered), PriorParams::Laplacian(LaplacianPrior { mu, lambda }))
                }
                _ => {
                    let p = estimate_gaussian_prior(g)?;
                    let centered = center(g, p.mu);
                    let (mu, nu) = plan.prior_encoding.encode(p.mu, p.nu, cap)?;
                    (sign_quantize(&centered), PriorParams::Gaussian(GaussianPrior { mu, nu }))
                }
            };
            let y = transmit(&signs, *link, &mut streams.stream(Purpose::Noise, k as u64, round as u64));
            Ok((y, prior, full))
        })
        .collect();
    let mut received = Vec::with_capacity(devices.len());
    let mut priors = Vec::with_capacity(devices.len());
    let mut true_gradient = DVector::zeros(m);
    for r in per_device {
        let (y, p, g) = r?;
        received.push(y);
        priors.push(p);
        true_gradient += g;
    }
    let payload_bits = match plan.algorithm {
        Algorithm::SignSgd => None,
        _ => plan.prior_encoding.payload_bits(),
    };
    Ok(Uplink { input: AggregationInput::new(received, priors, links.to_vec())?, true_gradient, payload_bits })
}

/// Server side: the gradient estimate for the plan's algorithm.
pub fn aggregate_uplink(plan: &TrainingPlan, uplink: &Uplink, streams: Substreams, round: usize) -> Result<Vec<f64>> {
    let input = &uplink.input;
    match plan.algorithm {
        Algorithm::SignSgd => {
            let mut rng = streams.stream(Purpose::Vote, 0, round as u64);
            Ok(majority_vote(input, &mut rng)?.to_f64())
        }
        Algorithm::SbflGaussian => mmse_gaussian_with(input, plan.formulation),
        Algorithm::SbflLaplacian => mmse_laplacian_with(input, plan.formulation),
        Algorithm::SbflBlmmse => blmmse(input, plan.formulation),
        Algorithm::SbflHighsnr => high_snr_mmse(input),
    }
}

fn device_traces(uplink: &Uplink) -> Vec<DeviceTrace> {
    uplink
        .input
        .priors
        .iter()
        .zip(&uplink.input.links)
        .map(|(p, l)| DeviceTrace { mu: p.mu(), spread: p.spread(), h: l.h, sigma2: l.sigma2 })
        .collect()
}

fn check_inputs(plan: &TrainingPlan, devices: &[DeviceDataset], links: &LinkSchedule) -> Result<usize> {
    plan.validate()?;
    links.validate()?;
    let m = check_devices(devices)?;
    if links.devices() != devices.len() {
        return Err(Error::invalid(format!("{} links for {} devices", links.devices(), devices.len())));
    }
    Ok(m)
}

fn next_cap(plan: &TrainingPlan, cap: f64, uplink: &Uplink) -> f64 {
    let spreads: Vec<f64> = uplink.input.priors.iter().map(PriorParams::spread).collect();
    plan.prior_encoding.next_cap(cap, &spreads)
}

/// Trains from `w0`, switching to the one-bit downlink loop when the plan asks for it.
pub fn run_training(
    plan: &TrainingPlan,
    devices: &[DeviceDataset],
    links: &LinkSchedule,
    w0: DVector<f64>,
    streams: Substreams,
) -> Result<TrainingRun> {
    if plan.downlink_compression {
        return run_training_downlink_compressed(plan, devices, links, w0, streams);
    }
    let m = check_inputs(plan, devices, links)?;
    if w0.len() != m {
        return Err(Error::invalid("initial model has the wrong dimension"));
    }
    let mut state = ModelState::new(w0);
    let mut cap = plan.prior_encoding.initial_cap();
    let mut traces = Vec::with_capacity(plan.rounds);
    let mut loss = global_loss(devices, &state.w);
    for t in 0..plan.rounds {
        let start = Instant::now();
        if let Some(d) = diverged(loss, t) {
            return Ok(TrainingRun { traces, final_loss: loss, final_model: state.w, divergence: Some(d) });
        }
        let round_links = links.links(t, streams);
        let uplink = run_round_uplink(&state.w, plan, devices, &round_links, cap, streams, t)?;
        let estimate = DVector::from_vec(aggregate_uplink(plan, &uplink, streams, t)?);
        cap = next_cap(plan, cap, &uplink);
        let rate = plan.schedule.rate(plan.gamma, t);
        state.momentum = &state.momentum * plan.delta + &estimate;
        state.w -= &state.momentum * rate;
        state.round = t + 1;
        let loss_after = global_loss(devices, &state.w);
        traces.push(RoundTrace {
            round: t,
            loss,
            loss_after,
            grad_norm_sq: uplink.true_gradient.norm_squared(),
            aggregate_norm_sq: estimate.norm_squared(),
            aggregate_error_sq: (&estimate - &uplink.true_gradient).norm_squared(),
            learning_rate: rate,
            devices: device_traces(&uplink),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        loss = loss_after;
    }
    finish(traces, state.w, loss, plan.rounds)
}

fn diverged(loss: f64, round: usize) -> Option<Divergence> {
    (!loss.is_finite() || loss > DIVERGENCE_LOSS).then_some(Divergence { round, loss })
}

fn finish(traces: Vec<RoundTrace>, w: DVector<f64>, final_loss: f64, rounds: usize) -> Result<TrainingRun> {
    let divergence = diverged(final_loss, rounds);
    Ok(TrainingRun { traces, final_loss, final_model: w, divergence })
}

/// Per-device copies of the model under downlink compression.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReplicas {
    pub models: Vec<ModelState>,
}

impl DeviceReplicas {
    pub fn all_equal(&self) -> bool {
        self.models.windows(2).all(|p| p[0] == p[1])
    }
}

/// Bits the server broadcasts per round under downlink compression.
pub fn downlink_payload_bits(m: usize) -> usize {
    m
}

/// One-bit downlink variant. Every device keeps its own model and momentum and applies
/// the sign of the previous round's aggregate; nothing is applied in round 0
/// and the last broadcast is never applied.
pub fn run_training_downlink_compressed(
    plan: &TrainingPlan,
    devices: &[DeviceDataset],
    links: &LinkSchedule,
    w0: DVector<f64>,
    streams: Substreams,
) -> Result<TrainingRun> {
    run_downlink_inner(plan, devices, links, w0, streams, |_| {}).map(|(run, _)| run)
}

/// As [`run_training_downlink_compressed`], handing the replicas to
/// `observe` after every device update and returning the last broadcast.
pub fn run_downlink_inner(
    plan: &TrainingPlan,
    devices: &[DeviceDataset],
    links: &LinkSchedule,
    w0: DVector<f64>,
    streams: Substreams,
    mut observe: impl FnMut(&DeviceReplicas),
) -> Result<(TrainingRun, Vec<f64>)> {
    let m = check_inputs(plan, devices, links)?;
    if w0.len() != m {
        return Err(Error::invalid("initial model has the wrong dimension"));
    }
    let mut replicas = DeviceReplicas { models: vec![ModelState::new(w0); devices.len()] };
    let mut broadcast = vec![0.0; m];
    let mut cap = plan.prior_encoding.initial_cap();
    let mut traces = Vec::with_capacity(plan.rounds);
    for t in 0..plan.rounds {
        let start = Instant::now();
        let rate = plan.schedule.rate(plan.gamma, t);
        let step = DVector::from_column_slice(&broadcast);
        for r in replicas.models.iter_mut() {
            r.momentum = &r.momentum * plan.delta + &step;
            r.w -= &r.momentum * rate;
            r.round = t;
        }
        observe(&replicas);
        let w = replicas.models[0].w.clone();
        let loss = global_loss(devices, &w);
        if let Some(d) = diverged(loss, t) {
            return Ok((TrainingRun { traces, final_loss: loss, final_model: w, divergence: Some(d) }, broadcast));
        }
        let round_links = links.links(t, streams);
        let uplink = run_round_uplink(&w, plan, devices, &round_links, cap, streams, t)?;
        let estimate = aggregate_uplink(plan, &uplink, streams, t)?;
        cap = next_cap(plan, cap, &uplink);
        broadcast = estimate.iter().map(|&v| sign(v)).collect();
        let est = DVector::from_vec(estimate);
        traces.push(RoundTrace {
            round: t,
            loss,
            loss_after: loss,
            grad_norm_sq: uplink.true_gradient.norm_squared(),
            aggregate_norm_sq: est.norm_squared(),
            aggregate_error_sq: (&est - &uplink.true_gradient).norm_squared(),
            learning_rate: rate,
            devices: device_traces(&uplink),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let w = replicas.models[0].w.clone();
    let loss = global_loss(devices, &w);
    finish(traces, w, loss, plan.rounds).map(|run| (run, broadcast))
}

/// Initial model: zeros, or `N(0, std^2)` entries from the seed.
pub fn initial_model(m: usize, std: f64, streams: Substreams) -> DVector<f64> {
    if std == 0.0 {
        return DVector::zeros(m);
    }
    let mut rng = streams.stream(Purpose::InitialModel, 0, 0);
    DVector::from_fn(m, |_, _| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

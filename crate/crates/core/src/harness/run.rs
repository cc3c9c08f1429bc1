//! Multi-seed training runs: `train`, `bound-check` and `sweep`.

use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Fading, NetworkSpec, ThresholdMetric, ThresholdSpec};
use crate::aggregate::Formulation;
use crate::channel::{draw_fading, geometry_to_links, LinkState};
use crate::data::{gen_synthetic, DeviceDataset};
use crate::learn::{
    initial_model, least_squares_optimum, run_training, smoothness_constant, Algorithm, LinkSchedule, RoundTrace,
    Schedule, TrainingRun,
};
use crate::rng::{Purpose, Substreams};
use crate::theory::{convergence_bound, convergence_bound_with, tanh_squared_expectation, ConvergenceBoundInputs};
use crate::{Error, Result};

/// Everything one seed's runs share: data, channels and reference values.
#[derive(Debug, Clone)]
pub struct SeedTask {
    pub seed: u64,
    pub devices: Vec<DeviceDataset>,
    pub links: LinkSchedule,
    pub smoothness: f64,
    pub w0: DVector<f64>,
    pub f0: f64,
    pub fstar: f64,
    pub samples: usize,
}

fn noise_variances(cfg: &ExperimentConfig, streams: Substreams) -> Result<Vec<f64>> {
    let k = cfg.dataset.devices;
    Ok(match &cfg.network {
        NetworkSpec::Geometry { geometry, .. } => {
            geometry_to_links(geometry, k, |i| streams.stream(Purpose::Placement, i as u64, 0))?
                .into_iter()
                .map(|p| p.sigma2)
                .collect()
        }
        NetworkSpec::LogSpaced { min_sigma2, max_sigma2, .. } => (0..k)
            .map(|i| {
                let f = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                min_sigma2 * (max_sigma2 / min_sigma2).powf(f)
            })
            .collect(),
        NetworkSpec::Explicit { sigma2, .. } => sigma2.clone(),
    })
}

/// Channel schedule of one seed.
pub fn link_schedule(cfg: &ExperimentConfig, streams: Substreams) -> Result<LinkSchedule> {
    let sigma2 = noise_variances(cfg, streams)?;
    if let NetworkSpec::Explicit { h: Some(h), .. } = &cfg.network {
        let links = h.iter().zip(&sigma2).map(|(&h, &s)| LinkState { h, sigma2: s }).collect();
        return Ok(LinkSchedule::Fixed { links });
    }
    Ok(match cfg.network.fading() {
        Fading::Block => LinkSchedule::BlockFading { sigma2 },
        Fading::Fixed => LinkSchedule::Fixed {
            links: sigma2
                .iter()
                .enumerate()
                .map(|(k, &s)| LinkState {
                    h: draw_fading(&mut streams.stream(Purpose::Fading, k as u64, u64::MAX)),
                    sigma2: s,
                })
                .collect(),
        },
        Fading::Unit => LinkSchedule::Fixed { links: sigma2.iter().map(|&s| LinkState { h: 1.0, sigma2: s }).collect() },
    })
}

pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<SeedTask> {
    let streams = Substreams::new(seed);
    let d = &cfg.dataset;
    let devices = gen_synthetic(d.devices, d.samples_per_device, d.dimension, d.heterogeneity, streams)?;
    let smoothness = smoothness_constant(&devices)?;
    let (_, fstar) = least_squares_optimum(&devices)?;
    let w0 = initial_model(d.dimension, cfg.training.init_std, streams);
    let f0 = crate::learn::global_loss(&devices, &w0);
    Ok(SeedTask {
        seed,
        links: link_schedule(cfg, streams)?,
        devices,
        smoothness,
        w0,
        f0,
        fstar,
        samples: d.devices * d.samples_per_device,
    })
}

/// One algorithm on one seed.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub run: TrainingRun,
    pub f0: f64,
    pub fstar: f64,
    pub smoothness: f64,
    pub samples: usize,
}

pub fn run_one(cfg: &ExperimentConfig, task: &SeedTask, algorithm: Algorithm, gamma: f64, delta: f64) -> Result<RunRecord> {
    let plan = crate::learn::TrainingPlan { delta, ..cfg.training.plan(algorithm, gamma) };
    let run = run_training(&plan, &task.devices, &task.links, task.w0.clone(), Substreams::new(task.seed))?;
    Ok(RunRecord {
        algorithm,
        gamma,
        delta,
        seed: task.seed,
        run,
        f0: task.f0,
        fstar: task.fstar,
        smoothness: task.smoothness,
        samples: task.samples,
    })
}

/// Thread pool for seed-level parallelism; `None` uses every core.
pub fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    b.build().map_err(|e| Error::invalid(e.to_string()))
}

/// Runs every configured algorithm on every seed. Results are ordered by
/// seed, then algorithm.
pub fn train(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<RunRecord>> {
    let seeds = cfg.seeds.seeds();
    let per_seed: Vec<Result<Vec<RunRecord>>> = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let task = build_task(cfg, seed)?;
                let gamma = cfg.training.step.resolve(task.smoothness);
                cfg.training
                    .algorithms
                    .iter()
                    .map(|&a| run_one(cfg, &task, a, gamma, cfg.training.delta))
                    .collect()
            })
            .collect()
    });
    Ok(per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Rounds until the metric first reaches the level: 0 when the initial
/// model already does, `None` when never reached.
pub fn rounds_to_threshold(traces: &[RoundTrace], f0: f64, fstar: f64, samples: usize, threshold: ThresholdSpec) -> Option<usize> {
    let metric = |loss: f64| match threshold.metric {
        ThresholdMetric::Loss => loss,
        ThresholdMetric::PerSampleLoss => loss / samples as f64,
        ThresholdMetric::ExcessFraction => (loss - fstar) / (f0 - fstar),
    };
    let first = traces.first()?;
    if metric(first.loss) <= threshold.level {
        return Some(0);
    }
    traces.iter().position(|t| t.loss_after.is_finite() && metric(t.loss_after) <= threshold.level).map(|i| i + 1)
}

/// One CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub algorithm: String,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub rounds: usize,
    pub final_loss: f64,
    pub final_per_sample_loss: f64,
    pub final_excess_loss: f64,
    pub optimal_loss: f64,
    pub initial_loss: f64,
    pub rounds_to_threshold: Option<usize>,
    pub diverged: bool,
    pub divergence_round: Option<usize>,
}

impl SummaryRecord {
    pub fn from_run(r: &RunRecord, threshold: Option<ThresholdSpec>) -> Self {
        let final_loss = r.run.final_loss;
        Self {
            algorithm: r.algorithm.name().into(),
            gamma: r.gamma,
            delta: r.delta,
            seed: r.seed,
            rounds: r.run.traces.len(),
            final_loss,
            final_per_sample_loss: final_loss / r.samples as f64,
            final_excess_loss: final_loss - r.fstar,
            optimal_loss: r.fstar,
            initial_loss: r.f0,
            rounds_to_threshold: threshold.and_then(|t| rounds_to_threshold(&r.run.traces, r.f0, r.fstar, r.samples, t)),
            diverged: r.run.divergence.is_some(),
            divergence_round: r.run.divergence.map(|d| d.round),
        }
    }
}

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

/// Across-seed statistics of one `(algorithm, gamma, delta)` cell.
/// Loss statistics cover the seeds that did not diverge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub algorithm: String,
    /// Absent when the seeds used different step sizes (`1/L` per seed).
    pub gamma: Option<f64>,
    pub delta: f64,
    pub seeds: usize,
    pub diverged: usize,
    pub mean_final_loss: Option<f64>,
    pub std_final_loss: Option<f64>,
    pub mean_excess_loss: Option<f64>,
    pub std_excess_loss: Option<f64>,
    pub reached: usize,
    /// Mean rounds-to-threshold; absent unless every seed reached the level.
    pub mean_rounds_to_threshold: Option<f64>,
}

/// Groups by `(algorithm, delta)`, and by `gamma` too when `by_gamma`.
pub fn aggregate(rows: &[SummaryRecord], by_gamma: bool) -> Vec<AggregateRecord> {
    let mut order: Vec<(String, u64, u64)> = Vec::new();
    let mut groups: HashMap<(String, u64, u64), Vec<&SummaryRecord>> = HashMap::new();
    for r in rows {
        let key = (r.algorithm.clone(), if by_gamma { r.gamma.to_bits() } else { 0 }, r.delta.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&&SummaryRecord> = g.iter().filter(|r| !r.diverged).collect();
            let fl = mean_std(&ok.iter().map(|r| r.final_loss).collect::<Vec<_>>());
            let ex = mean_std(&ok.iter().map(|r| r.final_excess_loss).collect::<Vec<_>>());
            let reached: Vec<f64> = g.iter().filter_map(|r| r.rounds_to_threshold.map(|v| v as f64)).collect();
            let all = reached.len() == g.len();
            AggregateRecord {
                algorithm: key.0.clone(),
                gamma: g.iter().all(|r| r.gamma == g[0].gamma).then_some(g[0].gamma),
                delta: g[0].delta,
                seeds: g.len(),
                diverged: g.len() - ok.len(),
                mean_final_loss: fl.map(|v| v.0),
                std_final_loss: fl.map(|v| v.1),
                mean_excess_loss: ex.map(|v| v.0),
                std_excess_loss: ex.map(|v| v.1),
                reached: reached.len(),
                mean_rounds_to_threshold: if all { mean_std(&reached).map(|v| v.0) } else { None },
            }
        })
        .collect()
}

/// One round of one seed in the bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub seed: u64,
    pub round: usize,
    pub grad_norm_sq: f64,
    pub running_average: f64,
    /// Largest quadrature MSE seen up to this round.
    pub sigma2_mse: f64,
    /// Bound as usually printed.
    pub bound: f64,
    /// Bound with the noise term divided by the step size.
    pub bound_corrected: f64,
    pub holds: bool,
    pub holds_corrected: bool,
}

fn check_bound_preconditions(cfg: &ExperimentConfig) -> Result<()> {
    let t = &cfg.training;
    if t.delta != 0.0 || t.schedule != Schedule::InverseSqrt || t.downlink_compression {
        return Err(Error::invalid("bound check needs delta = 0, inverse_sqrt schedule and no downlink compression"));
    }
    if t.formulation != Formulation::Corrected {
        return Err(Error::Capability("bound check uses the corrected MSE".into()));
    }
    if t.algorithms != [Algorithm::SbflGaussian] {
        return Err(Error::Capability("bound check applies to sbfl_gaussian alone".into()));
    }
    Ok(())
}

/// Per-round MSE of the Gaussian conditional-mean aggregator for the priors
/// and links recorded in a trace. `cache` memoizes the per-link integral.
fn trace_mse(trace: &RoundTrace, m: usize, cache: &mut HashMap<(u64, u64), f64>) -> Result<f64> {
    let mut total = 0.0;
    for d in &trace.devices {
        let key = (d.h.to_bits(), d.sigma2.to_bits());
        let e = match cache.get(&key) {
            Some(e) => *e,
            None => {
                let e = tanh_squared_expectation(LinkState { h: d.h, sigma2: d.sigma2 }, Formulation::Corrected)?;
                cache.insert(key, e);
                e
            }
        };
        total += d.spread * d.spread * (1.0 - std::f64::consts::FRAC_2_PI * e);
    }
    Ok(m as f64 * total)
}

/// Empirical side of the convergence bound for one run.
pub fn bound_rows(record: &RunRecord, m: usize) -> Result<Vec<BoundRow>> {
    let mut cache = HashMap::new();
    let mut sigma2_mse: f64 = 0.0;
    let mut sum = 0.0;
    let mut rows = Vec::with_capacity(record.run.traces.len());
    for (i, t) in record.run.traces.iter().enumerate() {
        sigma2_mse = sigma2_mse.max(trace_mse(t, m, &mut cache)?);
        sum += t.grad_norm_sq;
        let running_average = sum / (i + 1) as f64;
        let inputs = ConvergenceBoundInputs {
            rounds: i + 1,
            gamma: record.gamma,
            smoothness: record.smoothness,
            sigma_mse: sigma2_mse,
            f0: record.f0,
            fstar: record.fstar,
        };
        let bound = convergence_bound(&inputs)?;
        let bound_corrected = convergence_bound_with(&inputs, Formulation::Corrected)?;
        rows.push(BoundRow {
            seed: record.seed,
            round: i,
            grad_norm_sq: t.grad_norm_sq,
            running_average,
            sigma2_mse,
            bound,
            bound_corrected,
            holds: running_average <= bound,
            holds_corrected: running_average <= bound_corrected,
        });
    }
    Ok(rows)
}

pub struct BoundCheck {
    pub records: Vec<RunRecord>,
    pub rows: Vec<BoundRow>,
}

impl BoundCheck {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.holds).count()
    }

    pub fn violations_corrected(&self) -> usize {
        self.rows.iter().filter(|r| !r.holds_corrected).count()
    }
}

pub fn bound_check(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<BoundCheck> {
    check_bound_preconditions(cfg)?;
    let records = train(cfg, jobs)?;
    let mut rows = Vec::new();
    for r in &records {
        if let Some(d) = r.run.divergence {
            return Err(d.into());
        }
        rows.extend(bound_rows(r, cfg.dataset.dimension)?);
    }
    Ok(BoundCheck { records, rows })
}

/// Runs the `(gamma, delta, algorithm)` grid on every seed.
pub fn sweep(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<RunRecord>> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config { key: "sweep".into(), message: "missing section".into() })?;
    let algorithms = spec.algorithms.clone().unwrap_or_else(|| cfg.training.algorithms.clone());
    let seeds = cfg.seeds.seeds();
    let per_seed: Vec<Result<Vec<RunRecord>>> = pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let task = build_task(cfg, seed)?;
                let mut out = Vec::new();
                for &a in &algorithms {
                    for &g in &spec.gammas {
                        for &d in &spec.deltas {
                            out.push(run_one(cfg, &task, a, g, d)?);
                        }
                    }
                }
                Ok(out)
            })
            .collect()
    });
    let mut all: Vec<RunRecord> = per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let pos = |a: Algorithm| algorithms.iter().position(|&b| b == a).unwrap_or(usize::MAX);
    let gpos = |g: f64| spec.gammas.iter().position(|&x| x == g).unwrap_or(usize::MAX);
    let dpos = |d: f64| spec.deltas.iter().position(|&x| x == d).unwrap_or(usize::MAX);
    all.sort_by_key(|r| (pos(r.algorithm), gpos(r.gamma), dpos(r.delta), r.seed));
    Ok(all)
}

/// Best (fewest mean rounds) reached cell per algorithm.
pub fn best_cells(cells: &[AggregateRecord]) -> Vec<(String, Option<&AggregateRecord>)> {
    let mut names: Vec<String> = Vec::new();
    for c in cells {
        if !names.contains(&c.algorithm) {
            names.push(c.algorithm.clone());
        }
    }
    names
        .into_iter()
        .map(|n| {
            let best = cells
                .iter()
                .filter(|c| c.algorithm == n && c.mean_rounds_to_threshold.is_some())
                .min_by(|a, b| a.mean_rounds_to_threshold.partial_cmp(&b.mean_rounds_to_threshold).unwrap());
            (n, best)
        })
        .collect()
}

/// Plain-text rounds-to-threshold table; unreached cells show `-`.
pub fn render_sweep(cells: &[AggregateRecord]) -> String {
    let mut s = String::from("algorithm        gamma      delta  rounds   reached  diverged\n");
    for c in cells {
        let rounds = c.mean_rounds_to_threshold.map_or("-".to_string(), |r| format!("{r:.1}"));
        let gamma = c.gamma.map_or("1/L".to_string(), |g| format!("{g:e}"));
        s.push_str(&format!(
            "{:<16} {:<10} {:<6} {:<8} {:>2}/{:<5} {}\n",
            c.algorithm, gamma, c.delta, rounds, c.reached, c.seeds, c.diverged
        ));
    }
    s
}

//! Server-side aggregation of the K received vectors.
//!
//! Every estimator here is separable across devices and coordinates: the
//! estimate of the gradient sum is a per-device term summed over devices in
//! index order.

use std::f64::consts::FRAC_2_PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::LinkState;
use crate::error::{Error, Result};
use crate::prior::{sign, GaussianPrior, LaplacianPrior, SignVector};

/// `sqrt(2/pi)`, the mean absolute value of a standard normal variable.
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Bound applied to the `tanh` argument; `tanh` is already +-1 to machine
/// precision beyond 30.
pub const TANH_ARG_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorParams {
    Gaussian(GaussianPrior),
    Laplacian(LaplacianPrior),
}

impl PriorParams {
    pub fn mu(&self) -> f64 {
        match self {
            PriorParams::Gaussian(p) => p.mu,
            PriorParams::Laplacian(p) => p.mu,
        }
    }

    /// `E|g - mu|` under the prior.
    pub fn mean_abs(&self) -> f64 {
        match self {
            PriorParams::Gaussian(p) => SQRT_2_OVER_PI * p.nu,
            PriorParams::Laplacian(p) => p.lambda,
        }
    }

    /// Spread parameter as transmitted: `nu` or `lambda`.
    pub fn spread(&self) -> f64 {
        match self {
            PriorParams::Gaussian(p) => p.nu,
            PriorParams::Laplacian(p) => p.lambda,
        }
    }

    fn gaussian(&self) -> Result<GaussianPrior> {
        match self {
            PriorParams::Gaussian(p) => Ok(*p),
            PriorParams::Laplacian(_) => Err(Error::invalid("estimator requires Gaussian priors")),
        }
    }

    fn laplacian(&self) -> Result<LaplacianPrior> {
        match self {
            PriorParams::Laplacian(p) => Ok(*p),
            PriorParams::Gaussian(_) => Err(Error::invalid("estimator requires Laplacian priors")),
        }
    }
}

/// What the server holds at the end of an uplink phase.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationInput {
    pub received: Vec<Vec<f64>>,
    pub priors: Vec<PriorParams>,
    pub links: Vec<LinkState>,
}

impl AggregationInput {
    pub fn new(received: Vec<Vec<f64>>, priors: Vec<PriorParams>, links: Vec<LinkState>) -> Result<Self> {
        let input = Self { received, priors, links };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.received.len();
        if k == 0 {
            return Err(Error::invalid("no devices"));
        }
        if self.priors.len() != k || self.links.len() != k {
            return Err(Error::invalid(format!(
                "{} received vectors, {} priors, {} links",
                k,
                self.priors.len(),
                self.links.len()
            )));
        }
        let m = self.received[0].len();
        if self.received.iter().any(|y| y.len() != m) {
            return Err(Error::invalid("received vectors have different lengths"));
        }
        for link in &self.links {
            link.validate()?;
        }
        Ok(())
    }

    pub fn devices(&self) -> usize {
        self.received.len()
    }

    pub fn dimension(&self) -> usize {
        self.received.first().map_or(0, Vec::len)
    }

    /// The single-device sub-problem for device `k`.
    pub fn device(&self, k: usize) -> AggregationInput {
        AggregationInput {
            received: vec![self.received[k].clone()],
            priors: vec![self.priors[k]],
            links: vec![self.links[k]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Posterior mean `E|g| tanh(h y / sigma^2)`; linear gain with
    /// denominator `h^2 + sigma^2`, the variance of the received symbol.
    #[default]
    Corrected,
    /// `tanh(2 h y / sigma^2)` and denominator `(2/pi) h^2 + sigma^2`, as
    /// the closed forms are usually printed.
    PaperLiteral,
}

impl Formulation {
    /// Multiplier of `h y / sigma^2` inside `tanh`.
    pub fn tanh_scale(self) -> f64 {
        match self {
            Formulation::Corrected => 1.0,
            Formulation::PaperLiteral => 2.0,
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(Formulation::Corrected),
            "paper-literal" | "paper_literal" => Ok(Formulation::PaperLiteral),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[inline]
pub fn clamped_tanh(arg: f64) -> f64 {
    arg.clamp(-TANH_ARG_LIMIT, TANH_ARG_LIMIT).tanh()
}

/// `E[g - mu | y]` for a single coordinate under a zero-centered prior.
pub fn conditional_mean_elementwise(y: f64, prior: &PriorParams, link: LinkState) -> f64 {
    tanh_term(y, prior, link, Formulation::Corrected)
}

/// `E|g - mu| tanh(c h y / sigma^2)` with `c` set by the formulation; the
/// noise-free link uses the sign limit.
pub fn tanh_term(y: f64, prior: &PriorParams, link: LinkState, formulation: Formulation) -> f64 {
    if link.sigma2 == 0.0 {
        if link.h == 0.0 {
            return 0.0;
        }
        return prior.mean_abs() * sign(y) * sign(link.h);
    }
    prior.mean_abs() * clamped_tanh(formulation.tanh_scale() * link.h * y / link.sigma2)
}

fn sum_over_devices<F>(input: &AggregationInput, mut per_device: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> Result<()>,
{
    input.validate()?;
    let mut total = vec![0.0; input.dimension()];
    let mut term = vec![0.0; input.dimension()];
    for (k, y) in input.received.iter().enumerate() {
        per_device(k, y, &mut term)?;
        for (t, v) in total.iter_mut().zip(&term) {
            *t += v;
        }
    }
    Ok(total)
}

fn tanh_estimator(
    input: &AggregationInput,
    formulation: Formulation,
    require: fn(&PriorParams) -> Result<()>,
) -> Result<Vec<f64>> {
    sum_over_devices(input, |k, y, out| {
        let prior = &input.priors[k];
        require(prior)?;
        let link = input.links[k];
        if link.sigma2 == 0.0 && link.h == 0.0 {
            return Err(Error::invalid(format!("device {k}: zero gain on a noise-free link")));
        }
        let mu = prior.mu();
        for (o, &ym) in out.iter_mut().zip(y) {
            *o = mu + tanh_term(ym, prior, link, formulation);
        }
        Ok(())
    })
}

/// Conditional-mean aggregation under Gaussian priors.
pub fn mmse_gaussian(input: &AggregationInput) -> Result<Vec<f64>> {
    mmse_gaussian_with(input, Formulation::Corrected)
}

pub fn mmse_gaussian_with(input: &AggregationInput, formulation: Formulation) -> Result<Vec<f64>> {
    tanh_estimator(input, formulation, |p| p.gaussian().map(|_| ()))
}

/// Conditional-mean aggregation under Laplacian priors.
pub fn mmse_laplacian(input: &AggregationInput) -> Result<Vec<f64>> {
    mmse_laplacian_with(input, Formulation::Corrected)
}

pub fn mmse_laplacian_with(input: &AggregationInput, formulation: Formulation) -> Result<Vec<f64>> {
    tanh_estimator(input, formulation, |p| p.laplacian().map(|_| ()))
}

/// Per-device gain of the Bussgang linear estimator.
pub fn blmmse_gain(prior: &GaussianPrior, link: LinkState, mode: Formulation) -> f64 {
    let h2 = link.h * link.h;
    let denom = match mode {
        Formulation::Corrected => h2 + link.sigma2,
        Formulation::PaperLiteral => FRAC_2_PI * h2 + link.sigma2,
    };
    if denom == 0.0 {
        return 0.0;
    }
    SQRT_2_OVER_PI * link.h * prior.nu / denom
}

/// Linear aggregation after Bussgang linearization of the sign quantizer.
pub fn blmmse(input: &AggregationInput, mode: Formulation) -> Result<Vec<f64>> {
    sum_over_devices(input, |k, y, out| {
        let prior = input.priors[k].gaussian()?;
        let gain = blmmse_gain(&prior, input.links[k], mode);
        for (o, &ym) in out.iter_mut().zip(y) {
            *o = prior.mu + gain * ym;
        }
        Ok(())
    })
}

fn require_nonzero_gain(input: &AggregationInput) -> Result<()> {
    if let Some(k) = input.links.iter().position(|l| l.h == 0.0) {
        return Err(Error::invalid(format!("device {k}: high-SNR limit undefined for zero gain")));
    }
    Ok(())
}

/// Noise-free limit of the conditional-mean aggregator.
pub fn high_snr_mmse(input: &AggregationInput) -> Result<Vec<f64>> {
    input.validate()?;
    require_nonzero_gain(input)?;
    sum_over_devices(input, |k, y, out| {
        let prior = &input.priors[k];
        let sh = sign(input.links[k].h);
        for (o, &ym) in out.iter_mut().zip(y) {
            *o = prior.mu() + prior.mean_abs() * sign(ym) * sh;
        }
        Ok(())
    })
}

/// Noise-free limit of the linear aggregator.
pub fn high_snr_blmmse(input: &AggregationInput) -> Result<Vec<f64>> {
    input.validate()?;
    require_nonzero_gain(input)?;
    sum_over_devices(input, |k, y, out| {
        let prior = &input.priors[k];
        let h = input.links[k].h;
        for (o, &ym) in out.iter_mut().zip(y) {
            *o = prior.mu() + prior.mean_abs() * ym / h;
        }
        Ok(())
    })
}

/// Sign of the sum of per-device detected signs. A device with zero gain
/// contributes a fair coin flip per coordinate.
pub fn majority_vote<R: Rng + ?Sized>(input: &AggregationInput, rng: &mut R) -> Result<SignVector> {
    let votes = vote_sum(input, rng)?;
    SignVector::from_signs(votes.iter().map(|&v| if v >= 0 { 1 } else { -1 }).collect())
}

/// Per-coordinate sum of detected signs, before taking the final sign.
pub fn vote_sum<R: Rng + ?Sized>(input: &AggregationInput, rng: &mut R) -> Result<Vec<i64>> {
    input.validate()?;
    let mut sum = vec![0i64; input.dimension()];
    for (y, link) in input.received.iter().zip(&input.links) {
        if link.h == 0.0 {
            for s in sum.iter_mut() {
                *s += if rng.random::<bool>() { 1 } else { -1 };
            }
            continue;
        }
        let sh = sign(link.h);
        for (s, &ym) in sum.iter_mut().zip(y) {
            *s += (sign(ym) * sh) as i64;
        }
    }
    Ok(sum)
}

/// Which server-side estimator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MmseGaussian(Formulation),
    MmseLaplacian(Formulation),
    Blmmse(Formulation),
    HighSnrMmse,
    HighSnrBlmmse,
}

impl Aggregator {
    pub fn apply(&self, input: &AggregationInput) -> Result<Vec<f64>> {
        match *self {
            Aggregator::MmseGaussian(f) => mmse_gaussian_with(input, f),
            Aggregator::MmseLaplacian(f) => mmse_laplacian_with(input, f),
            Aggregator::Blmmse(mode) => blmmse(input, mode),
            Aggregator::HighSnrMmse => high_snr_mmse(input),
            Aggregator::HighSnrBlmmse => high_snr_blmmse(input),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::MmseGaussian(Formulation::Corrected) => "mmse_gaussian",
            Aggregator::MmseGaussian(Formulation::PaperLiteral) => "mmse_gaussian_paper_literal",
            Aggregator::MmseLaplacian(Formulation::Corrected) => "mmse_laplacian",
            Aggregator::MmseLaplacian(Formulation::PaperLiteral) => "mmse_laplacian_paper_literal",
            Aggregator::Blmmse(Formulation::Corrected) => "blmmse_corrected",
            Aggregator::Blmmse(Formulation::PaperLiteral) => "blmmse_paper_literal",
            Aggregator::HighSnrMmse => "high_snr_mmse",
            Aggregator::HighSnrBlmmse => "high_snr_blmmse",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::channel::{awgn, transmit};
    use crate::prior::sign_quantize;
    use crate::quadrature::{integrate, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gauss(mu: f64, nu: f64) -> PriorParams {
        PriorParams::Gaussian(GaussianPrior { mu, nu })
    }

    fn lap(mu: f64, lambda: f64) -> PriorParams {
        PriorParams::Laplacian(LaplacianPrior { mu, lambda })
    }

    fn single(y: Vec<f64>, prior: PriorParams, h: f64, sigma2: f64) -> AggregationInput {
        AggregationInput::new(vec![y], vec![prior], vec![LinkState { h, sigma2 }]).unwrap()
    }

    #[test]
    fn sqrt_two_over_pi_constant() {
        assert!((SQRT_2_OVER_PI - (2.0 / PI).sqrt()).abs() < 1e-16);
    }

    #[test]
    fn input_shapes_are_checked() {
        let l = LinkState { h: 1.0, sigma2: 1.0 };
        assert!(AggregationInput::new(vec![], vec![], vec![]).is_err());
        assert!(AggregationInput::new(vec![vec![0.0]], vec![], vec![l]).is_err());
        assert!(AggregationInput::new(vec![vec![0.0], vec![0.0, 1.0]], vec![gauss(0.0, 1.0); 2], vec![l; 2]).is_err());
    }

    #[test]
    fn majority_vote_examples() {
        let l = LinkState { h: 1.0, sigma2: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = AggregationInput::new(
            vec![vec![0.5, -0.1], vec![0.2, -3.0], vec![-1.0, 2.0]],
            vec![gauss(0.0, 1.0); 3],
            vec![l; 3],
        )
        .unwrap();
        assert_eq!(majority_vote(&input, &mut rng).unwrap().as_slice(), &[1, -1]);
        let tie = AggregationInput::new(vec![vec![1.0], vec![-1.0]], vec![gauss(0.0, 1.0); 2], vec![l; 2]).unwrap();
        assert_eq!(majority_vote(&tie, &mut rng).unwrap().as_slice(), &[1]);
        // Negative gain flips the detected sign without dividing.
        let neg = single(vec![-0.3], gauss(0.0, 1.0), -2.0, 1.0);
        assert_eq!(majority_vote(&neg, &mut rng).unwrap().as_slice(), &[1]);
    }

    #[test]
    fn majority_vote_noise_free_matches_sign_descent() {
        let grads = [vec![0.3, -2.0, 0.1, -0.4], vec![1.0, -1.0, -0.2, -0.5], vec![-0.7, 0.2, -0.3, 0.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let links = vec![LinkState { h: 0.5, sigma2: 0.0 }, LinkState { h: 1.5, sigma2: 0.0 }, LinkState { h: 2.0, sigma2: 0.0 }];
        let received = grads
            .iter()
            .zip(&links)
            .map(|(g, l)| transmit(&sign_quantize(g), *l, &mut rng))
            .collect();
        let input = AggregationInput::new(received, vec![gauss(0.0, 1.0); 3], links).unwrap();
        let expected: Vec<i8> = (0..4)
            .map(|m| {
                let s: f64 = grads.iter().map(|g| sign(g[m])).sum();
                if s >= 0.0 { 1 } else { -1 }
            })
            .collect();
        assert_eq!(majority_vote(&input, &mut rng).unwrap().as_slice(), expected.as_slice());
    }

    #[test]
    fn dead_link_votes_randomly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = single(vec![5.0; 2000], gauss(0.0, 1.0), 0.0, 1.0);
        let votes = majority_vote(&input, &mut rng).unwrap();
        let plus = votes.as_slice().iter().filter(|&&v| v == 1).count();
        assert!((800..1200).contains(&plus), "plus votes {plus}");
    }

    #[test]
    fn mmse_gaussian_examples() {
        let zero = AggregationInput::new(
            vec![vec![0.0; 3], vec![0.0; 3]],
            vec![gauss(0.0, 1.0), gauss(0.0, 3.0)],
            vec![LinkState { h: 1.0, sigma2: 1.0 }, LinkState { h: -0.5, sigma2: 2.0 }],
        )
        .unwrap();
        assert_eq!(mmse_gaussian(&zero).unwrap(), vec![0.0; 3]);

        let v = mmse_gaussian(&single(vec![1.0], gauss(0.0, 1.0), 1.0, 2.0)).unwrap();
        assert!((v[0] - 0.368_716_145_059_871_5).abs() < 1e-15, "{}", v[0]);
        let lit = mmse_gaussian_with(&single(vec![1.0], gauss(0.0, 1.0), 1.0, 2.0), Formulation::PaperLiteral).unwrap();
        assert!((lit[0] - 0.607_664_218_634_794_4).abs() < 1e-15, "{}", lit[0]);

        let sat = AggregationInput::new(
            vec![vec![1e9], vec![1e9]],
            vec![gauss(0.5, 1.0), gauss(-0.2, 2.0)],
            vec![LinkState { h: 1.0, sigma2: 1.0 }, LinkState { h: 2.0, sigma2: 0.1 }],
        )
        .unwrap();
        let expected = 0.5 + SQRT_2_OVER_PI + (-0.2 + 2.0 * SQRT_2_OVER_PI);
        assert!((mmse_gaussian(&sat).unwrap()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn mmse_noise_free_link_uses_limit() {
        let input = single(vec![0.3, -0.2], gauss(0.1, 1.0), 2.0, 0.0);
        assert_eq!(mmse_gaussian(&input).unwrap(), high_snr_mmse(&input).unwrap());
        assert!(mmse_gaussian(&single(vec![0.0], gauss(0.0, 1.0), 0.0, 0.0)).is_err());
    }

    #[test]
    fn mmse_laplacian_examples() {
        assert_eq!(mmse_laplacian(&single(vec![0.0], lap(0.0, 2.0), 1.0, 1.0)).unwrap(), vec![0.0]);
        let v = mmse_laplacian(&single(vec![1.0], lap(0.0, 2.0), 1.0, 2.0)).unwrap();
        assert!((v[0] - 0.924_234_314_520_019_5).abs() < 1e-14, "{}", v[0]);
        let lit = mmse_laplacian_with(&single(vec![1.0], lap(0.0, 2.0), 1.0, 2.0), Formulation::PaperLiteral).unwrap();
        assert!((lit[0] - 1.523_188_311_911_530_3).abs() < 1e-14, "{}", lit[0]);
        let y = vec![-0.7, 0.1, 2.5];
        let g = mmse_gaussian(&single(y.clone(), gauss(0.3, 1.7), 0.8, 0.6)).unwrap();
        let l = mmse_laplacian(&single(y, lap(0.3, SQRT_2_OVER_PI * 1.7), 0.8, 0.6)).unwrap();
        for (a, b) in g.iter().zip(&l) {
            assert!((a - b).abs() < 1e-15);
        }
        // noise-free limit: weighted sign
        let v = mmse_laplacian(&single(vec![-0.4], lap(0.0, 3.0), 1.0, 0.0)).unwrap();
        assert_eq!(v, vec![-3.0]);
    }

    #[test]
    fn prior_family_is_enforced() {
        let input = single(vec![0.5], lap(0.0, 1.0), 1.0, 1.0);
        assert!(mmse_gaussian(&input).is_err());
        assert!(blmmse(&input, Formulation::Corrected).is_err());
        assert!(mmse_laplacian(&single(vec![0.5], gauss(0.0, 1.0), 1.0, 1.0)).is_err());
    }

    #[test]
    fn blmmse_examples() {
        assert_eq!(blmmse(&single(vec![0.0], gauss(0.0, 1.0), 1.0, 1.0), Formulation::Corrected).unwrap(), vec![0.0]);
        let v = blmmse(&single(vec![1.7], gauss(0.0, 1.0), 1.0, 0.0), Formulation::Corrected).unwrap();
        assert!((v[0] - SQRT_2_OVER_PI * 1.7).abs() < 1e-15);
        let lit = blmmse_gain(&GaussianPrior { mu: 0.0, nu: 1.0 }, LinkState { h: 1.0, sigma2: 1.0 }, Formulation::PaperLiteral);
        assert!((lit - SQRT_2_OVER_PI / (2.0 / PI + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn blmmse_gain_matches_least_squares_fit() {
        let (nu, h, sigma2) = (1.0, 1.0, 1.0);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = Normal::new(0.0, nu).unwrap();
        let noise = awgn(sigma2);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let g: f64 = prior.sample(&mut rng);
            let y = h * sign(g) + noise.sample(&mut rng);
            pairs.push((g, y));
        }
        // Regression through the origin: c = E[gy] / E[y^2].
        let syy: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let sgy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
        let c = sgy / syy;
        let resid_var = pairs.iter().map(|p| (p.0 - c * p.1).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (resid_var / syy).sqrt();
        let corrected = blmmse_gain(&GaussianPrior { mu: 0.0, nu }, LinkState { h, sigma2 }, Formulation::Corrected);
        assert!((c - corrected).abs() < 3.0 * se, "fit {c} corrected {corrected} se {se}");
        let literal = blmmse_gain(&GaussianPrior { mu: 0.0, nu }, LinkState { h, sigma2 }, Formulation::PaperLiteral);
        assert!((c - literal).abs() > 3.0 * se);
    }

    #[test]
    fn high_snr_examples() {
        let input = AggregationInput::new(
            vec![vec![0.4, -0.1], vec![-2.0, -0.3], vec![0.7, 0.2]],
            vec![gauss(0.0, 2.0); 3],
            vec![LinkState { h: 1.0, sigma2: 0.5 }; 3],
        )
        .unwrap();
        let out = high_snr_mmse(&input).unwrap();
        assert!((out[0] - 2.0 * SQRT_2_OVER_PI).abs() < 1e-15);
        assert!((out[1] + 2.0 * SQRT_2_OVER_PI).abs() < 1e-15);

        let one = single(vec![1.3], gauss(0.2, 0.5), 1.3, 1.0);
        assert!((high_snr_mmse(&one).unwrap()[0] - (0.2 + 0.5 * SQRT_2_OVER_PI)).abs() < 1e-15);

        let two_h = single(vec![2.0 * 0.9], gauss(0.0, 1.0), 0.9, 1.0);
        assert!((high_snr_blmmse(&two_h).unwrap()[0] - 2.0 * SQRT_2_OVER_PI).abs() < 1e-15);

        assert!(high_snr_mmse(&single(vec![1.0], gauss(0.0, 1.0), 0.0, 1.0)).is_err());
        assert!(high_snr_blmmse(&single(vec![1.0], gauss(0.0, 1.0), 0.0, 1.0)).is_err());
    }

    #[test]
    fn noise_free_linear_and_sign_limits_agree() {
        let h = -1.4;
        let signs = sign_quantize(&[0.3, -0.2, 0.0, -5.0]);
        let y: Vec<f64> = signs.to_f64().iter().map(|s| h * s).collect();
        let input = single(y, gauss(0.1, 0.8), h, 0.0);
        assert_eq!(high_snr_mmse(&input).unwrap(), high_snr_blmmse(&input).unwrap());
    }

    #[test]
    fn mmse_converges_to_high_snr_limit() {
        let y = vec![0.37, -1.2, 0.05];
        let mut last = f64::INFINITY;
        for sigma2 in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
            let input = single(y.clone(), gauss(0.0, 1.3), 0.8, sigma2);
            let a = mmse_gaussian(&input).unwrap();
            let b = high_snr_mmse(&input).unwrap();
            last = a.iter().zip(&b).map(|(x, z)| (x - z).abs()).fold(0.0, f64::max);
        }
        assert!(last < 1e-6, "deviation {last}");
    }

    #[test]
    fn corrected_blmmse_converges_to_linear_limit() {
        let input = single(vec![0.37, -1.2], gauss(0.0, 1.3), 0.8, 1e-12);
        let a = blmmse(&input, Formulation::Corrected).unwrap();
        let b = high_snr_blmmse(&input).unwrap();
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() < 1e-9);
        }
    }

    #[test]
    fn literal_tanh_argument_is_not_the_posterior_mean() {
        let link = LinkState { h: 1.0, sigma2: 2.0 };
        let p = gauss(0.0, 1.0);
        let exact = conditional_mean_elementwise(0.5, &p, link);
        let literal = tanh_term(0.5, &p, link, Formulation::PaperLiteral);
        assert!((exact - 0.195_416_819_384_408_7).abs() < 1e-15);
        assert!((literal - exact).abs() > 0.1);
    }

    #[test]
    fn conditional_mean_matches_quadrature() {
        let (nu, h, sigma2, y) = (1.0, 1.0, 2.0, 0.5);
        let link = LinkState { h, sigma2 };
        let joint = |g: f64| {
            let lik = crate::channel::likelihood(y, sign(g), link);
            lik * (-(g * g) / (2.0 * nu * nu)).exp() / (nu * (2.0 * PI).sqrt())
        };
        let tol = Tolerance::absolute(1e-14);
        let num = integrate(|g| g * joint(g), -12.0, 12.0, &[0.0], tol).unwrap().value;
        let den = integrate(joint, -12.0, 12.0, &[0.0], tol).unwrap().value;
        let closed = conditional_mean_elementwise(y, &gauss(0.0, nu), link);
        assert!((num / den - closed).abs() < 1e-8);
        assert_eq!(conditional_mean_elementwise(0.0, &gauss(0.0, nu), link), 0.0);
        let p = gauss(0.0, 0.7);
        assert_eq!(conditional_mean_elementwise(-0.9, &p, link), -conditional_mean_elementwise(0.9, &p, link));
    }

    #[test]
    fn laplacian_conditional_mean_matches_quadrature() {
        let (lambda, h, sigma2, y) = (1.5, 0.7, 0.9, -0.4);
        let link = LinkState { h, sigma2 };
        let joint = |g: f64| crate::channel::likelihood(y, sign(g), link) * (-g.abs() / lambda).exp() / (2.0 * lambda);
        let tol = Tolerance::absolute(1e-14);
        let num = integrate(|g| g * joint(g), -60.0, 60.0, &[0.0], tol).unwrap().value;
        let den = integrate(joint, -60.0, 60.0, &[0.0], tol).unwrap().value;
        let closed = conditional_mean_elementwise(y, &lap(0.0, lambda), link);
        assert!((num / den - closed).abs() < 1e-8);
    }

    #[test]
    fn aggregate_is_sum_of_single_device_aggregates() {
        let input = AggregationInput::new(
            vec![vec![0.4, -0.1, 3.0], vec![-2.0, -0.3, 0.0], vec![0.7, 0.2, -0.6]],
            vec![gauss(0.1, 2.0), gauss(-0.3, 0.5), gauss(0.0, 1.0)],
            vec![LinkState { h: 1.0, sigma2: 0.5 }, LinkState { h: -0.3, sigma2: 2.0 }, LinkState { h: 2.0, sigma2: 0.1 }],
        )
        .unwrap();
        for agg in [
            Aggregator::MmseGaussian(Formulation::Corrected),
            Aggregator::MmseGaussian(Formulation::PaperLiteral),
            Aggregator::Blmmse(Formulation::Corrected),
            Aggregator::Blmmse(Formulation::PaperLiteral),
            Aggregator::HighSnrMmse,
            Aggregator::HighSnrBlmmse,
        ] {
            let whole = agg.apply(&input).unwrap();
            let mut parts = vec![0.0; 3];
            for k in 0..3 {
                for (p, v) in parts.iter_mut().zip(agg.apply(&input.device(k)).unwrap()) {
                    *p += v;
                }
            }
            assert_eq!(whole, parts, "{}", agg.name());
        }
    }

    #[test]
    fn tanh_clamp_is_inert() {
        for arg in [-30.0, -12.5, -1e-3, 0.0, 0.7, 29.99, 30.0] {
            assert_eq!(clamped_tanh(arg), f64::tanh(arg));
        }
        assert_eq!(clamped_tanh(1e308), 1.0);
        assert_eq!(clamped_tanh(f64::NEG_INFINITY), -1.0);
        assert!((1.0 - 30f64.tanh()) < 1e-13);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("corrected".parse::<Formulation>().unwrap(), Formulation::Corrected);
        assert_eq!("paper-literal".parse::<Formulation>().unwrap(), Formulation::PaperLiteral);
        assert!("other".parse::<Formulation>().is_err());
    }
}

//! Random-walk Metropolis–Hastings with folded-normal or adaptive Gaussian
//! proposals, plus chain summaries with Monte Carlo error estimates.
//!
//! Parameters are updated one component at a time, each with its own
//! proposal scale. Adaptation only happens during burn-in; the scales are
//! frozen afterwards so the kept draws come from a fixed, reversible kernel.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Steps per component between two scale adaptations.
pub const ADAPT_WINDOW: usize = 50;
/// Summaries need at least this many kept draws.
pub const MIN_DRAWS: usize = 100;
/// Acceptance below this is reported as a stuck chain.
pub const STUCK_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Proposal {
    /// `|N(current, variance)|` per component; for non-negative parameters.
    FoldedNormal { variances: Vec<f64> },
    /// Gaussian random walk whose variances are tuned during burn-in towards
    /// the middle of `target_band`.
    AdaptiveGaussian {
        variances: Vec<f64>,
        target_band: (f64, f64),
    },
}

impl Proposal {
    pub fn variances(&self) -> &[f64] {
        match self {
            Proposal::FoldedNormal { variances } | Proposal::AdaptiveGaussian { variances, .. } => variances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub init: Vec<f64>,
    pub proposal: Proposal,
    pub seed: u64,
    pub thin: usize,
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.burn_in >= self.n_steps {
            return bad(format!("burn_in {} must be below n_steps {}", self.burn_in, self.n_steps));
        }
        if self.thin == 0 {
            return bad("thin must be >= 1".into());
        }
        let v = self.proposal.variances();
        if v.len() != self.init.len() {
            return bad(format!("{} proposal scales for {} parameters", v.len(), self.init.len()));
        }
        if v.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("proposal scales must be positive".into());
        }
        if let Proposal::AdaptiveGaussian { target_band: (lo, hi), .. } = self.proposal {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return bad(format!("target band ({lo}, {hi}) must satisfy 0 < lo < hi < 1"));
            }
        }
        Ok(())
    }
}

/// Kept draws of one chain, stored row-major (`n_kept × dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub dim: usize,
    pub draws: Vec<f64>,
    /// Acceptance rate over the kept (post burn-in) phase, averaged over components.
    pub accept_rate: f64,
    /// Proposal variances in force after burn-in.
    pub adapted_scales: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ChainResult {
    pub fn n_kept(&self) -> usize {
        self.draws.len() / self.dim.max(1)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().skip(k).step_by(self.dim).copied().collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn folded_normal_propose<R: rand::Rng + ?Sized>(current: f64, sd: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (current + sd * z).abs()
}

/// Density of proposing `to` from `from` under the folded normal with
/// standard deviation `sd`. Symmetric in its first two arguments.
pub fn folded_normal_density(to: f64, from: f64, sd: f64) -> f64 {
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * PI).sqrt();
    (phi((to - from) / sd) + phi((to + from) / sd)) / sd
}

/// Multiplicative Robbins–Monro step on the proposal standard deviations:
/// `scale * exp(t^-0.6 * (rate - band midpoint))`.
pub fn adapt_scales(window_rates: &[f64], scales: &[f64], target_band: (f64, f64), t: usize) -> Vec<f64> {
    let target = 0.5 * (target_band.0 + target_band.1);
    let gamma = (t.max(1) as f64).powf(-0.6);
    scales
        .iter()
        .zip(window_rates)
        .map(|(s, r)| s * (gamma * (r - target)).exp())
        .collect()
}

pub fn run_chain<F>(target: F, config: &McmcConfig) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    let dim = config.init.len();
    let mut rng = seeded(config.seed);
    let mut state = config.init.clone();
    let mut lp = target(&state);
    if !lp.is_finite() {
        return Err(Error::Domain(format!("target is not finite at the initial state {state:?}")));
    }

    let mut sds: Vec<f64> = config.proposal.variances().iter().map(|v| v.sqrt()).collect();
    let adaptive_band = match config.proposal {
        Proposal::AdaptiveGaussian { target_band, .. } => Some(target_band),
        Proposal::FoldedNormal { .. } => None,
    };
    let folded = matches!(config.proposal, Proposal::FoldedNormal { .. });

    let n_keep = (config.n_steps - config.burn_in).div_ceil(config.thin);
    let mut draws = Vec::with_capacity(n_keep * dim);
    let mut window_accepts = vec![0usize; dim];
    let mut windows_done = 0usize;
    let mut kept_accepts = 0usize;
    let mut proposal = state.clone();

    for step in 0..config.n_steps {
        let burning = step < config.burn_in;
        for k in 0..dim {
            proposal[k] = if folded {
                folded_normal_propose(state[k], sds[k], &mut rng)
            } else {
                let z: f64 = rng.sample(StandardNormal);
                state[k] + sds[k] * z
            };
            let lp_new = target(&proposal);
            if lp_new.is_nan() {
                return Err(Error::NonFiniteTarget { step });
            }
            let u: f64 = rng.random();
            if u.ln() < lp_new - lp {
                state[k] = proposal[k];
                lp = lp_new;
                if burning {
                    window_accepts[k] += 1;
                } else {
                    kept_accepts += 1;
                }
            } else {
                proposal[k] = state[k];
            }
        }
        if burning {
            if let Some(band) = adaptive_band {
                if (step + 1) % ADAPT_WINDOW == 0 {
                    windows_done += 1;
                    let rates: Vec<f64> = window_accepts.iter().map(|&a| a as f64 / ADAPT_WINDOW as f64).collect();
                    sds = adapt_scales(&rates, &sds, band, windows_done);
                    window_accepts.iter_mut().for_each(|a| *a = 0);
                }
            }
        } else if (step - config.burn_in) % config.thin == 0 {
            draws.extend_from_slice(&state);
        }
    }

    let post_steps = config.n_steps - config.burn_in;
    let accept_rate = kept_accepts as f64 / (post_steps * dim) as f64;
    let mut warnings = Vec::new();
    if accept_rate < STUCK_ACCEPTANCE {
        log::warn!("chain with seed {} is stuck (acceptance {accept_rate:.4})", config.seed);
        warnings.push(format!("stuck chain: acceptance rate {accept_rate:.4}"));
    }
    Ok(ChainResult {
        dim,
        draws,
        accept_rate,
        adapted_scales: sds.iter().map(|s| s * s).collect(),
        seed: config.seed,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    Sd,
    Var,
}

impl Stat {
    fn apply(self, xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if self == Stat::Mean {
            return mean;
        }
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        match self {
            Stat::Var => var,
            _ => var.sqrt(),
        }
    }
}

/// One requested posterior attribute: a statistic of one parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub param: usize,
    pub stat: Stat,
}

impl Feature {
    pub fn new(name: impl Into<String>, param: usize, stat: Stat) -> Self {
        Feature {
            name: name.into(),
            param,
            stat,
        }
    }
}

/// Posterior features `f^(s)(x)` with their squared Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub names: Vec<String>,
    pub features: Vec<f64>,
    pub mc_variance: Vec<f64>,
    /// Effective sample size per parameter.
    pub ess: Vec<f64>,
    pub accept_rate: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FeatureSummary {
    pub fn mc_se(&self, i: usize) -> f64 {
        self.mc_variance[i].sqrt()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.features[i])
    }
}

/// Sample features, batch-means MC variances (`floor(sqrt(N))` batches) and
/// initial-positive-sequence ESS.
pub fn summarize_chain(chain: &ChainResult, features: &[Feature]) -> Result<FeatureSummary> {
    let n = chain.n_kept();
    if n < MIN_DRAWS {
        return Err(Error::TooFewDraws { got: n, min: MIN_DRAWS });
    }
    if let Some(f) = features.iter().find(|f| f.param >= chain.dim) {
        return Err(Error::InvalidConfig(format!("feature `{}` refers to parameter {}", f.name, f.param)));
    }
    let columns: Vec<Vec<f64>> = (0..chain.dim).map(|k| chain.column(k)).collect();
    let n_batches = (n as f64).sqrt().floor() as usize;
    let batch_len = n / n_batches;
    let offset = n - n_batches * batch_len;

    let mut values = Vec::with_capacity(features.len());
    let mut mc_variance = Vec::with_capacity(features.len());
    for f in features {
        let col = &columns[f.param];
        values.push(f.stat.apply(col));
        let batch_stats: Vec<f64> = col[offset..].chunks_exact(batch_len).map(|b| f.stat.apply(b)).collect();
        let mean = batch_stats.iter().sum::<f64>() / n_batches as f64;
        let var = batch_stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
        mc_variance.push(var / n_batches as f64);
    }
    let ess = columns.iter().map(|c| effective_sample_size(c)).collect();
    Ok(FeatureSummary {
        names: features.iter().map(|f| f.name.clone()).collect(),
        features: values,
        mc_variance,
        ess,
        accept_rate: chain.accept_rate,
        warnings: chain.warnings.clone(),
    })
}

/// Normalised autocorrelations via zero-padded FFT.
pub fn autocorrelation(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = xs.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![1.0; n.min(1)];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Geyer's initial positive sequence estimator, capped at `xs.len()`.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return n as f64;
    }
    let rho = autocorrelation(xs);
    if rho.len() < 2 {
        return n as f64; // constant chain
    }
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho[2 * k] + rho[2 * k + 1];
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1e-12);
    (n as f64 / tau).min(n as f64)
}

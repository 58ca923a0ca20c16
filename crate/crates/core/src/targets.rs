//! Built-in Bayesian analyses whose posterior features are emulated.
//!
//! * `Toy`: exponential data with a half-normal contamination of weight
//!   `eps` and a gamma prior with mean 5 and SD `nu` on the rate.
//! * `River`: AR(1)-in-residuals normal likelihood for annual flows with a
//!   normal/Cauchy mixture prior on the mean (matched quartiles) and an
//!   inverse-gamma prior on the variance.
//!
//! Each has an analytic conjugate corner used as an oracle.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mcmc::{run_chain, summarize_chain, ChainResult, Feature, FeatureSummary, McmcConfig, Proposal, Stat};
use crate::rng::seeded;
use crate::space::{Interval, Region, SpecSpace};

/// Simulated observations of the contaminated exponential example.
pub const TOY_DATA: [f64; 10] = [1.169, 0.386, 1.164, 0.028, 0.506, 0.287, 0.911, 0.200, 0.289, 0.381];
pub const TOY_PRIOR_MEAN: f64 = 5.0;
/// `Phi^-1(0.75)`, the standard normal upper quartile.
pub const NORMAL_QUARTILE: f64 = 0.674490;

/// Conjugate (`phi = 0`, `eps = 0`) river specification inside the
/// exploration ranges, appended to the space-filling design. It keeps the
/// original analysis' `mu0` and `n0`.
pub const RIVER_ANCHOR: [f64; 6] = [1333.0, 1.0, 300.0, 15.0, 0.0, 0.0];

/// Evaluations whose acceptance leaves this band are flagged.
pub const ACCEPT_FLAG_BAND: (f64, f64) = (0.1, 0.8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub z: Vec<f64>,
    /// Optional observation years, aligned with `z`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub years: Vec<i64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(z: Vec<f64>, name: impl Into<String>, units: impl Into<String>) -> Result<Self> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i + 1,
                reason: "non-finite observation".into(),
            });
        }
        Ok(Dataset {
            z,
            years: Vec::new(),
            meta: DatasetMeta {
                name: name.into(),
                units: units.into(),
            },
        })
    }

    pub fn with_years(mut self, years: Vec<i64>) -> Result<Self> {
        if !years.is_empty() && years.len() != self.z.len() {
            return Err(Error::DimensionMismatch {
                expected: self.z.len(),
                got: years.len(),
            });
        }
        self.years = years;
        Ok(self)
    }

    pub fn toy() -> Self {
        Dataset::new(TOY_DATA.to_vec(), "toy", "").expect("static data")
    }

    /// `n` iid draws from `N(mean, sd^2)`, for exercising the river model
    /// without the historical series.
    pub fn synthetic_normal(n: usize, mean: f64, sd: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let dist = Normal::new(mean, sd).expect("valid normal");
        let z = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Dataset::new(z, format!("synthetic N({mean}, {sd}^2)"), "ft3/s").expect("finite draws")
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.z.iter().sum::<f64>() / self.z.len() as f64
    }

    /// Sum of squared deviations from the sample mean.
    pub fn sum_sq_dev(&self) -> f64 {
        let m = self.mean();
        self.z.iter().map(|v| (v - m).powi(2)).sum()
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn ln_weight(w: f64) -> f64 {
    if w <= 0.0 {
        f64::NEG_INFINITY
    } else {
        w.ln()
    }
}

// ---------------------------------------------------------------------------
// contaminated exponential model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub nu: f64,
    pub eps: f64,
    pub mu0: f64,
}

impl ToySpec {
    pub fn from_coords(x: &[f64]) -> Self {
        ToySpec {
            nu: x[0],
            eps: x[1],
            mu0: TOY_PRIOR_MEAN,
        }
    }
}

/// Density of one observation under the contaminated likelihood.
pub fn toy_density(z: f64, theta: f64, eps: f64) -> f64 {
    (1.0 - eps) * theta * (-theta * z).exp() + eps * (2.0 / PI) * theta * (-theta * theta * z * z / PI).exp()
}

pub fn toy_log_likelihood(theta: f64, data: &Dataset, eps: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("rate must be positive, got {theta}")));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Domain(format!("contamination must lie in [0, 1], got {eps}")));
    }
    let (lw_exp, lw_hn) = (ln_weight(1.0 - eps), ln_weight(eps));
    let ln_theta = theta.ln();
    let ln_hn_const = (2.0 / PI).ln();
    Ok(data
        .z
        .iter()
        .map(|&z| {
            let exp_term = lw_exp - theta * z;
            let hn_term = lw_hn + ln_hn_const - theta * theta * z * z / PI;
            ln_theta + log_sum_exp(exp_term, hn_term)
        })
        .sum())
}

/// Gamma prior with mean `mu0 = 5` and standard deviation `nu`.
pub fn toy_log_prior(theta: f64, nu: f64) -> Result<f64> {
    if !(theta > 0.0) || !(nu > 0.0) {
        return Err(Error::Domain(format!("need theta > 0 and nu > 0, got ({theta}, {nu})")));
    }
    let (shape, rate) = toy_prior_shape_rate(nu);
    Ok(shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * theta.ln() - rate * theta)
}

pub fn toy_prior_shape_rate(nu: f64) -> (f64, f64) {
    let v = nu * nu;
    (TOY_PRIOR_MEAN * TOY_PRIOR_MEAN / v, TOY_PRIOR_MEAN / v)
}

/// Posterior `(mean, sd)` of the rate at `eps = 0`.
pub fn toy_conjugate_posterior(nu: f64, data: &Dataset) -> (f64, f64) {
    let (a, b) = toy_prior_shape_rate(nu);
    let shape = a + data.len() as f64;
    let rate = b + data.z.iter().sum::<f64>();
    (shape / rate, shape.sqrt() / rate)
}

/// The four expert specifications of the toy robustness study.
pub fn toy_case_region(case: u8) -> Option<Region> {
    Some(match case {
        1 => Region::Point { x: vec![1.5, 0.5] },
        2 => Region::Box {
            intervals: vec![Interval::fixed(0.8), Interval::new(0.0, 1.0)],
        },
        3 => Region::Box {
            intervals: vec![Interval::new(0.5, 1.9), Interval::fixed(0.72)],
        },
        4 => Region::HalfEllipsoid {
            center: vec![1.0, 0.0],
            semi_axes: vec![0.3, 0.4],
            positive_dim: 1,
        },
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// river-flow model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiverSpec {
    pub mu0: f64,
    pub n0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub eps: f64,
}

impl RiverSpec {
    pub fn from_coords(x: &[f64]) -> Self {
        RiverSpec {
            mu0: x[0],
            n0: x[1],
            alpha: x[2],
            beta: x[3],
            phi: x[4],
            eps: x[5],
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        vec![self.mu0, self.n0, self.alpha, self.beta, self.phi, self.eps]
    }

    /// Hyperparameters of the original conjugate streamflow analysis.
    pub fn original() -> Self {
        RiverSpec {
            mu0: 1333.0,
            n0: 1.0,
            alpha: 6.5,
            beta: 402_057.5,
            phi: 0.0,
            eps: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.n0 > 0.0 && self.alpha > 0.0 && self.beta >= 0.0 && (0.0..=1.0).contains(&self.eps)) {
            return Err(Error::Domain(format!("invalid river hyperparameters {self:?}")));
        }
        Ok(())
    }
}

pub fn river_log_likelihood(mu: f64, sigma2: f64, phi: f64, data: &Dataset) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma^2 must be positive, got {sigma2}")));
    }
    let z = &data.z;
    let norm = -0.5 * (2.0 * PI * sigma2).ln();
    let mut ss = (z[0] - mu).powi(2);
    for i in 1..z.len() {
        let r = z[i] - mu - phi * (z[i - 1] - mu);
        ss += r * r;
    }
    Ok(z.len() as f64 * norm - 0.5 * ss / sigma2)
}

/// Log densities of the normal and Cauchy components of the prior on `mu`
/// given `sigma^2`; both share the quartiles of `N(mu0, (sigma/n0)^2)`.
pub fn river_mu_prior_components(mu: f64, sigma2: f64, mu0: f64, n0: f64) -> (f64, f64) {
    let sd = sigma2.sqrt() / n0;
    let q1 = mu0 - NORMAL_QUARTILE * sd;
    let q3 = mu0 + NORMAL_QUARTILE * sd;
    let normal_sd = (q3 - q1) / (2.0 * NORMAL_QUARTILE);
    let ln_normal = -0.5 * (2.0 * PI).ln() - normal_sd.ln() - 0.5 * ((mu - mu0) / normal_sd).powi(2);
    let gamma = 0.5 * (q3 - q1);
    let ln_cauchy = -(PI * gamma).ln() - (1.0 + ((mu - mu0) / gamma).powi(2)).ln();
    (ln_normal, ln_cauchy)
}

/// Log inverse-gamma density. At `beta = 0` the prior is improper and the
/// `beta`-dependent normalising constant is dropped.
pub fn ln_inv_gamma(sigma2: f64, alpha: f64, beta: f64) -> f64 {
    let kernel = -(alpha + 1.0) * sigma2.ln() - beta / sigma2;
    if beta > 0.0 {
        alpha * beta.ln() - ln_gamma(alpha) + kernel
    } else {
        kernel
    }
}

pub fn river_log_prior(mu: f64, sigma2: f64, spec: &RiverSpec) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma^2 must be positive, got {sigma2}")));
    }
    spec.validate()?;
    let (ln_n, ln_c) = river_mu_prior_components(mu, sigma2, spec.mu0, spec.n0);
    let ln_mu = log_sum_exp(ln_weight(1.0 - spec.eps) + ln_n, ln_weight(spec.eps) + ln_c);
    Ok(ln_mu + ln_inv_gamma(sigma2, spec.alpha, spec.beta))
}

/// Posterior moments in the fixed river feature order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiverMoments {
    pub mean_mu: f64,
    pub var_mu: f64,
    pub mean_sigma2: f64,
    pub var_sigma2: f64,
}

impl RiverMoments {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.mean_mu, self.var_mu, self.mean_sigma2, self.var_sigma2]
    }
}

/// Normal–inverse-gamma update of the `phi = 0, eps = 0` corner, with `n0^2`
/// acting as the prior sample size.
pub fn river_conjugate_posterior(spec: &RiverSpec, data: &Dataset) -> Result<RiverMoments> {
    spec.validate()?;
    let n = data.len() as f64;
    let kappa0 = spec.n0 * spec.n0;
    let kappa = kappa0 + n;
    let zbar = data.mean();
    let alpha_n = spec.alpha + 0.5 * n;
    if alpha_n <= 2.0 {
        return Err(Error::MomentUndefined(format!(
            "posterior shape {alpha_n} <= 2 leaves Var[sigma^2|z] undefined"
        )));
    }
    let beta_n = spec.beta + 0.5 * data.sum_sq_dev() + 0.5 * kappa0 * n / kappa * (zbar - spec.mu0).powi(2);
    let mean_sigma2 = beta_n / (alpha_n - 1.0);
    Ok(RiverMoments {
        mean_mu: (kappa0 * spec.mu0 + n * zbar) / kappa,
        var_mu: mean_sigma2 / kappa,
        mean_sigma2,
        var_sigma2: mean_sigma2 * mean_sigma2 / (alpha_n - 2.0),
    })
}

// ---------------------------------------------------------------------------
// the analysis as a computer model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Toy,
    River,
}

impl Model {
    pub fn space(self) -> SpecSpace {
        match self {
            Model::Toy => SpecSpace::toy(),
            Model::River => SpecSpace::river(),
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Model::Toy => &["theta"],
            Model::River => &["mu", "sigma2"],
        }
    }

    /// The output vector `f(x)` in its fixed order.
    pub fn features(self) -> Vec<Feature> {
        match self {
            Model::Toy => vec![
                Feature::new("mean_theta", 0, Stat::Mean),
                Feature::new("sd_theta", 0, Stat::Sd),
            ],
            Model::River => vec![
                Feature::new("mean_mu", 0, Stat::Mean),
                Feature::new("var_mu", 0, Stat::Var),
                Feature::new("mean_sigma2", 1, Stat::Mean),
                Feature::new("var_sigma2", 1, Stat::Var),
            ],
        }
    }

    pub fn default_data(self) -> Option<Dataset> {
        match self {
            Model::Toy => Some(Dataset::toy()),
            Model::River => None,
        }
    }

    /// Unnormalised log posterior at specification `x`. Returns `-inf`
    /// outside the parameter support.
    pub fn log_posterior<'a>(self, x: &[f64], data: &'a Dataset) -> Box<dyn Fn(&[f64]) -> f64 + Sync + 'a> {
        match self {
            Model::Toy => {
                let spec = ToySpec::from_coords(x);
                Box::new(move |p: &[f64]| {
                    let theta = p[0];
                    if !(theta > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    match (toy_log_prior(theta, spec.nu), toy_log_likelihood(theta, data, spec.eps)) {
                        (Ok(a), Ok(b)) => a + b,
                        _ => f64::NAN,
                    }
                })
            }
            Model::River => {
                let spec = RiverSpec::from_coords(x);
                Box::new(move |p: &[f64]| {
                    let (mu, sigma2) = (p[0], p[1]);
                    if !(sigma2 > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    match (
                        river_log_prior(mu, sigma2, &spec),
                        river_log_likelihood(mu, sigma2, spec.phi, data),
                    ) {
                        (Ok(a), Ok(b)) => a + b,
                        _ => f64::NAN,
                    }
                })
            }
        }
    }

    /// Sampler settings used for one evaluation of `f^(s)(x)`.
    ///
    /// Toy: 200000 folded-normal steps of variance 0.9 from `theta = 0.5`
    /// with 100 burn-in. River: `n_steps` adaptive Gaussian steps with 10%
    /// burn-in, started near the conditional posterior mode.
    pub fn default_config(self, x: &[f64], data: &Dataset, n_steps: Option<usize>, seed: u64) -> McmcConfig {
        match self {
            Model::Toy => McmcConfig {
                n_steps: n_steps.unwrap_or(200_000),
                burn_in: 100,
                init: vec![0.5],
                proposal: Proposal::FoldedNormal { variances: vec![0.9] },
                seed,
                thin: 1,
            },
            Model::River => {
                let spec = RiverSpec::from_coords(x);
                let n = data.len() as f64;
                let sigma2 = (spec.beta + 0.5 * data.sum_sq_dev()) / (spec.alpha + 0.5 * n + 1.0);
                let steps = n_steps.unwrap_or(100_000);
                McmcConfig {
                    n_steps: steps,
                    burn_in: steps / 10,
                    init: vec![data.mean(), sigma2],
                    proposal: Proposal::AdaptiveGaussian {
                        variances: vec![sigma2 / (n + spec.n0 * spec.n0), sigma2 * sigma2 / (spec.alpha + 0.5 * n)],
                        target_band: (0.3, 0.5),
                    },
                    seed,
                    thin: 1,
                }
            }
        }
    }
}

/// One evaluation of the stochastic computer model `f^(s)(x)`.
pub fn evaluate_target(model: Model, x: &[f64], data: &Dataset, config: &McmcConfig) -> Result<FeatureSummary> {
    model.space().check(x)?;
    evaluate_target_unchecked(model, x, data, config)
}

/// As [`evaluate_target`] but accepts specifications outside the model's
/// exploration ranges (e.g. a manually added reference analysis).
pub fn evaluate_target_unchecked(model: Model, x: &[f64], data: &Dataset, config: &McmcConfig) -> Result<FeatureSummary> {
    evaluate_target_with_chain(model, x, data, config).map(|(s, _)| s)
}

/// As [`evaluate_target_unchecked`], also returning the kept draws.
pub fn evaluate_target_with_chain(model: Model, x: &[f64], data: &Dataset, config: &McmcConfig) -> Result<(FeatureSummary, ChainResult)> {
    model.space().check_dim(x)?;
    if model == Model::River && data.len() < 2 {
        return Err(Error::Domain("the river model needs at least two observations".into()));
    }
    let target = model.log_posterior(x, data);
    let chain = run_chain(&*target, config)?;
    let mut summary = summarize_chain(&chain, &model.features())?;
    let (lo, hi) = ACCEPT_FLAG_BAND;
    if !(lo..=hi).contains(&summary.accept_rate) {
        log::warn!("acceptance {:.3} at x = {x:?} is outside [{lo}, {hi}]", summary.accept_rate);
        summary
            .warnings
            .push(format!("acceptance rate {:.3} outside [{lo}, {hi}]", summary.accept_rate));
    }
    Ok((summary, chain))
}

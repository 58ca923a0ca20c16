//! Gaussian-process emulators for noisy scalar outputs.
//!
//! Inputs are held on the `[-1, 1]` scale of the [`SpecSpace`]. The training
//! covariance is `sigma^2 [(1 - delta) c(x, x') + delta 1[x = x']]`; the
//! nugget only enters between observed runs, so predictions are for the
//! latent smooth function.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::space::SpecSpace;

pub const EMULATOR_FORMAT_VERSION: u32 = 1;
pub const TOY_LENGTH: f64 = 0.6;
/// Diagonal jitter ladder, as fractions of the emulator variance.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];
/// Relative tolerance below zero for a predictive variance before it is an error.
pub const VARIANCE_TOLERANCE: f64 = 1e-10;
pub const N_CANARIES: usize = 5;
pub const CANARY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Matérn smoothness, one of 0.5, 1.5, 2.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    pub variance: f64,
    pub lengths: Vec<f64>,
    pub nugget_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Se,
    M12,
    M32,
    M52,
}

impl KernelSpec {
    pub fn squared_exponential(variance: f64, lengths: Vec<f64>, nugget_fraction: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            smoothness: None,
            variance,
            lengths,
            nugget_fraction,
        }
    }

    pub fn matern(smoothness: f64, variance: f64, lengths: Vec<f64>, nugget_fraction: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Matern,
            smoothness: Some(smoothness),
            variance,
            lengths,
            nugget_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidKernel(format!("variance must be > 0, got {}", self.variance)));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidKernel(format!("lengths must be > 0, got {:?}", self.lengths)));
        }
        if !(0.0..1.0).contains(&self.nugget_fraction) {
            return Err(Error::InvalidKernel(format!(
                "nugget fraction must lie in [0, 1), got {}",
                self.nugget_fraction
            )));
        }
        Ok(())
    }

    fn shape(&self) -> Result<Shape> {
        match (self.family, self.smoothness) {
            (KernelFamily::SquaredExponential, _) => Ok(Shape::Se),
            (KernelFamily::Matern, Some(s)) if s == 0.5 => Ok(Shape::M12),
            (KernelFamily::Matern, Some(s)) if s == 1.5 => Ok(Shape::M32),
            (KernelFamily::Matern, Some(s)) if s == 2.5 => Ok(Shape::M52),
            (KernelFamily::Matern, s) => Err(Error::InvalidKernel(format!(
                "Matérn smoothness must be 0.5, 1.5 or 2.5, got {s:?}"
            ))),
        }
    }

    /// Correlation `c(x, x')` without variance or nugget.
    pub fn correlation(&self, x: &[f64], y: &[f64]) -> f64 {
        corr(self.shape().expect("validated kernel"), &self.lengths, x, y)
    }

    /// Covariance between two points on the scaled axes. `observed` adds the
    /// nugget when the points coincide.
    pub fn eval(&self, x: &[f64], y: &[f64], observed: bool) -> f64 {
        let latent = self.variance * (1.0 - self.nugget_fraction) * self.correlation(x, y);
        if observed && x == y {
            latent + self.variance * self.nugget_fraction
        } else {
            latent
        }
    }
}

fn corr(shape: Shape, lengths: &[f64], x: &[f64], y: &[f64]) -> f64 {
    match shape {
        Shape::Se => {
            let s: f64 = x.iter().zip(y).zip(lengths).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
            (-s).exp()
        }
        _ => x
            .iter()
            .zip(y)
            .zip(lengths)
            .map(|((a, b), l)| matern_1d(shape, (a - b).abs() / l))
            .product(),
    }
}

fn matern_1d(shape: Shape, r: f64) -> f64 {
    match shape {
        Shape::M12 => (-r).exp(),
        Shape::M32 => {
            let a = 3f64.sqrt() * r;
            (1.0 + a) * (-a).exp()
        }
        Shape::M52 => {
            let a = 5f64.sqrt() * r;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
        Shape::Se => (-r * r).exp(),
    }
}

/// `d c(x, x') / d x_dim`.
fn corr_grad(shape: Shape, lengths: &[f64], x: &[f64], y: &[f64], dim: usize) -> f64 {
    let u = x[dim] - y[dim];
    let l = lengths[dim];
    match shape {
        Shape::Se => -2.0 * u / (l * l) * corr(shape, lengths, x, y),
        Shape::M32 | Shape::M52 => {
            let r = u.abs() / l;
            let d1 = match shape {
                Shape::M32 => -3.0 * u / (l * l) * (-(3f64.sqrt()) * r).exp(),
                _ => {
                    let a = 5f64.sqrt() * r;
                    -(5.0 / 3.0) * u / (l * l) * (1.0 + a) * (-a).exp()
                }
            };
            let rest: f64 = (0..x.len())
                .filter(|&k| k != dim)
                .map(|k| matern_1d(shape, (x[k] - y[k]).abs() / lengths[k]))
                .product();
            d1 * rest
        }
        Shape::M12 => f64::NAN,
    }
}

/// `-d^2 c / d u^2` at `u = 0` for one dimension.
fn corr_curvature(shape: Shape, l: f64) -> f64 {
    match shape {
        Shape::Se => 2.0 / (l * l),
        Shape::M32 => 3.0 / (l * l),
        Shape::M52 => 5.0 / (3.0 * l * l),
        Shape::M12 => f64::NAN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFamily {
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub family: MeanFamily,
    pub coefficients: Vec<f64>,
    pub active_dims: Vec<usize>,
}

impl MeanSpec {
    pub fn basis(&self, x: &[f64]) -> Vec<f64> {
        basis(self.family, &self.active_dims, x)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.basis(x).iter().zip(&self.coefficients).map(|(h, b)| h * b).sum()
    }

    /// Gradient of the mean along scaled dimension `dim`.
    pub fn slope(&self, dim: usize) -> f64 {
        match self.family {
            MeanFamily::Constant => 0.0,
            MeanFamily::Linear => self
                .active_dims
                .iter()
                .position(|&a| a == dim)
                .map_or(0.0, |k| self.coefficients[k + 1]),
        }
    }
}

fn basis(family: MeanFamily, active: &[usize], x: &[f64]) -> Vec<f64> {
    let mut h = vec![1.0];
    if family == MeanFamily::Linear {
        h.extend(active.iter().map(|&a| x[a]));
    }
    h
}

/// How the regression mean is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanPolicy {
    Constant,
    /// Intercept plus a slope for each listed dimension (`None`: all).
    Linear { active_dims: Option<Vec<usize>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuggetPolicy {
    /// Deterministic outputs: `delta = 0`.
    Zero,
    /// Estimate `delta` with the other hyperparameters.
    Estimate,
    /// Fix the nugget variance at the mean Monte Carlo variance of the runs.
    FromMcVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FitPolicy {
    /// Constant mean `mean(y)`, variance `var(y)`, all lengths 0.6 and the
    /// nugget fraction `mean(mc_var) / var(y)`.
    FixedToy,
    /// Kernel given; mean coefficients by generalised least squares.
    Fixed { kernel: KernelSpec, mean: MeanPolicy },
    /// Maximum likelihood over lengths (and nugget), with `beta` and
    /// `sigma^2` profiled where possible.
    Mle {
        family: KernelFamily,
        smoothness: Option<f64>,
        mean: MeanPolicy,
        nugget: NuggetPolicy,
        restarts: usize,
        seed: u64,
    },
}

impl FitPolicy {
    /// Matérn 5/2, linear mean, estimated nugget.
    pub fn river_default(seed: u64) -> Self {
        FitPolicy::Mle {
            family: KernelFamily::Matern,
            smoothness: Some(2.5),
            mean: MeanPolicy::Linear { active_dims: None },
            nugget: NuggetPolicy::Estimate,
            restarts: 8,
            seed,
        }
    }

    pub fn mle_se(nugget: NuggetPolicy, seed: u64) -> Self {
        FitPolicy::Mle {
            family: KernelFamily::SquaredExponential,
            smoothness: None,
            mean: MeanPolicy::Constant,
            nugget,
            restarts: 8,
            seed,
        }
    }
}

/// Training data for one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub output_name: String,
    pub space: SpecSpace,
    /// Raw-scale design points.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mc_variance: Vec<f64>,
}

impl TrainingSet {
    pub fn new(output_name: impl Into<String>, space: SpecSpace, x: Vec<Vec<f64>>, y: Vec<f64>, mc_variance: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || y.len() != mc_variance.len() {
            return Err(Error::InvalidTraining(format!(
                "{} points, {} outputs, {} variances",
                x.len(),
                y.len(),
                mc_variance.len()
            )));
        }
        for p in &x {
            space.check_dim(p)?;
        }
        if y.iter().chain(&mc_variance).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTraining("non-finite output or variance".into()));
        }
        if mc_variance.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidTraining("negative Monte Carlo variance".into()));
        }
        Ok(TrainingSet {
            output_name: output_name.into(),
            space,
            x,
            y,
            mc_variance,
        })
    }

    /// Deterministic outputs (zero Monte Carlo variance).
    pub fn deterministic(output_name: impl Into<String>, space: SpecSpace, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        TrainingSet::new(output_name, space, x, y, vec![0.0; n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Jointly sampled emulator values: `values[j][i]` is sample `j` at point `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    pub x: Vec<f64>,
    pub mean: f64,
}

/// A fitted emulator. Immutable; all queries take `&self`.
#[derive(Debug, Clone)]
pub struct Emulator {
    output_name: String,
    kernel: KernelSpec,
    mean: MeanSpec,
    space: SpecSpace,
    design: Vec<Vec<f64>>,
    y: Vec<f64>,
    mc_variance: Vec<f64>,
    jitter: f64,
    shape: Shape,
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorFile {
    pub format_version: u32,
    pub output_name: String,
    pub kernel: KernelSpec,
    pub mean: MeanSpec,
    pub space: SpecSpace,
    /// Scaled design.
    pub design: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mc_variance: Vec<f64>,
    pub jitter: f64,
    pub canaries: Vec<Canary>,
}

fn cholesky_with_jitter(mut m: DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let mut added = 0.0;
    for &j in &JITTER_LADDER {
        let target = j * scale;
        for i in 0..n {
            m[(i, i)] += target - added;
        }
        added = target;
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok((c, target));
        }
    }
    Err(Error::SingularCovariance)
}

/// Diagonally pivoted Cholesky of a positive semi-definite matrix, stopped
/// once the largest remaining pivot falls below `tol`. Returns `L` (n x r,
/// rows in the original order) with `A ~ L L^T`, so exactly-known
/// directions carry no noise.
fn psd_cholesky(a: &DMatrix<f64>, tol: f64, fail_below: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if (0..n).any(|i| a[(i, i)] < -fail_below) {
        return Err(Error::SingularCovariance);
    }
    let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    // rows[i][k]: entry of row i in factor column k
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut rank = 0;
    for k in 0..n {
        let (jmax, dmax) = (k..n).map(|j| (j, d[perm[j]])).fold((k, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        if dmax <= tol {
            break;
        }
        perm.swap(k, jmax);
        let p = perm[k];
        let lpp = dmax.sqrt();
        let row_p = rows[p].clone();
        rows[p].push(lpp);
        for &i in &perm[k + 1..] {
            let dot: f64 = rows[i].iter().zip(&row_p).map(|(x, y)| x * y).sum();
            let v = (a[(i, p)] - dot) / lpp;
            rows[i].push(v);
            d[i] -= v * v;
        }
        d[p] = 0.0;
        rank += 1;
    }
    let mut l = DMatrix::zeros(n, rank);
    for (i, r) in rows.iter().enumerate() {
        for (k, v) in r.iter().enumerate() {
            l[(i, k)] = *v;
        }
    }
    Ok(l)
}

fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn mean_basis(policy: &MeanPolicy, dim: usize) -> (MeanFamily, Vec<usize>) {
    match policy {
        MeanPolicy::Constant => (MeanFamily::Constant, vec![]),
        MeanPolicy::Linear { active_dims } => (
            MeanFamily::Linear,
            active_dims.clone().unwrap_or_else(|| (0..dim).collect()),
        ),
    }
}

fn design_matrix(family: MeanFamily, active: &[usize], xs: &[Vec<f64>]) -> DMatrix<f64> {
    let p = basis(family, active, &xs[0]).len();
    DMatrix::from_fn(xs.len(), p, |i, k| basis(family, active, &xs[i])[k])
}

fn correlation_matrix(shape: Shape, lengths: &[f64], xs: &[Vec<f64>], delta: f64) -> DMatrix<f64> {
    let n = xs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0;
        for j in 0..i {
            let c = (1.0 - delta) * corr(shape, lengths, &xs[i], &xs[j]);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    m
}

/// Generalised least squares `beta` for covariance factor `chol`.
fn gls(chol: &Cholesky<f64, Dyn>, h: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let vh = chol.solve(h);
    let a = h.transpose() * &vh;
    let b = vh.transpose() * y;
    let ca = Cholesky::new(a).ok_or(Error::RankDeficientBasis)?;
    Ok(ca.solve(&b))
}

fn check_basis_rank(h: &DMatrix<f64>) -> Result<()> {
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.max();
    if sv.iter().any(|&s| s <= 1e-10 * max.max(1e-300)) {
        return Err(Error::RankDeficientBasis);
    }
    Ok(())
}

struct Likelihood<'a> {
    shape: Shape,
    xs: &'a [Vec<f64>],
    y: DVector<f64>,
    h: DMatrix<f64>,
}

impl Likelihood<'_> {
    /// Negative log likelihood. With `sigma2 = None` the variance is
    /// profiled out. Returns the profiled variance alongside.
    fn nll(&self, lengths: &[f64], delta: f64, sigma2: Option<f64>) -> Option<(f64, f64)> {
        let n = self.xs.len() as f64;
        let r = correlation_matrix(self.shape, lengths, self.xs, delta);
        let (chol, _) = cholesky_with_jitter(r, 1.0).ok()?;
        if chol.l_dirty().diagonal().iter().any(|d| d * d < MIN_PIVOT) {
            return None;
        }
        let beta = gls(&chol, &self.h, &self.y).ok()?;
        let resid = &self.y - &self.h * beta;
        let q = resid.dot(&chol.solve(&resid));
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let v = match sigma2 {
            Some(s) => return Some((0.5 * (n * s.ln() + log_det + q / s), s)),
            None => q / n,
        };
        if !(v > 0.0) {
            return None;
        }
        Some((0.5 * (n * v.ln() + log_det), v))
    }
}

/// Minimal Nelder–Mead simplex minimiser.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() < 1e-9 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best])
}

const LOG_LENGTH_BOUNDS: (f64, f64) = (-4.0, 3.5);
/// Smallest admissible squared Cholesky pivot of the correlation matrix
/// during MLE; keeps the fitted system well enough conditioned to interpolate.
const MIN_PIVOT: f64 = 1e-9;
const LOG_DELTA_BOUNDS: (f64, f64) = (-23.0, -0.1);

fn clamp(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.clamp(lo, hi)
}

/// Bound violation penalty so the simplex stays inside the box.
fn excess(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

fn fit_mle(
    ts: &TrainingSet,
    xs: &[Vec<f64>],
    family: KernelFamily,
    smoothness: Option<f64>,
    nugget: NuggetPolicy,
    h: DMatrix<f64>,
    restarts: usize,
    seed: u64,
) -> Result<KernelSpec> {
    let d = ts.space.dim();
    let probe = KernelSpec {
        family,
        smoothness,
        variance: 1.0,
        lengths: vec![1.0; d],
        nugget_fraction: 0.0,
    };
    let shape = probe.shape()?;
    let lik = Likelihood {
        shape,
        xs,
        y: DVector::from_vec(ts.y.clone()),
        h,
    };
    let tau2 = ts.mc_variance.iter().sum::<f64>() / ts.mc_variance.len() as f64;
    let nugget = if nugget == NuggetPolicy::FromMcVariance && tau2 <= 0.0 {
        NuggetPolicy::Zero
    } else {
        nugget
    };
    let y_var = sample_variance(&ts.y);
    let log_s2_bounds = ((y_var * 1e-6).ln(), (y_var * 1e3).ln());

    // parameters: log lengths, then log delta (Estimate) or log latent variance (FromMcVariance)
    let extra = usize::from(nugget != NuggetPolicy::Zero);
    let decode = |p: &[f64]| -> (Vec<f64>, f64, Option<f64>) {
        let lengths: Vec<f64> = p[..d].iter().map(|&v| clamp(v, LOG_LENGTH_BOUNDS).exp()).collect();
        match nugget {
            NuggetPolicy::Zero => (lengths, 0.0, None),
            NuggetPolicy::Estimate => (lengths, clamp(p[d], LOG_DELTA_BOUNDS).exp(), None),
            NuggetPolicy::FromMcVariance => {
                let s2 = clamp(p[d], log_s2_bounds).exp();
                (lengths, tau2 / (s2 + tau2), Some(s2 + tau2))
            }
        }
    };
    let objective = |p: &[f64]| -> f64 {
        let (lengths, delta, s2) = decode(p);
        let pen: f64 = p[..d].iter().map(|&v| excess(v, LOG_LENGTH_BOUNDS)).sum::<f64>()
            + match nugget {
                NuggetPolicy::Zero => 0.0,
                NuggetPolicy::Estimate => excess(p[d], LOG_DELTA_BOUNDS),
                NuggetPolicy::FromMcVariance => excess(p[d], log_s2_bounds),
            };
        match lik.nll(&lengths, delta, s2) {
            Some((v, _)) if v.is_finite() => v + 1e3 * pen,
            _ => 1e300,
        }
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let extra_start = |v: f64| -> Vec<f64> {
        match nugget {
            NuggetPolicy::Zero => vec![],
            NuggetPolicy::Estimate => vec![v],
            NuggetPolicy::FromMcVariance => vec![y_var.max(1e-300).ln()],
        }
    };
    for &ll in &[-1.2, -0.4, 0.3, 1.0] {
        let mut p = vec![ll; d];
        p.extend(extra_start(-4.6));
        starts.push(p);
    }
    let mut rng = seeded(seed);
    for _ in 0..restarts {
        let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..1.5)).collect();
        p.extend(extra_start(rng.random_range(-12.0..-1.0)));
        starts.push(p);
    }
    let mut scored: Vec<(f64, Vec<f64>)> = starts.into_iter().map(|p| (objective(&p), p)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (_, p) in scored.into_iter().take(3) {
        let (mut x, mut v) = nelder_mead(&objective, &p, 0.5, 400 * (d + extra));
        // restart once from the optimum to escape a collapsed simplex
        let (x2, v2) = nelder_mead(&objective, &x, 0.2, 200 * (d + extra));
        if v2 < v {
            x = x2;
            v = v2;
        }
        if best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((x, v));
        }
    }
    let (p, v) = best.expect("at least one start");
    if v >= 1e300 {
        return Err(Error::SingularCovariance);
    }
    let (lengths, delta, s2) = decode(&p);
    let variance = match s2 {
        Some(s) => s,
        None => lik.nll(&lengths, delta, None).ok_or(Error::SingularCovariance)?.1,
    };
    Ok(KernelSpec {
        family,
        smoothness,
        variance,
        lengths,
        nugget_fraction: delta,
    })
}

/// Fits an emulator to one output.
pub fn fit(ts: &TrainingSet, policy: &FitPolicy) -> Result<Emulator> {
    let d = ts.space.dim();
    let xs: Vec<Vec<f64>> = ts.x.iter().map(|p| ts.space.scale_to_unit_unchecked(p)).collect();
    let (family, active, fixed_kernel) = match policy {
        FitPolicy::FixedToy => (MeanFamily::Constant, vec![], None),
        FitPolicy::Fixed { kernel, mean } => {
            let (f, a) = mean_basis(mean, d);
            (f, a, Some(kernel.clone()))
        }
        FitPolicy::Mle { mean, .. } => {
            let (f, a) = mean_basis(mean, d);
            (f, a, None)
        }
    };
    if active.iter().any(|&a| a >= d) {
        return Err(Error::InvalidTraining(format!("active dims {active:?} exceed dimension {d}")));
    }
    let p = 1 + active.len();
    if ts.y.len() < p + 2 {
        return Err(Error::InvalidTraining(format!(
            "need at least {} runs for {p} mean coefficients, got {}",
            p + 2,
            ts.y.len()
        )));
    }
    let h = design_matrix(family, &active, &xs);
    check_basis_rank(&h)?;

    let kernel = match policy {
        FitPolicy::FixedToy => {
            let var = sample_variance(&ts.y);
            if !(var > 0.0) {
                return Err(Error::SingularCovariance);
            }
            let delta = ts.mc_variance.iter().sum::<f64>() / ts.mc_variance.len() as f64 / var;
            KernelSpec::squared_exponential(var, vec![TOY_LENGTH; d], delta)
        }
        FitPolicy::Fixed { .. } => fixed_kernel.expect("fixed kernel"),
        FitPolicy::Mle {
            family: kf,
            smoothness,
            nugget,
            restarts,
            seed,
            ..
        } => {
            if !(sample_variance(&ts.y) > 0.0) {
                return Err(Error::SingularCovariance);
            }
            fit_mle(ts, &xs, *kf, *smoothness, *nugget, h.clone(), *restarts, *seed)?
        }
    };
    if kernel.lengths.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: kernel.lengths.len(),
        });
    }
    kernel.validate()?;

    let v = covariance_matrix(&kernel, &xs)?;
    let (chol, jitter) = cholesky_with_jitter(v, kernel.variance)?;
    let y = DVector::from_vec(ts.y.clone());
    let coefficients = match policy {
        FitPolicy::FixedToy => vec![y.mean()],
        _ => gls(&chol, &h, &y)?.iter().copied().collect(),
    };
    let mean = MeanSpec {
        family,
        coefficients,
        active_dims: active,
    };
    Emulator::assemble(
        ts.output_name.clone(),
        kernel,
        mean,
        ts.space.clone(),
        xs,
        ts.y.clone(),
        ts.mc_variance.clone(),
        Some((chol, jitter)),
    )
}

fn covariance_matrix(kernel: &KernelSpec, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let shape = kernel.shape()?;
    let mut m = correlation_matrix(shape, &kernel.lengths, xs, kernel.nugget_fraction);
    m *= kernel.variance;
    Ok(m)
}

/// Leave-one-out standardized errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPoint {
    pub index: usize,
    pub y: f64,
    pub mean: f64,
    pub sd: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub output_name: String,
    pub points: Vec<LooPoint>,
    pub n_exceed: usize,
    pub fraction_exceed: f64,
}

impl LooReport {
    /// Diagnostics flag a poor emulator when more than 20% of the
    /// standardized errors exceed 2 in magnitude.
    pub fn fails(&self) -> bool {
        self.fraction_exceed > 0.2
    }
}

impl Emulator {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        output_name: String,
        kernel: KernelSpec,
        mean: MeanSpec,
        space: SpecSpace,
        design: Vec<Vec<f64>>,
        y: Vec<f64>,
        mc_variance: Vec<f64>,
        factor: Option<(Cholesky<f64, Dyn>, f64)>,
    ) -> Result<Self> {
        kernel.validate()?;
        let shape = kernel.shape()?;
        let (chol, jitter) = match factor {
            Some(f) => f,
            None => cholesky_with_jitter(covariance_matrix(&kernel, &design)?, kernel.variance)?,
        };
        let resid = DVector::from_iterator(y.len(), design.iter().zip(&y).map(|(x, v)| v - mean.eval(x)));
        let mut alpha = chol.solve(&resid);
        // Iterative refinement against the factored matrix.
        let mut v = covariance_matrix(&kernel, &design)?;
        for i in 0..v.nrows() {
            v[(i, i)] += jitter;
        }
        for _ in 0..2 {
            let r = &resid - &v * &alpha;
            alpha += chol.solve(&r);
        }
        let l = chol.l();
        Ok(Emulator {
            output_name,
            kernel,
            mean,
            space,
            design,
            y,
            mc_variance,
            jitter,
            shape,
            chol,
            l,
            alpha,
        })
    }

    pub fn output_name(&self) -> &str {
        &self.output_name
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mean_spec(&self) -> &MeanSpec {
        &self.mean
    }

    pub fn space(&self) -> &SpecSpace {
        &self.space
    }

    pub fn design_scaled(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn design_raw(&self) -> Vec<Vec<f64>> {
        self.design.iter().map(|u| self.space.scale_from_unit(u)).collect()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of the training covariance (including jitter).
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Training covariance `Var[f^(s)(x_D)]` without jitter.
    pub fn training_covariance(&self) -> DMatrix<f64> {
        covariance_matrix(&self.kernel, &self.design).expect("validated kernel")
    }

    fn latent_variance(&self) -> f64 {
        self.kernel.variance * (1.0 - self.kernel.nugget_fraction)
    }

    fn cross(&self, u: &[f64]) -> DVector<f64> {
        let s = self.latent_variance();
        DVector::from_iterator(
            self.design.len(),
            self.design.iter().map(|x| s * corr(self.shape, &self.kernel.lengths, u, x)),
        )
    }

    fn clamp_variance(&self, v: f64) -> Result<f64> {
        if v >= 0.0 {
            Ok(v)
        } else if v >= -VARIANCE_TOLERANCE * self.kernel.variance {
            Ok(0.0)
        } else {
            Err(Error::NegativeVariance(v))
        }
    }

    /// Posterior mean and variance of the latent output at raw-scale `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.space.check(x)?;
        self.predict_scaled(&self.space.scale_to_unit_unchecked(x))
    }

    /// As [`Emulator::predict`] but allows extrapolation outside the space.
    pub fn predict_extrapolate(&self, x: &[f64]) -> Result<Prediction> {
        self.space.check_dim(x)?;
        self.predict_scaled(&self.space.scale_to_unit_unchecked(x))
    }

    pub fn predict_scaled(&self, u: &[f64]) -> Result<Prediction> {
        let k = self.cross(u);
        let mean = self.mean.eval(u) + k.dot(&self.alpha);
        let w = self.l.solve_lower_triangular(&k).ok_or(Error::SingularCovariance)?;
        let variance = self.clamp_variance(self.latent_variance() - w.norm_squared())?;
        Ok(Prediction { mean, variance })
    }

    /// Posterior mean only, for Monte Carlo loops over many points.
    pub fn mean_scaled(&self, u: &[f64]) -> f64 {
        self.mean.eval(u) + self.cross(u).dot(&self.alpha)
    }

    /// Joint posterior mean vector and covariance matrix at raw-scale points.
    pub fn predict_joint(&self, xs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let us: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                self.space.check_dim(x)?;
                Ok(self.space.scale_to_unit_unchecked(x))
            })
            .collect::<Result<_>>()?;
        let m = us.len();
        let n = self.design.len();
        let s = self.latent_variance();
        let mut kx = DMatrix::zeros(n, m);
        for (j, u) in us.iter().enumerate() {
            kx.set_column(j, &self.cross(u));
        }
        let mean = DVector::from_iterator(m, us.iter().enumerate().map(|(j, u)| self.mean.eval(u) + kx.column(j).dot(&self.alpha)));
        let w = self.l.solve_lower_triangular(&kx).ok_or(Error::SingularCovariance)?;
        let mut cov = DMatrix::from_fn(m, m, |i, j| s * corr(self.shape, &self.kernel.lengths, &us[i], &us[j]));
        cov -= w.transpose() * &w;
        for i in 0..m {
            cov[(i, i)] = self.clamp_variance(cov[(i, i)])?;
        }
        Ok((mean, cov))
    }

    /// `n_s` joint draws of the latent output at raw-scale points.
    pub fn joint_sample(&self, xs: &[Vec<f64>], n_s: usize, seed: u64) -> Result<Realization> {
        if xs.is_empty() || n_s == 0 {
            return Err(Error::InvalidRegion("joint sampling needs at least one point and one sample".into()));
        }
        let (mean, cov) = self.predict_joint(xs)?;
        let scale = self.kernel.variance;
        let l = psd_cholesky(&cov, 1e-12 * scale, 1e-6 * scale)?;
        let m = xs.len();
        let mut rng = seeded(seed);
        let z = DMatrix::from_fn(l.ncols(), n_s, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draws = l * z;
        let values = (0..n_s)
            .map(|j| (0..m).map(|i| mean[i] + draws[(i, j)]).collect())
            .collect();
        Ok(Realization {
            points: xs.to_vec(),
            values,
        })
    }

    /// Posterior mean and variance of `df/dx_dim` in raw units.
    pub fn predict_derivative(&self, x: &[f64], dim: usize) -> Result<Prediction> {
        if self.shape == Shape::M12 {
            return Err(Error::UnsupportedKernel("Matérn 1/2 paths are not differentiable".into()));
        }
        self.space.check_dim(x)?;
        if dim >= self.space.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: dim + 1,
            });
        }
        let u = self.space.scale_to_unit_unchecked(x);
        let s = self.latent_variance();
        let dk = DVector::from_iterator(
            self.design.len(),
            self.design.iter().map(|xd| s * corr_grad(self.shape, &self.kernel.lengths, &u, xd, dim)),
        );
        let mean = self.mean.slope(dim) + dk.dot(&self.alpha);
        let w = self.l.solve_lower_triangular(&dk).ok_or(Error::SingularCovariance)?;
        let prior = s * corr_curvature(self.shape, self.kernel.lengths[dim]);
        let var = prior - w.norm_squared();
        let var = if var >= -VARIANCE_TOLERANCE * prior { var.max(0.0) } else { return Err(Error::NegativeVariance(var)) };
        let c = 2.0 / self.space.dims()[dim].width();
        Ok(Prediction {
            mean: mean * c,
            variance: var * c * c,
        })
    }

    /// Refit-free leave-one-out diagnostics, with the mean coefficients held
    /// at their fitted values.
    pub fn loo_diagnostics(&self) -> Result<LooReport> {
        let n = self.design.len();
        if n < 5 {
            return Err(Error::InvalidTraining(format!("need at least 5 runs, got {n}")));
        }
        let inv = self.chol.inverse();
        let points: Vec<LooPoint> = (0..n)
            .map(|i| {
                let q = inv[(i, i)];
                let a = self.alpha[i];
                LooPoint {
                    index: i,
                    y: self.y[i],
                    mean: self.y[i] - a / q,
                    sd: (1.0 / q).sqrt(),
                    std_error: a / q.sqrt(),
                }
            })
            .collect();
        let n_exceed = points.iter().filter(|p| p.std_error.abs() > 2.0).count();
        Ok(LooReport {
            output_name: self.output_name.clone(),
            points,
            n_exceed,
            fraction_exceed: n_exceed as f64 / n as f64,
        })
    }

    fn canary_points(&self) -> Vec<Vec<f64>> {
        let d = self.space.dim();
        // fixed interior points on the scaled axes
        (0..N_CANARIES)
            .map(|i| {
                (0..d)
                    .map(|k| {
                        let t = ((i + 1) as f64 * 0.618_033_988_75 + (k + 1) as f64 * 0.414_213_562_37).fract();
                        2.0 * t - 1.0
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_file(&self) -> EmulatorFile {
        EmulatorFile {
            format_version: EMULATOR_FORMAT_VERSION,
            output_name: self.output_name.clone(),
            kernel: self.kernel.clone(),
            mean: self.mean.clone(),
            space: self.space.clone(),
            design: self.design.clone(),
            y: self.y.clone(),
            mc_variance: self.mc_variance.clone(),
            jitter: self.jitter,
            canaries: self
                .canary_points()
                .into_iter()
                .map(|u| Canary {
                    mean: self.mean_scaled(&u),
                    x: u,
                })
                .collect(),
        }
    }

    /// Rebuilds the factorisation and checks the stored canary predictions.
    pub fn from_file(file: EmulatorFile) -> Result<Self> {
        if file.format_version != EMULATOR_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: file.format_version,
                expected: EMULATOR_FORMAT_VERSION,
            });
        }
        if file.design.len() != file.y.len() || file.y.len() != file.mc_variance.len() {
            return Err(Error::InvalidTraining("inconsistent design, y and variance lengths".into()));
        }
        let v = covariance_matrix(&file.kernel, &file.design)?;
        let mut m = v;
        for i in 0..m.nrows() {
            m[(i, i)] += file.jitter;
        }
        let chol = Cholesky::new(m).ok_or(Error::SingularCovariance)?;
        let em = Emulator::assemble(
            file.output_name.clone(),
            file.kernel,
            file.mean,
            file.space,
            file.design,
            file.y,
            file.mc_variance,
            Some((chol, file.jitter)),
        )?;
        let tol = CANARY_TOLERANCE * em.kernel.variance.sqrt();
        let max_diff = file
            .canaries
            .iter()
            .map(|c| (em.mean_scaled(&c.x) - c.mean).abs())
            .fold(0.0, f64::max);
        if file.canaries.len() != N_CANARIES || !(max_diff <= tol) {
            return Err(Error::ChecksumMismatch {
                output: file.output_name,
                max_diff,
            });
        }
        Ok(em)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Emulator::from_file(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Dim, DimKind};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn line(lo: f64, hi: f64) -> SpecSpace {
        SpecSpace::new(vec![Dim::new("x", lo, hi, DimKind::Likelihood)]).unwrap()
    }

    fn square() -> SpecSpace {
        SpecSpace::new(vec![
            Dim::new("a", -1.0, 1.0, DimKind::PriorHyper),
            Dim::new("b", -1.0, 1.0, DimKind::PriorHyper),
        ])
        .unwrap()
    }

    fn se(variance: f64, lengths: Vec<f64>, delta: f64) -> FitPolicy {
        FitPolicy::Fixed {
            kernel: KernelSpec::squared_exponential(variance, lengths, delta),
            mean: MeanPolicy::Constant,
        }
    }

    fn sine_training(n: usize) -> TrainingSet {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![50.0 * i as f64 / (n - 1) as f64]).collect();
        let y = xs.iter().map(|x| (2.0 * std::f64::consts::PI * x[0] / 50.0).sin()).collect();
        TrainingSet::deterministic("sine", line(0.0, 50.0), xs, y).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k = KernelSpec::squared_exponential(2.0, vec![1.0, 1.0], 0.25);
        assert_eq!(k.eval(&[0.1, 0.2], &[0.1, 0.2], true), 2.0);
        assert_eq!(k.eval(&[0.1, 0.2], &[0.1, 0.2], false), 1.5);
        let k0 = KernelSpec::squared_exponential(2.0, vec![1.0], 0.0);
        assert!((k0.eval(&[0.0], &[1.0], true) - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        let m = KernelSpec::matern(1.5, 1.0, vec![0.5], 0.0);
        let r = 3f64.sqrt() * 0.6;
        assert!((m.eval(&[0.0], &[0.3], false) - (1.0 + r) * (-r).exp()).abs() < 1e-15);
        assert!(KernelSpec::matern(1.0, 1.0, vec![1.0], 0.0).validate().is_err());
        assert!(KernelSpec::squared_exponential(1.0, vec![1.0], 1.0).validate().is_err());
        assert!(KernelSpec::squared_exponential(0.0, vec![1.0], 0.0).validate().is_err());
    }

    #[test]
    fn correlation_gradients_match_finite_differences() {
        let x = [0.3, -0.2];
        let y = [-0.1, 0.4];
        for shape in [Shape::Se, Shape::M32, Shape::M52] {
            for dim in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[dim] += h;
                xm[dim] -= h;
                let fd = (corr(shape, &[0.7, 0.5], &xp, &y) - corr(shape, &[0.7, 0.5], &xm, &y)) / (2.0 * h);
                let an = corr_grad(shape, &[0.7, 0.5], &x, &y, dim);
                assert!((fd - an).abs() < 1e-7, "{shape:?} {dim}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn curvature_matches_second_difference() {
        for shape in [Shape::Se, Shape::M32, Shape::M52] {
            let h = 1e-4;
            let c = |u: f64| corr(shape, &[0.8], &[u], &[0.0]);
            let fd = -(c(h) - 2.0 * c(0.0) + c(-h)) / (h * h);
            assert!((fd - corr_curvature(shape, 0.8)).abs() < 1e-3 * fd, "{shape:?}");
        }
    }

    #[test]
    fn deterministic_gp_interpolates() {
        let ts = sine_training(6);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.0)).unwrap();
        for (x, y) in ts.x.iter().zip(&ts.y) {
            let p = em.predict(x).unwrap();
            assert!((p.mean - y).abs() < 1e-6, "{p:?} vs {y}");
            assert!(p.variance < 1e-6 * 0.5);
        }
    }

    #[test]
    fn nugget_breaks_interpolation() {
        let ts = sine_training(6);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.2)).unwrap();
        let p = em.predict(&ts.x[1]).unwrap();
        assert!(p.variance > 0.0);
        assert!((p.mean - ts.y[1]).abs() > 1e-6);
    }

    #[test]
    fn cholesky_reconstructs_training_covariance() {
        let ts = sine_training(8);
        let em = fit(&ts, &se(0.5, vec![0.5], 0.05)).unwrap();
        let v = em.training_covariance();
        let l = em.cholesky_factor();
        let diff = (l * l.transpose() - &v).abs().max();
        assert!(diff <= 1e-8 * v.abs().max() + em.jitter());
    }

    #[test]
    fn mle_recovers_the_sine() {
        let ts = sine_training(6);
        let em = fit(&ts, &FitPolicy::mle_se(NuggetPolicy::Zero, 3)).unwrap();
        let worst = (0..200)
            .map(|i| {
                let x = 50.0 * i as f64 / 199.0;
                (em.predict(&[x]).unwrap().mean - (2.0 * std::f64::consts::PI * x / 50.0).sin()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.1, "max error {worst}, kernel {:?}", em.kernel());
    }

    #[test]
    fn constant_outputs_are_rejected() {
        let space = line(0.0, 1.0);
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let ts = TrainingSet::deterministic("c", space, xs, vec![2.0; 6]).unwrap();
        assert!(matches!(fit(&ts, &FitPolicy::FixedToy), Err(Error::SingularCovariance)));
        assert!(matches!(fit(&ts, &FitPolicy::mle_se(NuggetPolicy::Estimate, 1)), Err(Error::SingularCovariance)));
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        // second input constant across the design
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![-1.0 + i as f64 / 4.0, 0.5]).collect();
        let y = xs.iter().map(|x| x[0].sin()).collect();
        let ts = TrainingSet::deterministic("r", square(), xs, y).unwrap();
        let policy = FitPolicy::Fixed {
            kernel: KernelSpec::squared_exponential(1.0, vec![1.0, 1.0], 0.0),
            mean: MeanPolicy::Linear { active_dims: None },
        };
        assert!(matches!(fit(&ts, &policy), Err(Error::RankDeficientBasis)));
    }

    #[test]
    fn fixed_toy_policy_settings() {
        let space = SpecSpace::toy();
        let xs = space.lattice_design(&[7, 5]).unwrap().points;
        let y: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x[0] - x[1]).collect();
        let mc = vec![1e-4; y.len()];
        let ts = TrainingSet::new("f", space, xs, y.clone(), mc).unwrap();
        let em = fit(&ts, &FitPolicy::FixedToy).unwrap();
        let var = sample_variance(&y);
        assert_eq!(em.kernel().variance, var);
        assert_eq!(em.kernel().lengths, vec![0.6, 0.6]);
        assert!((em.kernel().nugget_fraction - 1e-4 / var).abs() < 1e-18);
        assert_eq!(em.mean_spec().coefficients, vec![y.iter().sum::<f64>() / y.len() as f64]);
    }

    /// Draws a GP sample path at `xs` (scaled coordinates).
    fn gp_draw(kernel: &KernelSpec, xs: &[Vec<f64>], seed: u64) -> Vec<f64> {
        let v = covariance_matrix(kernel, xs).unwrap();
        let (c, _) = cholesky_with_jitter(v, kernel.variance).unwrap();
        let mut rng = seeded(seed);
        let z = DVector::from_fn(xs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (c.l() * z).iter().copied().collect()
    }

    #[test]
    fn mle_recovers_lengths() {
        let space = square();
        let truth = KernelSpec::squared_exponential(1.0, vec![0.6, 1.2], 0.01);
        let mut ok = 0;
        for rep in 0..50 {
            let design = space.maximin_lhs(60, 5, 1000 + rep).unwrap().points;
            let scaled: Vec<Vec<f64>> = design.iter().map(|x| space.scale_to_unit_unchecked(x)).collect();
            let y = gp_draw(&truth, &scaled, rep);
            let ts = TrainingSet::deterministic("g", space.clone(), design, y).unwrap();
            let em = fit(&ts, &FitPolicy::mle_se(NuggetPolicy::Estimate, rep)).unwrap();
            let good = em
                .kernel()
                .lengths
                .iter()
                .zip(&truth.lengths)
                .all(|(l, t)| l / t < 2.0 && t / l < 2.0);
            ok += usize::from(good);
        }
        assert!(ok >= 45, "{ok}/50 within a factor 2");
    }

    #[test]
    fn loo_calibrated_on_self_simulated_data() {
        let space = square();
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.8, 0.8], 0.05);
        let mut total = 0.0;
        let reps = 40;
        for rep in 0..reps {
            let design = space.maximin_lhs(40, 3, 50 + rep).unwrap().points;
            let scaled: Vec<Vec<f64>> = design.iter().map(|x| space.scale_to_unit_unchecked(x)).collect();
            let y = gp_draw(&kernel, &scaled, 900 + rep);
            let ts = TrainingSet::deterministic("g", space.clone(), design, y).unwrap();
            let em = fit(
                &ts,
                &FitPolicy::Fixed {
                    kernel: kernel.clone(),
                    mean: MeanPolicy::Constant,
                },
            )
            .unwrap();
            total += em.loo_diagnostics().unwrap().fraction_exceed;
        }
        let avg = total / reps as f64;
        assert!(avg <= 0.10, "average exceedance {avg}");
    }

    #[test]
    fn loo_small_for_constant_plus_noise() {
        let space = line(0.0, 1.0);
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let mut rng = seeded(4);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let y: Vec<f64> = (0..20).map(|_| 5.0 + noise.sample(&mut rng)).collect();
        let ts = TrainingSet::new("c", space, xs, y, vec![1e-4; 20]).unwrap();
        let em = fit(&ts, &se(1e-4 / 0.9, vec![1.0], 0.9)).unwrap();
        let r = em.loo_diagnostics().unwrap();
        assert!(r.points.iter().all(|p| p.std_error.abs() < 3.5));
        assert!(!r.fails());
    }

    #[test]
    fn loo_fires_on_wrong_length() {
        let space = line(-1.0, 1.0);
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![-1.0 + 2.0 * i as f64 / 29.0]).collect();
        let y: Vec<f64> = xs.iter().map(|x| (8.0 * x[0]).sin()).collect();
        let ts = TrainingSet::deterministic("w", space, xs, y).unwrap();
        let good = fit(&ts, &se(0.5, vec![0.25], 1e-6)).unwrap();
        let bad = fit(&ts, &se(0.5, vec![2.5], 1e-6)).unwrap();
        assert!(!good.loo_diagnostics().unwrap().fails());
        assert!(bad.loo_diagnostics().unwrap().fails());
    }

    #[test]
    fn loo_matches_explicit_refit() {
        let ts = sine_training(9);
        let kernel = KernelSpec::squared_exponential(0.5, vec![0.6], 0.01);
        let em = fit(&ts, &FitPolicy::Fixed { kernel: kernel.clone(), mean: MeanPolicy::Constant }).unwrap();
        let beta = em.mean_spec().coefficients[0];
        let r = em.loo_diagnostics().unwrap();
        for i in [0, 4, 8] {
            let keep: Vec<usize> = (0..9).filter(|&j| j != i).collect();
            let xs: Vec<Vec<f64>> = keep.iter().map(|&j| em.design_scaled()[j].clone()).collect();
            let v = covariance_matrix(&kernel, &xs).unwrap();
            let c = Cholesky::new(v).unwrap();
            let k = DVector::from_iterator(8, xs.iter().map(|x| kernel.eval(&em.design_scaled()[i], x, false)));
            let resid = DVector::from_iterator(8, keep.iter().map(|&j| ts.y[j] - beta));
            let m = beta + k.dot(&c.solve(&resid));
            let var = 0.5 - k.dot(&c.solve(&k));
            assert!((r.points[i].mean - m).abs() < 1e-8);
            assert!((r.points[i].sd - var.sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn joint_sample_marginal_and_correlation() {
        let ts = sine_training(6);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.01)).unwrap();
        let x = vec![vec![23.0]];
        let p = em.predict(&x[0]).unwrap();
        let r = em.joint_sample(&x, 10_000, 5).unwrap();
        let m = r.values.iter().map(|v| v[0]).sum::<f64>() / 1e4;
        assert!((m - p.mean).abs() < 4.0 * (p.variance / 1e4).sqrt());

        let pts = vec![vec![23.0], vec![24.0]];
        let (_, cov) = em.predict_joint(&pts).unwrap();
        let rho = cov[(0, 1)] / (cov[(0, 0)] * cov[(1, 1)]).sqrt();
        let r = em.joint_sample(&pts, 10_000, 6).unwrap();
        let col = |i: usize| -> Vec<f64> { r.values.iter().map(|v| v[i]).collect() };
        let (a, b) = (col(0), col(1));
        let (ma, mb) = (a.iter().sum::<f64>() / 1e4, b.iter().sum::<f64>() / 1e4);
        let cab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let caa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let cbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((cab / (caa * cbb).sqrt() - rho).abs() < 0.05);
        assert_eq!(em.joint_sample(&pts, 10, 9).unwrap(), em.joint_sample(&pts, 10, 9).unwrap());
    }

    #[test]
    fn joint_sample_pins_design_points_without_nugget() {
        let ts = sine_training(6);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.0)).unwrap();
        let pts = vec![vec![5.0], ts.x[2].clone(), vec![33.0]];
        let r = em.joint_sample(&pts, 200, 1).unwrap();
        let first = r.values[0][1];
        assert!(r.values.iter().all(|v| (v[1] - first).abs() < 1e-6));
        assert!((first - ts.y[2]).abs() < 1e-6);
        assert!(r.values.iter().any(|v| (v[0] - r.values[0][0]).abs() > 1e-3));
    }

    #[test]
    fn joint_paths_are_smooth() {
        let ts = sine_training(6);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.05)).unwrap();
        let pts: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64 * 0.5]).collect();
        let r = em.joint_sample(&pts, 20, 3).unwrap();
        // for an SE path of scaled length 0.7 the second difference over a
        // step h (scaled 0.02) has sd about sqrt(12 s^2 / l^4) h^2
        let h = 0.02;
        let bound = 6.0 * (12.0 * 0.5 * 0.95f64).sqrt() / 0.7f64.powi(2) * h * h;
        for v in &r.values {
            for w in v.windows(3) {
                assert!((w[0] - 2.0 * w[1] + w[2]).abs() < bound);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let space = square();
        let design = space.maximin_lhs(25, 3, 8).unwrap().points;
        let y: Vec<f64> = design.iter().map(|x| (2.0 * x[0]).sin() + x[1] * x[1]).collect();
        let ts = TrainingSet::new("d", space.clone(), design, y, vec![1e-4; 25]).unwrap();
        for policy in [
            FitPolicy::Fixed {
                kernel: KernelSpec::squared_exponential(1.0, vec![0.7, 0.9], 0.001),
                mean: MeanPolicy::Linear { active_dims: None },
            },
            FitPolicy::Fixed {
                kernel: KernelSpec::matern(2.5, 1.0, vec![0.9, 1.1], 0.001),
                mean: MeanPolicy::Constant,
            },
            FitPolicy::Fixed {
                kernel: KernelSpec::matern(1.5, 1.0, vec![0.9, 1.1], 0.001),
                mean: MeanPolicy::Constant,
            },
        ] {
            let em = fit(&ts, &policy).unwrap();
            let x = [0.23, -0.41];
            for dim in 0..2 {
                // h = 1e-4 on the scaled axes is 5e-5 raw for this square
                let h = 0.5e-4;
                let mut xp = x;
                let mut xm = x;
                xp[dim] += h;
                xm[dim] -= h;
                let fd = (em.predict(&xp).unwrap().mean - em.predict(&xm).unwrap().mean) / (2.0 * h);
                let d = em.predict_derivative(&x, dim).unwrap();
                assert!(((d.mean - fd) / fd).abs() < 1e-4, "{:?} dim {dim}: {} vs {fd}", em.kernel().family, d.mean);
                assert!(d.variance > 0.0);
            }
        }
    }

    #[test]
    fn derivative_is_raw_scale_and_symmetric() {
        let space = line(0.0, 10.0);
        let xs: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 10.0 / 6.0]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 * x[0]).collect();
        let ts = TrainingSet::deterministic("lin", space.clone(), xs.clone(), y).unwrap();
        let em = fit(
            &ts,
            &FitPolicy::Fixed {
                kernel: KernelSpec::squared_exponential(1.0, vec![1.0], 0.0),
                mean: MeanPolicy::Linear { active_dims: None },
            },
        )
        .unwrap();
        assert!((em.predict_derivative(&[4.1], 0).unwrap().mean - 3.0).abs() < 1e-6);

        let ys: Vec<f64> = xs.iter().map(|x| (x[0] - 5.0).powi(2)).collect();
        let ts = TrainingSet::deterministic("sym", space, xs, ys).unwrap();
        let em = fit(&ts, &se(10.0, vec![0.8], 0.0)).unwrap();
        assert!(em.predict_derivative(&[5.0], 0).unwrap().mean.abs() < 1e-9);
    }

    #[test]
    fn matern_half_has_no_derivative() {
        let ts = sine_training(6);
        let em = fit(
            &ts,
            &FitPolicy::Fixed {
                kernel: KernelSpec::matern(0.5, 1.0, vec![0.5], 0.0),
                mean: MeanPolicy::Constant,
            },
        )
        .unwrap();
        assert!(matches!(em.predict_derivative(&[3.0], 0), Err(Error::UnsupportedKernel(_))));
    }

    #[test]
    fn adding_a_point_never_increases_variance() {
        let space = square();
        let design = space.maximin_lhs(20, 3, 1).unwrap().points;
        let y: Vec<f64> = design.iter().map(|x| x[0] + x[1].cos()).collect();
        let policy = se(1.0, vec![0.6, 0.6], 0.01);
        let ts = TrainingSet::deterministic("m", space.clone(), design[..19].to_vec(), y[..19].to_vec()).unwrap();
        let small = fit(&ts, &policy).unwrap();
        let ts = TrainingSet::deterministic("m", space, design, y).unwrap();
        let big = fit(&ts, &policy).unwrap();
        let mut rng = seeded(2);
        for _ in 0..500 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            assert!(big.predict(&x).unwrap().variance <= small.predict(&x).unwrap().variance + 1e-12);
        }
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let ts = sine_training(7);
        let em = fit(&ts, &se(0.5, vec![0.7], 0.02)).unwrap();
        let json = em.to_json().unwrap();
        let back = Emulator::from_json(&json).unwrap();
        for i in 0..100 {
            let x = [i as f64 * 0.5];
            let (a, b) = (em.predict(&x).unwrap(), back.predict(&x).unwrap());
            assert!((a.mean - b.mean).abs() < 1e-10 * 0.5f64.sqrt());
        }
        let mut file = em.to_file();
        file.y[3] += 0.1;
        assert!(matches!(Emulator::from_file(file), Err(Error::ChecksumMismatch { .. })));
        let mut file = em.to_file();
        file.format_version = 99;
        assert!(matches!(Emulator::from_file(file), Err(Error::FormatVersion { .. })));
    }

    #[test]
    fn matern_river_policy_fits() {
        let space = SpecSpace::river();
        let design = space.maximin_lhs(60, 3, 4).unwrap().points;
        let y: Vec<f64> = design.iter().map(|x| 0.5 * x[0] + 200.0 * x[4] * x[5]).collect();
        let ts = TrainingSet::deterministic("r", space, design.clone(), y.clone()).unwrap();
        let em = fit(&ts, &FitPolicy::river_default(1)).unwrap();
        assert_eq!(em.kernel().smoothness, Some(2.5));
        let p = em.predict(&design[10]).unwrap();
        assert!((p.mean - y[10]).abs() < 0.05 * sample_variance(&y).sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn posterior_variance_bounded_by_prior(a in -1.0f64..1.0, b in -1.0f64..1.0, delta in 0.0f64..0.5) {
            let space = square();
            let design = space.maximin_lhs(15, 2, 3).unwrap().points;
            let y: Vec<f64> = design.iter().map(|x| x[0] * x[1]).collect();
            let ts = TrainingSet::deterministic("p", space, design, y).unwrap();
            let em = fit(&ts, &se(2.0, vec![0.5, 0.9], delta)).unwrap();
            let p = em.predict(&[a, b]).unwrap();
            prop_assert!(p.variance >= 0.0);
            prop_assert!(p.variance <= 2.0 * (1.0 + 1e-10));
        }
    }
}

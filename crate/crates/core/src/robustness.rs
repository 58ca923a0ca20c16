//! Robustness queries answered through fitted emulators.
//!
//! Sobol indices and effect curves use the emulator posterior mean as a
//! plug-in for `f`. Extrema and decision probabilities use joint emulator
//! realizations over a region grid; outputs are sampled independently.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::error::{Error, Result};
use crate::gp::{Emulator, Prediction};
use crate::rng::{seeded, substream};
use crate::space::Region;

pub const DEFAULT_N_S: usize = 1000;
pub const SOBOL_BOOTSTRAP: usize = 100;
pub const MIN_SOBOL_N: usize = 1024;
pub const REPORT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Grid size for a region: 200 points along a line, 1000 over an area.
pub fn default_n_e(region: &Region) -> usize {
    match region {
        Region::Point { .. } => 1,
        Region::PointList { points } => points.len(),
        Region::Box { intervals } => match intervals.iter().filter(|iv| iv.hi > iv.lo).count() {
            0 => 1,
            1 => 200,
            _ => 1000,
        },
        Region::HalfEllipsoid { .. } => 1000,
    }
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    Data::new(xs.to_vec()).quantile(p)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let caa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let cbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if caa == 0.0 || cbb == 0.0 {
        return 0.0;
    }
    cab / (caa * cbb).sqrt()
}

fn find<'a>(ems: &'a [Emulator], output: &str) -> Result<&'a Emulator> {
    ems.iter()
        .find(|e| e.output_name() == output)
        .ok_or_else(|| Error::UnknownOutput(output.to_string()))
}

// ---------------------------------------------------------------------------
// local sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDerivative {
    pub input: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSensitivity {
    pub output: String,
    pub mean: f64,
    pub sd: f64,
    pub derivatives: Vec<InputDerivative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSensitivity {
    pub point: Vec<f64>,
    pub outputs: Vec<OutputSensitivity>,
}

impl LocalSensitivity {
    pub fn derivative(&self, output: &str, input: &str) -> Option<&InputDerivative> {
        self.outputs
            .iter()
            .find(|o| o.output == output)?
            .derivatives
            .iter()
            .find(|d| d.input == input)
    }
}

/// Emulated value and partial derivatives (raw units) of every output at `x`.
pub fn local_sensitivity(ems: &[Emulator], x: &[f64]) -> Result<LocalSensitivity> {
    let outputs = ems
        .iter()
        .map(|em| {
            let p = em.predict(x)?;
            let derivatives = em
                .space()
                .dims()
                .iter()
                .enumerate()
                .map(|(k, dim)| {
                    let d = em.predict_derivative(x, k)?;
                    Ok(InputDerivative {
                        input: dim.name.clone(),
                        mean: d.mean,
                        sd: d.sd(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(OutputSensitivity {
                output: em.output_name().to_string(),
                mean: p.mean,
                sd: p.sd(),
                derivatives,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LocalSensitivity {
        point: x.to_vec(),
        outputs,
    })
}

// ---------------------------------------------------------------------------
// region extrema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremaReport {
    pub output: String,
    /// Average over realizations of the region maximum.
    pub max_mean: f64,
    /// Average over realizations of the region minimum.
    pub min_mean: f64,
    pub maxima: Vec<f64>,
    pub minima: Vec<f64>,
    pub midpoint: Vec<f64>,
    pub midpoint_prediction: Prediction,
    pub n_e: usize,
    pub n_s: usize,
    pub seed: u64,
}

impl ExtremaReport {
    pub fn max_quantiles(&self) -> Vec<f64> {
        REPORT_QUANTILES.iter().map(|&p| quantile(&self.maxima, p)).collect()
    }

    pub fn min_quantiles(&self) -> Vec<f64> {
        REPORT_QUANTILES.iter().map(|&p| quantile(&self.minima, p)).collect()
    }

    /// Sample correlation between paired maxima and minima.
    pub fn max_min_correlation(&self) -> f64 {
        correlation(&self.maxima, &self.minima)
    }

    /// Monte Carlo standard errors of `(max_mean, min_mean)`.
    pub fn mc_se(&self) -> (f64, f64) {
        let se = |xs: &[f64]| {
            let m = mean(xs);
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64;
            (v / xs.len() as f64).sqrt()
        };
        (se(&self.maxima), se(&self.minima))
    }

    /// `j,M,m` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["j", "M", "m"])?;
        for (j, (mx, mn)) in self.maxima.iter().zip(&self.minima).enumerate() {
            w.serialize((j + 1, mx, mn))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8 csv"))
    }
}

/// Distribution of the maximum and minimum of one output over a region.
pub fn region_extrema(em: &Emulator, region: &Region, n_e: usize, n_s: usize, seed: u64) -> Result<ExtremaReport> {
    region.validate(em.space())?;
    let grid = region.grid(n_e, substream(seed, 0))?;
    let real = em.joint_sample(&grid, n_s, substream(seed, 1))?;
    let maxima: Vec<f64> = real.values.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let minima: Vec<f64> = real.values.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let midpoint = region.midpoint();
    let midpoint_prediction = em.predict(&midpoint)?;
    Ok(ExtremaReport {
        output: em.output_name().to_string(),
        max_mean: mean(&maxima),
        min_mean: mean(&minima),
        maxima,
        minima,
        midpoint,
        midpoint_prediction,
        n_e: grid.len(),
        n_s,
        seed,
    })
}

// ---------------------------------------------------------------------------
// variance-based sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolIndex {
    pub input: String,
    /// Percent of output variance.
    pub main: f64,
    pub main_se: f64,
    pub total: f64,
    pub total_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolOutput {
    pub output: String,
    pub indices: Vec<SobolIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolReport {
    pub outputs: Vec<SobolOutput>,
    pub n: usize,
    pub seed: u64,
    /// Indices are for the emulator mean, not integrated over emulator
    /// uncertainty.
    pub plug_in: bool,
}

impl SobolReport {
    pub fn get(&self, output: &str, input: &str) -> Option<&SobolIndex> {
        self.outputs
            .iter()
            .find(|o| o.output == output)?
            .indices
            .iter()
            .find(|i| i.input == input)
    }
}

/// Main and total effects (fractions, with bootstrap SE) for `f` over
/// independent `U(0, 1)^d` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolEstimate {
    pub main: Vec<f64>,
    pub main_se: Vec<f64>,
    pub total: Vec<f64>,
    pub total_se: Vec<f64>,
}

fn sobol_from_runs(fa: &[f64], fb: &[f64], fab: &[Vec<f64>], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let m = rows.iter().map(|&r| fa[r] + fb[r]).sum::<f64>() / (2.0 * n);
    let var = rows.iter().map(|&r| (fa[r] - m).powi(2) + (fb[r] - m).powi(2)).sum::<f64>() / (2.0 * n);
    let mut main = Vec::with_capacity(fab.len());
    let mut total = Vec::with_capacity(fab.len());
    for col in fab {
        let s: f64 = rows.iter().map(|&r| fb[r] * (col[r] - fa[r])).sum::<f64>() / n;
        let t: f64 = rows.iter().map(|&r| (fa[r] - col[r]).powi(2)).sum::<f64>() / (2.0 * n);
        if var > 0.0 {
            main.push(s / var);
            total.push(t / var);
        } else {
            main.push(0.0);
            total.push(0.0);
        }
    }
    (main, total)
}

/// Saltelli A/B/A_B^i design; main effects by Saltelli's estimator, total
/// effects by Jansen's.
pub fn sobol_estimate<F>(f: F, d: usize, n: usize, seed: u64) -> Result<SobolEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n < MIN_SOBOL_N {
        return Err(Error::InvalidConfig(format!("Sobol sample size {n} < {MIN_SOBOL_N}")));
    }
    let mut rng = seeded(seed);
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let fa: Vec<f64> = a.par_iter().map(|x| f(x)).collect();
    let fb: Vec<f64> = b.par_iter().map(|x| f(x)).collect();
    let fab: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..n)
                .into_par_iter()
                .map(|r| {
                    let mut x = a[r].clone();
                    x[i] = b[r][i];
                    f(&x)
                })
                .collect()
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let (main, total) = sobol_from_runs(&fa, &fb, &fab, &all);
    let boots: Vec<(Vec<f64>, Vec<f64>)> = (0..SOBOL_BOOTSTRAP)
        .into_par_iter()
        .map(|k| {
            let mut r = seeded(substream(seed, k as u64 + 1));
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            sobol_from_runs(&fa, &fb, &fab, &rows)
        })
        .collect();
    let sd = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| {
        let xs: Vec<f64> = boots.iter().map(pick).collect();
        let m = mean(&xs);
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let main_se = (0..d).map(|i| sd(&|b| b.0[i])).collect();
    let total_se = (0..d).map(|i| sd(&|b| b.1[i])).collect();
    Ok(SobolEstimate {
        main,
        main_se,
        total,
        total_se,
    })
}

/// Percent Sobol indices of each emulator's mean under uniform inputs over
/// its space.
pub fn sobol_indices(ems: &[Emulator], n: usize, seed: u64) -> Result<SobolReport> {
    let outputs = ems
        .iter()
        .enumerate()
        .map(|(k, em)| {
            let d = em.space().dim();
            let est = sobol_estimate(
                |u: &[f64]| {
                    let s: Vec<f64> = u.iter().map(|v| 2.0 * v - 1.0).collect();
                    em.mean_scaled(&s)
                },
                d,
                n,
                substream(seed, k as u64),
            )?;
            let indices = em
                .space()
                .dims()
                .iter()
                .enumerate()
                .map(|(i, dim)| SobolIndex {
                    input: dim.name.clone(),
                    main: 100.0 * est.main[i],
                    main_se: 100.0 * est.main_se[i],
                    total: 100.0 * est.total[i],
                    total_se: 100.0 * est.total_se[i],
                })
                .collect();
            Ok(SobolOutput {
                output: em.output_name().to_string(),
                indices,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SobolReport {
        outputs,
        n,
        seed,
        plug_in: true,
    })
}

// ---------------------------------------------------------------------------
// main and joint effects

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub output: String,
    pub input: String,
    /// Raw-scale values of the swept input.
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
}

impl EffectCurve {
    /// `grid,mean,q05,q95` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["grid", "mean", "q05", "q95"])?;
        for i in 0..self.grid.len() {
            w.serialize((self.grid[i], self.mean[i], self.q05[i], self.q95[i]))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8 csv"))
    }
}

fn uniform_scaled(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect()
}

fn input_index(em: &Emulator, input: &str) -> Result<usize> {
    em.space()
        .index_of(input)
        .ok_or_else(|| Error::UnknownInput(input.to_string()))
}

/// Average of the emulator mean with one input fixed at each grid value and
/// the others uniform, with the 5% and 95% points of that conditional spread.
pub fn main_effect_curve(em: &Emulator, input: &str, grid_size: usize, n: usize, seed: u64) -> Result<EffectCurve> {
    if grid_size < 5 {
        return Err(Error::InvalidConfig(format!("grid size {grid_size} < 5")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample per grid value".into()));
    }
    let k = input_index(em, input)?;
    let dim = &em.space().dims()[k];
    let samples = uniform_scaled(em.space().dim(), n, seed);
    let rows: Vec<(f64, f64, f64, f64)> = (0..grid_size)
        .into_par_iter()
        .map(|g| {
            let s = -1.0 + 2.0 * g as f64 / (grid_size - 1) as f64;
            let vals: Vec<f64> = samples
                .iter()
                .map(|u| {
                    let mut u = u.clone();
                    u[k] = s;
                    em.mean_scaled(&u)
                })
                .collect();
            let raw = dim.lower + (s + 1.0) * 0.5 * dim.width();
            (raw, mean(&vals), quantile(&vals, 0.05), quantile(&vals, 0.95))
        })
        .collect();
    Ok(EffectCurve {
        output: em.output_name().to_string(),
        input: input.to_string(),
        grid: rows.iter().map(|r| r.0).collect(),
        mean: rows.iter().map(|r| r.1).collect(),
        q05: rows.iter().map(|r| r.2).collect(),
        q95: rows.iter().map(|r| r.3).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEffect {
    pub output: String,
    pub inputs: (String, String),
    pub grid_a: Vec<f64>,
    pub grid_b: Vec<f64>,
    /// `values[i][j]` at `(grid_a[i], grid_b[j])`.
    pub values: Vec<Vec<f64>>,
}

/// Average emulator mean over a 2-d grid of two inputs, others uniform.
pub fn joint_effect_surface(
    em: &Emulator,
    inputs: (&str, &str),
    grid: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<JointEffect> {
    let (ka, kb) = (input_index(em, inputs.0)?, input_index(em, inputs.1)?);
    if ka == kb {
        return Err(Error::InvalidConfig("joint effects need two distinct inputs".into()));
    }
    if grid.0 < 2 || grid.1 < 2 || n == 0 {
        return Err(Error::InvalidConfig("joint effect grid needs at least 2 x 2 values and one sample".into()));
    }
    let samples = uniform_scaled(em.space().dim(), n, seed);
    let axis = |m: usize| -> Vec<f64> { (0..m).map(|i| -1.0 + 2.0 * i as f64 / (m - 1) as f64).collect() };
    let (sa, sb) = (axis(grid.0), axis(grid.1));
    let values: Vec<Vec<f64>> = sa
        .par_iter()
        .map(|&a| {
            sb.iter()
                .map(|&b| {
                    let vals: Vec<f64> = samples
                        .iter()
                        .map(|u| {
                            let mut u = u.clone();
                            u[ka] = a;
                            u[kb] = b;
                            em.mean_scaled(&u)
                        })
                        .collect();
                    mean(&vals)
                })
                .collect()
        })
        .collect();
    let to_raw = |k: usize, s: &[f64]| -> Vec<f64> {
        let d = &em.space().dims()[k];
        s.iter().map(|v| d.lower + (v + 1.0) * 0.5 * d.width()).collect()
    };
    Ok(JointEffect {
        output: em.output_name().to_string(),
        inputs: (inputs.0.to_string(), inputs.1.to_string()),
        grid_a: to_raw(ka, &sa),
        grid_b: to_raw(kb, &sb),
        values,
    })
}

// ---------------------------------------------------------------------------
// decision criteria

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub output: String,
    pub op: Comparison,
    pub threshold: f64,
}

impl Criterion {
    pub fn new(output: impl Into<String>, op: Comparison, threshold: f64) -> Self {
        Criterion {
            output: output.into(),
            op,
            threshold,
        }
    }

    pub fn holds(&self, v: f64) -> bool {
        match self.op {
            Comparison::Lt => v < self.threshold,
            Comparison::Gt => v > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    /// Fraction of realizations in which some region point meets every criterion.
    pub probability: f64,
    pub points: Vec<Vec<f64>>,
    /// Per-point probability that all criteria hold there.
    pub point_probability: Vec<f64>,
    pub n_s: usize,
    pub seed: u64,
    /// Outputs are sampled independently of one another.
    pub independent_outputs: bool,
}

pub fn decision_probability(
    ems: &[Emulator],
    region: &Region,
    criteria: &[Criterion],
    n_e: usize,
    n_s: usize,
    seed: u64,
) -> Result<DecisionReport> {
    if criteria.is_empty() {
        return Err(Error::InvalidConfig("no decision criteria given".into()));
    }
    for c in criteria {
        if !ems.iter().any(|e| e.output_name() == c.output) {
            return Err(Error::CriteriaUnknownOutput(c.output.clone()));
        }
    }
    let space = ems[0].space();
    region.validate(space)?;
    let grid = region.grid(n_e, substream(seed, 0))?;
    let mut outputs: Vec<&str> = criteria.iter().map(|c| c.output.as_str()).collect();
    outputs.sort_unstable();
    outputs.dedup();
    let mut draws: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (k, name) in outputs.iter().enumerate() {
        let em = find(ems, name)?;
        draws.insert(name, em.joint_sample(&grid, n_s, substream(seed, 1 + k as u64))?.values);
    }
    let m = grid.len();
    let mut hits = 0usize;
    let mut per_point = vec![0usize; m];
    for j in 0..n_s {
        let mut any = false;
        for (i, count) in per_point.iter_mut().enumerate() {
            if criteria.iter().all(|c| c.holds(draws[c.output.as_str()][j][i])) {
                *count += 1;
                any = true;
            }
        }
        hits += usize::from(any);
    }
    Ok(DecisionReport {
        probability: hits as f64 / n_s as f64,
        points: grid,
        point_probability: per_point.iter().map(|&c| c as f64 / n_s as f64).collect(),
        n_s,
        seed,
        independent_outputs: true,
    })
}

//! Design, run, fit and report over a [`RunStore`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit, Emulator, FitPolicy, LooReport, TrainingSet};
use crate::mcmc::McmcConfig;
use crate::rng::substream;
use crate::robustness::{main_effect_curve, sobol_indices};
use crate::space::Design;
use crate::store::{run_id, RunStore};
use crate::targets::{evaluate_target_with_chain, Dataset, Model, RIVER_ANCHOR};

pub const TOY_LATTICE: [usize; 2] = [5, 7];
pub const RIVER_LHS_POINTS: usize = 99;
pub const RIVER_LHS_RESTARTS: usize = 100;

/// Toy: 5 x 7 lattice (nu x eps). River: 99-point maximin LHS plus the conjugate anchor.
pub fn default_design(model: Model, seed: u64) -> Result<Design> {
    match model {
        Model::Toy => model.space().lattice_design(&TOY_LATTICE),
        Model::River => {
            let mut d = model.space().maximin_lhs(RIVER_LHS_POINTS, RIVER_LHS_RESTARTS, seed)?;
            d.push_manual(RIVER_ANCHOR.to_vec())?;
            Ok(d)
        }
    }
}

pub fn default_policy(model: Model, seed: u64) -> FitPolicy {
    match model {
        Model::Toy => FitPolicy::FixedToy,
        Model::River => FitPolicy::river_default(seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Sampler length; `None` uses the model default.
    pub n_steps: Option<usize>,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub parallel: usize,
    pub keep_draws: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            n_steps: None,
            seed: 42,
            parallel: 0,
            keep_draws: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub new_ids: Vec<String>,
    pub skipped: usize,
    pub flagged: Vec<String>,
}

/// Sampler configuration for design row `i`.
pub fn point_config(model: Model, x: &[f64], data: &Dataset, i: usize, opts: &RunOptions) -> McmcConfig {
    model.default_config(x, data, opts.n_steps, substream(opts.seed, i as u64))
}

/// Evaluates every design point without a stored run, in parallel, and
/// saves the results in design order.
pub fn run_pending(store: &mut RunStore, data: &Dataset, opts: &RunOptions) -> Result<RunOutcome> {
    let model = store
        .model()
        .ok_or_else(|| Error::InvalidConfig("store has no model".into()))?;
    let design = store.load_design()?;
    let names: Vec<String> = model.features().into_iter().map(|f| f.name).collect();
    let mut pending = Vec::new();
    let mut skipped = 0;
    for (i, x) in design.points.iter().enumerate() {
        let cfg = point_config(model, x, data, i, opts);
        if store.has_run(&run_id(x, &cfg, &names)?) {
            skipped += 1;
        } else {
            pending.push((x.clone(), cfg));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let results: Vec<_> = pool.install(|| {
        pending
            .par_iter()
            .map(|(x, cfg)| evaluate_target_with_chain(model, x, data, cfg))
            .collect()
    });
    let mut new_ids = Vec::new();
    let mut flagged = Vec::new();
    for ((x, cfg), res) in pending.iter().zip(results) {
        let (summary, chain) = res?;
        let id = store.save_run(x, cfg, &summary, opts.keep_draws.then_some(&chain))?;
        if !summary.warnings.is_empty() {
            flagged.push(id.clone());
        }
        new_ids.push(id);
    }
    Ok(RunOutcome {
        new_ids,
        skipped,
        flagged,
    })
}

/// One training set per output, from the latest stored run at each design
/// point.
pub fn training_sets(store: &RunStore) -> Result<Vec<TrainingSet>> {
    let design = store.load_design()?;
    let runs = store.load_runs()?;
    let mut chosen = Vec::new();
    for x in &design.points {
        let run = runs
            .iter()
            .rev()
            .find(|r| &r.x == x)
            .ok_or_else(|| Error::InvalidTraining(format!("no run stored for design point {x:?}")))?;
        chosen.push(run);
    }
    let names = chosen
        .first()
        .map(|r| r.summary.names.clone())
        .ok_or_else(|| Error::InvalidTraining("empty design".into()))?;
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            TrainingSet::new(
                name.clone(),
                store.space().clone(),
                chosen.iter().map(|r| r.x.clone()).collect(),
                chosen.iter().map(|r| r.summary.features[k]).collect(),
                chosen.iter().map(|r| r.summary.mc_variance[k]).collect(),
            )
        })
        .collect()
}

/// Fits each output independently (in parallel).
pub fn fit_emulators(sets: &[TrainingSet], policy: &FitPolicy) -> Result<Vec<Emulator>> {
    sets.par_iter().map(|ts| fit(ts, policy)).collect()
}

pub fn fit_store(store: &mut RunStore, policy: &FitPolicy) -> Result<Vec<Emulator>> {
    let sets = training_sets(store)?;
    let d = store.space().dim();
    if sets[0].y.len() < 10 * d {
        log::warn!("{} runs for {d} inputs is below the 10-per-input rule of thumb", sets[0].y.len());
    }
    let ems = fit_emulators(&sets, policy)?;
    for em in &ems {
        store.export_emulator(em)?;
    }
    Ok(ems)
}

pub fn diagnostics(ems: &[Emulator]) -> Result<Vec<LooReport>> {
    ems.iter().map(Emulator::loo_diagnostics).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub sobol_n: usize,
    pub curve_grid: usize,
    pub curve_n: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            sobol_n: 1 << 13,
            curve_grid: 21,
            curve_n: 500,
            seed: 7,
        }
    }
}

/// Writes `sensitivity.json`, `diagnostics.json` and one
/// `effect_<output>_<input>` JSON/CSV pair per output-input combination.
pub fn write_reports(store: &mut RunStore, ems: &[Emulator], opts: &AnalysisOptions) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let sobol = sobol_indices(ems, opts.sobol_n, opts.seed)?;
    store.save_report_json("sensitivity", &sobol)?;
    written.push("sensitivity".to_string());
    store.save_report_json("diagnostics", &diagnostics(ems)?)?;
    written.push("diagnostics".to_string());
    let names: Vec<String> = store.space().names().iter().map(|s| s.to_string()).collect();
    for (k, em) in ems.iter().enumerate() {
        for (i, input) in names.iter().enumerate() {
            let seed = substream(opts.seed, (1000 * (k + 1) + i) as u64);
            let curve = main_effect_curve(em, input, opts.curve_grid, opts.curve_n, seed)?;
            let name = format!("effect_{}_{}", em.output_name(), input);
            store.save_report_json(&name, &curve)?;
            store.save_report_csv(&name, &curve.to_csv()?)?;
            written.push(name);
        }
    }
    Ok(written)
}

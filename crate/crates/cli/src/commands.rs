use std::collections::BTreeMap;
use std::path::PathBuf;

use bayes_emu::gp::{FitPolicy, NuggetPolicy};
use bayes_emu::pipeline::{self, AnalysisOptions, RunOptions, RIVER_LHS_RESTARTS};
use bayes_emu::service::{self, ApiError, PredictRequest, RobustRequest, ServiceState};
use bayes_emu::store::{ingest_timeseries_csv, RunStore};
use bayes_emu::targets::{Dataset, Model};
use bayes_emu::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::http;

/// Exit status when leave-one-out diagnostics fail.
pub const EXIT_DIAGNOSTICS: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bayes-emu", version, about = "Emulate MCMC analyses and query their robustness")]
pub struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Toy,
    River,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Model {
        match m {
            ModelArg::Toy => Model::Toy,
            ModelArg::River => Model::River,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    /// Toy policy for the toy model, Matern 5/2 MLE otherwise.
    Default,
    FixedToy,
    /// Matern 5/2 with linear mean and estimated nugget.
    Mle,
    /// Squared exponential with estimated nugget.
    MleSe,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a store with a design and a dataset.
    Design {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Grid levels per input, e.g. `7x5`.
        #[arg(long, conflicts_with = "lhs")]
        lattice: Option<String>,
        /// Maximin Latin hypercube with this many points.
        #[arg(long)]
        lhs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flow series (CSV or tab-separated RDB); river model only.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate design points that have no stored run.
    Run {
        #[arg(long)]
        store: PathBuf,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        keep_draws: bool,
    },
    /// Fit one emulator per output.
    Fit {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Leave-one-out diagnostics; exits with status 3 if any output fails.
    Diagnose {
        #[arg(long)]
        store: PathBuf,
    },
    /// Sobol indices and main-effect curves, written to the store's reports.
    Sa {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8192)]
        n: usize,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Region extrema and decision probabilities for a JSON request.
    Robust {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        request: PathBuf,
    },
    /// Emulator prediction at one point, e.g. `--x nu=1 --x eps=0.2`.
    Predict {
        #[arg(long)]
        store: PathBuf,
        #[arg(long = "x", value_parser = parse_assignment)]
        x: Vec<(String, f64)>,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_levels(s: &str) -> Result<Vec<usize>, ApiError> {
    s.split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::BadLevels(format!("`{s}` is not of the form 7x5")).into())
}

fn print<T: Serialize>(v: &T) -> Result<(), ApiError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| ApiError::new(500, "Internal", e.to_string(), None))?;
    println!("{s}");
    Ok(())
}

fn policy(arg: PolicyArg, model: Option<Model>, seed: u64) -> FitPolicy {
    match arg {
        PolicyArg::Default => pipeline::default_policy(model.unwrap_or(Model::River), seed),
        PolicyArg::FixedToy => FitPolicy::FixedToy,
        PolicyArg::Mle => FitPolicy::river_default(seed),
        PolicyArg::MleSe => FitPolicy::mle_se(NuggetPolicy::Estimate, seed),
    }
}

/// Executes a command and returns the process exit status.
pub fn execute(cmd: Command) -> Result<i32, ApiError> {
    match cmd {
        Command::Design {
            store,
            model,
            lattice,
            lhs,
            seed,
            data,
        } => {
            let model = Model::from(model);
            let space = model.space();
            let design = match (lattice, lhs) {
                (Some(l), _) => space.lattice_design(&parse_levels(&l)?)?,
                (None, Some(n)) => space.maximin_lhs(n, RIVER_LHS_RESTARTS, seed)?,
                (None, None) => pipeline::default_design(model, seed)?,
            };
            let data = match (model, data) {
                (_, Some(p)) => ingest_timeseries_csv(p)?,
                (Model::Toy, None) => Dataset::toy(),
                (Model::River, None) => Dataset::synthetic_normal(60, 1000.0, 300.0, seed),
            };
            let mut st = RunStore::create(&store, Some(model), space)?;
            st.save_design(&design)?;
            st.save_dataset(&data)?;
            eprintln!("created {} with {} design points", store.display(), design.len());
            Ok(0)
        }
        Command::Run {
            store,
            parallel,
            seed,
            steps,
            keep_draws,
        } => {
            let mut st = RunStore::open_writer(&store)?;
            let data = st.load_dataset()?;
            let opts = RunOptions {
                n_steps: steps,
                seed,
                parallel,
                keep_draws,
            };
            let out = pipeline::run_pending(&mut st, &data, &opts)?;
            for id in &out.flagged {
                log::warn!("run {id} has sampler warnings");
            }
            print(&out)?;
            Ok(0)
        }
        Command::Fit { store, policy: p, seed } => {
            let mut st = RunStore::open_writer(&store)?;
            let pol = policy(p, st.model(), seed);
            let ems = pipeline::fit_store(&mut st, &pol)?;
            let summary: Vec<_> = ems
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "output": e.output_name(),
                        "kernel": e.kernel(),
                        "mean": e.mean_spec(),
                    })
                })
                .collect();
            print(&summary)?;
            Ok(0)
        }
        Command::Diagnose { store } => {
            let st = RunStore::open(&store)?;
            let reports = pipeline::diagnostics(&st.import_emulators()?)?;
            let mut failed = false;
            for r in &reports {
                eprintln!(
                    "{}: {}/{} standardized errors exceed 2 ({:.1}%){}",
                    r.output_name,
                    r.n_exceed,
                    r.points.len(),
                    100.0 * r.fraction_exceed,
                    if r.fails() { "  FAIL" } else { "" }
                );
                failed |= r.fails();
            }
            print(&reports)?;
            Ok(if failed { EXIT_DIAGNOSTICS } else { 0 })
        }
        Command::Sa { store, n, grid, seed } => {
            let mut st = RunStore::open_writer(&store)?;
            let ems = st.import_emulators()?;
            let opts = AnalysisOptions {
                sobol_n: n,
                curve_grid: grid,
                seed,
                ..AnalysisOptions::default()
            };
            pipeline::write_reports(&mut st, &ems, &opts)?;
            let report: bayes_emu::robustness::SobolReport = st.load_report_json("sensitivity")?;
            for o in &report.outputs {
                eprintln!("{}", o.output);
                for i in &o.indices {
                    eprintln!(
                        "  {:<8} main {:6.2} +- {:4.2}  total {:6.2} +- {:4.2}",
                        i.input, i.main, i.main_se, i.total, i.total_se
                    );
                }
            }
            print(&report)?;
            Ok(0)
        }
        Command::Robust { store, request } => {
            let state = ServiceState::from_store(&RunStore::open(&store)?)?;
            let text = std::fs::read_to_string(&request).map_err(Error::from)?;
            let req: RobustRequest =
                serde_json::from_str(&text).map_err(|e| ApiError::new(400, "InvalidRequest", e.to_string(), None))?;
            print(&service::handle_robust(&state, &req)?)?;
            Ok(0)
        }
        Command::Predict { store, x } => {
            let st = RunStore::open(&store)?;
            let state = ServiceState {
                model: st.model(),
                space: st.space().clone(),
                emulators: st.import_emulators()?,
                sensitivity: None,
            };
            let req = PredictRequest {
                x: x.into_iter().collect::<BTreeMap<_, _>>(),
                outputs: None,
            };
            print(&service::handle_predict(&state, &req)?)?;
            Ok(0)
        }
        Command::Serve { store, port } => {
            let app = http::AppState::from_store(store)?;
            let rt = tokio::runtime::Runtime::new().map_err(Error::from)?;
            rt.block_on(http::serve(app, port)).map_err(Error::from)?;
            Ok(0)
        }
    }
}

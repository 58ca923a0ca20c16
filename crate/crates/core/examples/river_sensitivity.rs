//! River-flow robustness: 100 runs over the six-dimensional specification
//! space, Matern 5/2 emulators, variance-based indices and effect curves.
//! Optional first argument: steps per chain (default 20000).

use bayes_emu::pipeline::{default_design, default_policy, diagnostics, fit_store, run_pending, RunOptions};
use bayes_emu::robustness::{joint_effect_surface, main_effect_curve, sobol_indices};
use bayes_emu::store::RunStore;
use bayes_emu::targets::{Dataset, Model};

fn main() -> bayes_emu::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let dir = std::env::temp_dir().join(format!("bayes-emu-river-{}", std::process::id()));
    let mut store = RunStore::create(&dir, Some(Model::River), Model::River.space())?;
    store.save_design(&default_design(Model::River, 1)?)?;
    let data = Dataset::synthetic_normal(60, 1000.0, 300.0, 1);
    store.save_dataset(&data)?;

    let t = std::time::Instant::now();
    let opts = RunOptions {
        n_steps: Some(steps),
        seed: 1,
        ..RunOptions::default()
    };
    let out = run_pending(&mut store, &data, &opts)?;
    println!("{} chains of {steps} steps in {:.1}s", out.new_ids.len(), t.elapsed().as_secs_f64());
    let ems = fit_store(&mut store, &default_policy(Model::River, 1))?;
    for r in diagnostics(&ems)? {
        println!("{:<12} LOO exceedances {}/{}", r.output_name, r.n_exceed, r.points.len());
    }

    let sobol = sobol_indices(&ems, 1 << 13, 2)?;
    for o in &sobol.outputs {
        println!("{}", o.output);
        for i in &o.indices {
            println!("  {:<6} main {:6.2}%  total {:6.2}%", i.input, i.main, i.total);
        }
    }

    let curve = main_effect_curve(&ems[0], "mu0", 7, 500, 3)?;
    for k in 0..curve.grid.len() {
        println!("mu0={:7.1}  E(mu|z) {:8.2} [{:8.2}, {:8.2}]", curve.grid[k], curve.mean[k], curve.q05[k], curve.q95[k]);
    }
    let joint = joint_effect_surface(&ems[0], ("mu0", "n0"), (3, 3), 300, 4)?;
    println!("joint mu0 x n0 corners: {:.1} {:.1} {:.1} {:.1}", joint.values[0][0], joint.values[0][2], joint.values[2][0], joint.values[2][2]);

    drop(store);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

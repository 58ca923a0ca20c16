//! Toy robustness study: run the 35-point design, emulate the posterior mean
//! and SD, then answer the four expert cases.

use bayes_emu::gp::FitPolicy;
use bayes_emu::pipeline::{default_design, fit_store, run_pending, RunOptions};
use bayes_emu::robustness::{decision_probability, default_n_e, local_sensitivity, region_extrema, Comparison, Criterion, DEFAULT_N_S};
use bayes_emu::store::RunStore;
use bayes_emu::targets::{toy_case_region, Dataset, Model};

fn main() -> bayes_emu::Result<()> {
    let dir = std::env::temp_dir().join(format!("bayes-emu-toy-{}", std::process::id()));
    let mut store = RunStore::create(&dir, Some(Model::Toy), Model::Toy.space())?;
    store.save_design(&default_design(Model::Toy, 0)?)?;
    let data = Dataset::toy();
    store.save_dataset(&data)?;
    let out = run_pending(&mut store, &data, &RunOptions::default())?;
    println!("{} runs ({} flagged)", out.new_ids.len(), out.flagged.len());
    let ems = fit_store(&mut store, &FitPolicy::FixedToy)?;

    let local = local_sensitivity(&ems, &[1.5, 0.5])?;
    for o in &local.outputs {
        let d: Vec<String> = o.derivatives.iter().map(|d| format!("d/d{} {:+.4} (sd {:.4})", d.input, d.mean, d.sd)).collect();
        println!("case 1 {}: {:.4} +- {:.4}; {}", o.output, o.mean, o.sd, d.join(", "));
    }

    let criteria = [
        Criterion::new("mean_theta", Comparison::Lt, 2.6),
        Criterion::new("sd_theta", Comparison::Lt, 0.47),
    ];
    for case in 1..=4 {
        let region = toy_case_region(case).expect("case");
        let n_e = default_n_e(&region);
        for (k, em) in ems.iter().enumerate() {
            let r = region_extrema(em, &region, n_e, DEFAULT_N_S, 10 + k as u64)?;
            println!(
                "case {case} {:<10} M {:.4} m {:.4} midpoint {:.4} corr(M, m) {:+.2}",
                r.output,
                r.max_mean,
                r.min_mean,
                r.midpoint_prediction.mean,
                r.max_min_correlation()
            );
        }
        let p = decision_probability(&ems, &region, &criteria, n_e, DEFAULT_N_S, 20)?;
        println!("case {case} P(f1 < 2.6 and f2 < 0.47) = {:.3}", p.probability);
    }
    drop(store);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

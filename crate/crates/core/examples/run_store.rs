//! Persisting designs, runs, emulators and reports; resuming interrupted work.

use bayes_emu::gp::FitPolicy;
use bayes_emu::pipeline::{fit_store, run_pending, write_reports, AnalysisOptions, RunOptions};
use bayes_emu::store::RunStore;
use bayes_emu::targets::{Dataset, Model};

fn main() -> bayes_emu::Result<()> {
    let dir = std::env::temp_dir().join(format!("bayes-emu-store-{}", std::process::id()));
    let model = Model::Toy;
    {
        let mut store = RunStore::create(&dir, Some(model), model.space())?;
        store.save_design(&model.space().lattice_design(&[4, 3])?)?;
        store.save_dataset(&Dataset::toy())?;
    }

    let opts = RunOptions {
        n_steps: Some(20_000),
        keep_draws: true,
        ..RunOptions::default()
    };
    let mut store = RunStore::open_writer(&dir)?;
    let data = store.load_dataset()?;
    let first = run_pending(&mut store, &data, &opts)?;
    let again = run_pending(&mut store, &data, &opts)?;
    println!("first pass {} runs, second pass {} new / {} skipped", first.new_ids.len(), again.new_ids.len(), again.skipped);

    let run = store.load_run(&first.new_ids[0])?;
    println!("run {} at {:?}: {:?}", run.id, run.x, run.summary.features);

    let ems = fit_store(&mut store, &FitPolicy::FixedToy)?;
    let written = write_reports(
        &mut store,
        &ems,
        &AnalysisOptions {
            sobol_n: 2048,
            ..AnalysisOptions::default()
        },
    )?;
    println!("reports: {}", written.join(", "));
    drop(store);

    let reader = RunStore::open(&dir)?;
    println!("manifest lists {} runs and {} emulators", reader.manifest().runs.len(), reader.manifest().emulators.len());
    let em = reader.import_emulator("mean_theta")?;
    println!("reloaded mean_theta at (1, 0): {:.4}", em.predict(&[1.0, 0.0])?.mean);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

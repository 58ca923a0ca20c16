//! The JSON query layer used by the HTTP service, called in-process.

use bayes_emu::gp::FitPolicy;
use bayes_emu::pipeline::{default_design, fit_store, run_pending, RunOptions};
use bayes_emu::service::{handle_effects, handle_outputs, handle_predict, handle_robust, EffectQuery, ServiceState};
use bayes_emu::store::RunStore;
use bayes_emu::targets::{Dataset, Model};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("bayes-emu-service-{}", std::process::id()));
    {
        let mut store = RunStore::create(&dir, Some(Model::Toy), Model::Toy.space())?;
        store.save_design(&default_design(Model::Toy, 0)?)?;
        let data = Dataset::toy();
        store.save_dataset(&data)?;
        let opts = RunOptions {
            n_steps: Some(50_000),
            ..RunOptions::default()
        };
        run_pending(&mut store, &data, &opts)?;
        fit_store(&mut store, &FitPolicy::FixedToy)?;
    }
    let state = ServiceState::from_store(&RunStore::open(&dir)?)?;
    println!("{}", serde_json::to_string(&handle_outputs(&state))?);

    let predict = serde_json::from_str(r#"{"x": {"nu": 1.2, "eps": 0.3}}"#)?;
    println!("{}", serde_json::to_string_pretty(&handle_predict(&state, &predict).map_err(|e| e.to_json())?)?);

    let bad = serde_json::from_str(r#"{"x": {"nu": 4.0, "eps": 0.3}}"#)?;
    println!("{}", handle_predict(&state, &bad).unwrap_err().to_json());

    let robust = serde_json::from_str(
        r#"{
            "region": {"type": "box", "intervals": [{"lo": 0.5, "hi": 1.9}, {"lo": 0.72, "hi": 0.72}]},
            "seed": 1,
            "criteria": [{"output": "mean_theta", "op": "<", "threshold": 2.6},
                         {"output": "sd_theta", "op": "<", "threshold": 0.47}]
        }"#,
    )?;
    let r = handle_robust(&state, &robust).map_err(|e| e.to_json())?;
    for o in &r.outputs {
        println!("{}: M {:.4} m {:.4} max quantiles {:?}", o.output, o.max_mean, o.min_mean, o.max_quantiles);
    }
    println!("decision probability {:.3}", r.decision_probability.map_or(0.0, |d| d.probability));

    let q = EffectQuery { grid: Some(5), n: Some(200), seed: None };
    let c = handle_effects(&state, "sd_theta", "nu", &q).map_err(|e| e.to_json())?;
    println!("main effect of nu on sd_theta: {:?}", c.mean);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

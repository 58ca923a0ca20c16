//! River-flow model: adaptive sampler against the normal-inverse-gamma
//! corner. Pass a CSV or RDB flow series as the first argument to use real
//! data; otherwise a synthetic N(1000, 300^2) series of 60 years is used.

use bayes_emu::store::ingest_timeseries_csv;
use bayes_emu::targets::{evaluate_target_with_chain, river_conjugate_posterior, Dataset, Model, RiverSpec, RIVER_ANCHOR};

fn main() -> bayes_emu::Result<()> {
    let data = match std::env::args().nth(1) {
        Some(path) => ingest_timeseries_csv(path)?,
        None => Dataset::synthetic_normal(60, 1000.0, 300.0, 1),
    };
    println!("{} observations, mean {:.1}", data.len(), data.mean());

    let exact = river_conjugate_posterior(&RiverSpec::from_coords(&RIVER_ANCHOR), &data)?;
    let cfg = Model::River.default_config(&RIVER_ANCHOR, &data, Some(200_000), 3);
    let (s, chain) = evaluate_target_with_chain(Model::River, &RIVER_ANCHOR, &data, &cfg)?;
    println!("anchor {RIVER_ANCHOR:?}, acceptance {:.3}, scales {:?}", s.accept_rate, chain.adapted_scales);
    for (k, (name, oracle)) in s.names.iter().zip(exact.to_vec()).enumerate() {
        println!("  {name:<12} mcmc {:>12.3} +- {:>9.3}   exact {oracle:>12.3}", s.features[k], s.mc_se(k));
    }

    for x in [[1333.0, 5.0, 300.0, 15.0, 0.3, 0.0], [1333.0, 5.0, 300.0, 15.0, 0.0, 1.0]] {
        let cfg = Model::River.default_config(&x, &data, Some(100_000), 4);
        let (s, _) = evaluate_target_with_chain(Model::River, &x, &data, &cfg)?;
        println!("phi={} eps={}: E(mu|z) {:.1}, Var(mu|z) {:.1}", x[4], x[5], s.features[0], s.features[1]);
    }
    Ok(())
}

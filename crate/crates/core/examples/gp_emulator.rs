//! Gaussian-process emulation of a cheap test function: fitting, prediction,
//! derivatives, joint sampling, diagnostics and serialization.

use std::f64::consts::PI;

use bayes_emu::gp::{fit, Emulator, FitPolicy, KernelFamily, MeanPolicy, NuggetPolicy, TrainingSet};
use bayes_emu::space::{Dim, DimKind, SpecSpace};

fn f(x: f64) -> f64 {
    (2.0 * PI * x / 50.0).sin()
}

fn main() -> bayes_emu::Result<()> {
    let space = SpecSpace::new(vec![Dim::new("x", 0.0, 50.0, DimKind::Structural)])?;
    let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![10.0 * i as f64]).collect();
    let y: Vec<f64> = xs.iter().map(|x| f(x[0])).collect();

    let det = fit(
        &TrainingSet::deterministic("f", space.clone(), xs.clone(), y.clone())?,
        &FitPolicy::mle_se(NuggetPolicy::Zero, 1),
    )?;
    println!("deterministic fit: {:?}", det.kernel());
    for x in [5.0, 12.5, 25.0, 37.5] {
        let p = det.predict(&[x])?;
        let d = det.predict_derivative(&[x], 0)?;
        println!(
            "  x={x:<5} mean {:+.4} sd {:.4} (f {:+.4})  df/dx {:+.4} (exact {:+.4})",
            p.mean,
            p.sd(),
            f(x),
            d.mean,
            2.0 * PI / 50.0 * (2.0 * PI * x / 50.0).cos()
        );
    }

    // Noisy runs: the nugget keeps the emulator from interpolating.
    let noisy: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.05 * ((i * 7 % 5) as f64 - 2.0)).collect();
    let stoch = fit(
        &TrainingSet::new("f", space.clone(), xs.clone(), noisy, vec![0.0025; 6])?,
        &FitPolicy::Mle {
            family: KernelFamily::Matern,
            smoothness: Some(2.5),
            mean: MeanPolicy::Constant,
            nugget: NuggetPolicy::FromMcVariance,
            restarts: 4,
            seed: 2,
        },
    )?;
    let p = stoch.predict(&[20.0])?;
    println!("stochastic fit at a design point: mean {:.4}, sd {:.4}", p.mean, p.sd());

    let paths = det.joint_sample(&[vec![0.0], vec![12.5], vec![25.0], vec![37.5], vec![50.0]], 3, 9)?;
    for (j, row) in paths.values.iter().enumerate() {
        println!("  realization {j}: {:?}", row.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
    }

    let loo = stoch.loo_diagnostics()?;
    println!("LOO: {}/{} standardized errors beyond 2, fails: {}", loo.n_exceed, loo.points.len(), loo.fails());

    let json = det.to_json()?;
    let back = Emulator::from_json(&json)?;
    println!("serialized {} bytes; reloaded prediction at 12.5: {:.6}", json.len(), back.predict(&[12.5])?.mean);
    Ok(())
}

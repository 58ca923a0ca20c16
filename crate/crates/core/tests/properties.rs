use std::collections::BTreeMap;

use bayes_emu::gp::{fit, Emulator, FitPolicy, KernelSpec, MeanPolicy, TrainingSet};
use bayes_emu::mcmc::folded_normal_density;
use bayes_emu::robustness::{main_effect_curve, region_extrema, sobol_estimate};
use bayes_emu::service::{handle_predict, PredictRequest, ServiceState};
use bayes_emu::space::{Interval, Region, SpecSpace};
use bayes_emu::store::run_id;
use bayes_emu::targets::{toy_density, Dataset, Model};
use proptest::prelude::*;

fn surface(x: &[f64]) -> f64 {
    (2.0 * x[0]).sin() + 0.5 * x[1] * x[1] - 0.3 * x[0] * x[1]
}

fn emulator(points: &[Vec<f64>]) -> Emulator {
    let space = SpecSpace::toy();
    let y = points.iter().map(|x| surface(x)).collect();
    let policy = FitPolicy::Fixed {
        kernel: KernelSpec::squared_exponential(0.5, vec![0.6, 0.6], 0.0),
        mean: MeanPolicy::Constant,
    };
    fit(&TrainingSet::deterministic("f", space, points.to_vec(), y).unwrap(), &policy).unwrap()
}

/// Monte Carlo band in standard errors; several hundred comparisons run per
/// test invocation.
const Z: f64 = 4.5;

fn lattice() -> Vec<Vec<f64>> {
    SpecSpace::toy().lattice_design(&[5, 4]).unwrap().points
}

/// Composite Simpson on `[0, upper]`.
fn simpson(f: impl Fn(f64) -> f64, upper: f64, n: usize) -> f64 {
    let h = upper / n as f64;
    let mut s = f(0.0) + f(upper);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folded_normal_is_symmetric(a in 0.0f64..10.0, b in 0.0f64..10.0, s in 0.05f64..5.0) {
        let (p, q) = (folded_normal_density(a, b, s), folded_normal_density(b, a, s));
        prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
    }

    #[test]
    fn contaminated_likelihood_keeps_mean(theta in 0.2f64..5.0, eps in 0.0f64..1.0) {
        let upper = 60.0 / theta;
        let mass = simpson(|z| toy_density(z, theta, eps), upper, 20_000);
        let mean = simpson(|z| z * toy_density(z, theta, eps), upper, 20_000);
        prop_assert!((mass - 1.0).abs() < 1e-6);
        prop_assert!((mean - 1.0 / theta).abs() < 1e-6 * (1.0 / theta).max(1.0));
    }

    #[test]
    fn extra_design_point_never_adds_variance(nu in 0.3f64..2.0, eps in 0.0f64..1.0, nu2 in 0.3f64..2.0, eps2 in 0.0f64..1.0) {
        let base = lattice();
        let mut more = base.clone();
        prop_assume!(base.iter().all(|p| (p[0] - nu2).abs() + (p[1] - eps2).abs() > 1e-3));
        more.push(vec![nu2, eps2]);
        let v0 = emulator(&base).predict(&[nu, eps]).unwrap().variance;
        let v1 = emulator(&more).predict(&[nu, eps]).unwrap().variance;
        prop_assert!(v1 <= v0 + 1e-10 * 0.5);
        prop_assert!(v0 <= 0.5 * (1.0 + 1e-10));
    }

    #[test]
    fn extrema_are_ordered(a in 0.3f64..2.0, b in 0.3f64..2.0, c in 0.0f64..1.0, d in 0.0f64..1.0, seed in 0u64..1000) {
        let em = emulator(&lattice());
        let region = Region::Box { intervals: vec![Interval::new(a.min(b), a.max(b)), Interval::new(c.min(d), c.max(d))] };
        let r = region_extrema(&em, &region, 40, 50, seed).unwrap();
        prop_assert!(r.maxima.iter().zip(&r.minima).all(|(m, n)| m >= n));
        prop_assert!(r.max_mean >= r.min_mean);
        for q in [r.max_quantiles(), r.min_quantiles()] {
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sobol_bounds_on_additive_functions(c in prop::collection::vec(-3.0f64..3.0, 3), seed in 0u64..1000) {
        let f = |u: &[f64]| c[0] * u[0] + c[1] * (3.0 * u[1]).sin() + c[2] * u[2] * u[2];
        let s = sobol_estimate(f, 3, 2048, seed).unwrap();
        let se_sum = s.main_se.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(s.main.iter().sum::<f64>() <= 1.0 + Z * se_sum + 1e-12);
        for i in 0..3 {
            let se = s.main_se[i].hypot(s.total_se[i]);
            prop_assert!(s.total[i] >= s.main[i] - Z * se - 1e-12);
            prop_assert!(s.main[i] >= -Z * s.main_se[i] - 1e-12 && s.main[i] <= 1.0 + Z * s.main_se[i] + 1e-12);
        }
    }

    #[test]
    fn predict_interval_is_symmetric(nu in 0.3f64..2.0, eps in 0.0f64..1.0) {
        let state = ServiceState::new(Some(Model::Toy), SpecSpace::toy(), vec![emulator(&lattice())]).unwrap();
        let x = BTreeMap::from([("nu".to_string(), nu), ("eps".to_string(), eps)]);
        let r = handle_predict(&state, &PredictRequest { x, outputs: None }).unwrap();
        let p = &r.predictions[0];
        prop_assert!(p.sd >= 0.0);
        prop_assert_eq!(p.ci95, [p.mean - 1.959964 * p.sd, p.mean + 1.959964 * p.sd]);
    }

    #[test]
    fn out_of_range_names_the_field(nu in 2.0001f64..10.0, eps in 0.0f64..1.0) {
        let state = ServiceState::new(None, SpecSpace::toy(), vec![emulator(&lattice())]).unwrap();
        let x = BTreeMap::from([("nu".to_string(), nu), ("eps".to_string(), eps)]);
        let e = handle_predict(&state, &PredictRequest { x, outputs: None }).unwrap_err();
        prop_assert_eq!(e.body.field.as_deref(), Some("nu"));
        prop_assert!(e.body.message.contains("[0.3, 2]"));
    }

    #[test]
    fn lattice_points_are_valid(l1 in 2usize..9, l2 in 2usize..9) {
        let space = SpecSpace::toy();
        let d = space.lattice_design(&[l1, l2]).unwrap();
        prop_assert_eq!(d.len(), l1 * l2);
        let scaled = d.scaled();
        for (i, p) in d.points.iter().enumerate() {
            prop_assert!(space.check(p).is_ok());
            for q in &scaled[..i] {
                let dist: f64 = q.iter().zip(&scaled[i]).map(|(a, b)| (a - b).abs()).sum();
                prop_assert!(dist > 1e-12);
            }
        }
    }

    #[test]
    fn run_ids_are_stable(nu in 0.3f64..2.0, eps in 0.0f64..1.0, seed in 0u64..1_000_000) {
        let data = Dataset::toy();
        let names: Vec<String> = Model::Toy.features().into_iter().map(|f| f.name).collect();
        let x = [nu, eps];
        let cfg = Model::Toy.default_config(&x, &data, Some(1000), seed);
        let id = run_id(&x, &cfg, &names).unwrap();
        prop_assert_eq!(id.len(), 12);
        prop_assert_eq!(&id, &run_id(&x, &cfg.clone(), &names).unwrap());
        let other = Model::Toy.default_config(&x, &data, Some(1000), seed + 1);
        prop_assert_ne!(id, run_id(&x, &other, &names).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn effect_envelope_brackets_mean(shift in -1.0f64..1.0, seed in 0u64..1000) {
        let pts = lattice();
        let space = SpecSpace::toy();
        let y = pts.iter().map(|x| surface(x) + shift * x[1]).collect();
        let policy = FitPolicy::Fixed {
            kernel: KernelSpec::squared_exponential(0.5, vec![0.6, 0.6], 0.0),
            mean: MeanPolicy::Constant,
        };
        let em = fit(&TrainingSet::deterministic("f", space, pts, y).unwrap(), &policy).unwrap();
        for input in ["nu", "eps"] {
            let c = main_effect_curve(&em, input, 11, 400, seed).unwrap();
            for k in 0..c.grid.len() {
                prop_assert!(c.q05[k] <= c.mean[k] && c.mean[k] <= c.q95[k]);
            }
        }
    }
}

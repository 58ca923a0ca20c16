use bayes_emu::gp::{fit, FitPolicy, TrainingSet};
use bayes_emu::robustness::region_extrema;
use bayes_emu::space::SpecSpace;
use bayes_emu::store::RunStore;
use bayes_emu::targets::{toy_case_region, Model};
use bayes_emu::Error;

fn toy_emulator() -> bayes_emu::gp::Emulator {
    let space = SpecSpace::toy();
    let xs = space.lattice_design(&[5, 7]).unwrap().points;
    let y: Vec<f64> = xs.iter().map(|x| 4.0 / (1.0 + x[0]) - 0.3 * x[1]).collect();
    let mc = vec![1e-5; xs.len()];
    fit(&TrainingSet::new("mean_theta", space, xs, y, mc).unwrap(), &FitPolicy::FixedToy).unwrap()
}

#[test]
fn imported_emulator_reproduces_queries() {
    let dir = tempfile::tempdir().unwrap();
    let em = toy_emulator();
    {
        let mut st = RunStore::create(dir.path(), Some(Model::Toy), Model::Toy.space()).unwrap();
        st.export_emulator(&em).unwrap();
    }
    let st = RunStore::open(dir.path()).unwrap();
    let back = st.import_emulator("mean_theta").unwrap();
    for x in [[0.3, 0.0], [1.1, 0.4], [2.0, 1.0]] {
        let (a, b) = (em.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs());
        assert!((a.variance - b.variance).abs() <= 1e-12 * em.kernel().variance);
    }
    let region = toy_case_region(4).unwrap();
    let r1 = serde_json::to_string(&region_extrema(&em, &region, 100, 200, 5).unwrap()).unwrap();
    let r2 = serde_json::to_string(&region_extrema(&back, &region, 100, 200, 5).unwrap()).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn tampered_emulator_fails_canaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = {
        let mut st = RunStore::create(dir.path(), Some(Model::Toy), Model::Toy.space()).unwrap();
        st.export_emulator(&toy_emulator()).unwrap()
    };
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let y0 = doc["y"][0].as_f64().unwrap();
    doc["y"][0] = serde_json::json!(y0 + 0.5);
    std::fs::write(&path, doc.to_string()).unwrap();
    let st = RunStore::open(dir.path()).unwrap();
    assert!(matches!(st.import_emulator("mean_theta"), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn deleted_emulator_is_detected_on_open() {
    let dir = tempfile::tempdir().unwrap();
    let path = {
        let mut st = RunStore::create(dir.path(), Some(Model::Toy), Model::Toy.space()).unwrap();
        st.export_emulator(&toy_emulator()).unwrap()
    };
    std::fs::remove_file(path).unwrap();
    assert!(matches!(RunStore::open(dir.path()), Err(Error::MissingFile(_))));
}

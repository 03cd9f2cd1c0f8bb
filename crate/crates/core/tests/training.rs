use relbev_core::model::{self, ModelConfig};
use relbev_core::tensor::GradCheckOptions;
use relbev_core::train::{loss_curve_csv, model_gradcheck, toy_sample, train, TrainConfig};

#[test]
fn short_run_lowers_loss_and_is_reproducible() {
    let cfg = ModelConfig::desk();
    let s = toy_sample(3, &cfg).unwrap();
    let tc = TrainConfig { steps: 30, seed: 3, ..Default::default() };
    let run = || {
        let mut ps = model::init_params(&cfg, &s.geom.grid, 3).unwrap();
        loss_curve_csv(&train(&mut ps, &cfg, &[s.clone()], &tc).unwrap())
    };
    let a = run();
    assert_eq!(a, run());
    let totals: Vec<f64> = a.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(totals.last().unwrap() < &totals[0]);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let opts = GradCheckOptions { max_elems_per_param: Some(4), ..Default::default() };
    let report = model_gradcheck(0, &opts).unwrap();
    for p in report.failures() {
        eprintln!("{} rel {:.3e} analytic {:e} numeric {:e}", p.name, p.max_rel_err, p.analytic, p.numeric);
    }
    assert!(report.passed(), "max rel err {:e}", report.max_rel_err());
    for prefix in ["bb.", "gat.", "deform.w_off", "det.", "seg.map", "seg.obj"] {
        assert!(report.params.iter().any(|p| p.name.contains(prefix)), "{prefix} not covered");
    }
}


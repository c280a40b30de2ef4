use sliceocc::checks::{build_model, op_suite, toy_pipeline, toy_pipeline_check, PIPELINE_TOL};
use sliceocc::optim::{AdamWConfig, OptimState};
use sliceocc::synth::generate_scene;
use sliceocc::train::train_step;

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let report = toy_pipeline_check(7, 1e-5).unwrap();
    assert!(report.passed, "{report}");
    assert!(report.max_rel_err < PIPELINE_TOL);
    assert!(report.entries_checked > 2000);
}

#[test]
fn per_op_suites_pass() {
    for r in op_suite(1e-5).unwrap() {
        assert!(r.report.passed, "{}: {}", r.name, r.report);
    }
    // other step sizes trade truncation for roundoff but stay close
    for eps in [1e-4, 1e-6] {
        for r in op_suite(eps).unwrap() {
            eprintln!("{} eps {eps:e}: {:.2e}", r.name, r.report.max_rel_err);
            assert!(r.report.max_rel_err < 1e-4, "{} at eps {eps:e}: {}", r.name, r.report);
        }
    }
}

#[test]
fn training_is_bit_deterministic() {
    let (cfg, spec) = toy_pipeline().unwrap();
    let s = generate_scene(&cfg.scene, &spec, 7).unwrap();
    let run = || {
        let (mut store, model, inputs) = build_model(&cfg, &s, 3).unwrap();
        let mut opt = OptimState::new(&store, AdamWConfig { lr: 1e-3, ..AdamWConfig::default() });
        let reports: Vec<_> = (0..3).map(|_| train_step(&model, &mut store, &mut opt, &inputs, &s.gt.labels()).unwrap()).collect();
        let params: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        (reports, params)
    };
    let (ra, pa) = run();
    let (rb, pb) = run();
    assert_eq!(ra, rb);
    assert_eq!(pa, pb);
    assert!(ra[2].l_total < ra[0].l_total);
}

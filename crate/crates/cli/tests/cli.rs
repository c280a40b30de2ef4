use std::path::PathBuf;
use std::process::Command;

use proptest::prelude::*;
use sliceocc::checks::build_model;
use sliceocc::head::{default_class_names, VoxelGrid};
use sliceocc_cli::checkpoint::Checkpoint;
use sliceocc_cli::commands::{make_scene, run_gradcheck, run_overfit, run_predict, run_sweep, SweepAxis, METRICS_HEADER};
use sliceocc_cli::config::RunConfig;
use sliceocc_cli::grid_io::{decode_grid, encode_grid, export_grid, import_grid, GridFormatError, HEADER_LEN};
use sliceocc_cli::scene_io::{load_scene, save_scene};

fn toy() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    RunConfig::load(&path).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grids_round_trip(w in 1usize..8, l in 1usize..8, h in 1usize..8, c in 1usize..=255, seed in any::<u64>()) {
        let n = w * l * h;
        let labels: Vec<u32> = (0..n as u64).map(|i| ((i.wrapping_mul(2654435761) ^ seed) % c as u64) as u32).collect();
        let grid = VoxelGrid::from_indices((w, l, h), default_class_names(c), labels).unwrap();
        let bytes = encode_grid(&grid).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + n);
        prop_assert_eq!(decode_grid(&bytes, Some(grid.class_names.clone())).unwrap(), grid);
    }

    #[test]
    fn every_truncation_is_reported(cut in 0usize..(HEADER_LEN + 12)) {
        let grid = VoxelGrid::from_indices((2, 2, 3), default_class_names(4), vec![1; 12]).unwrap();
        let bytes = encode_grid(&grid).unwrap();
        let is_truncated = matches!(decode_grid(&bytes[..cut], None), Err(GridFormatError::Truncated { .. }));
        prop_assert!(is_truncated);
    }
}

#[test]
fn import_without_sidecar_infers_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let grid = VoxelGrid::from_indices((3, 1, 2), default_class_names(9), vec![0, 4, 2, 0, 1, 4]).unwrap();
    let path = dir.path().join("g.socc");
    export_grid(&grid, &path, &RunConfig::default()).unwrap();
    assert_eq!(import_grid(&path).unwrap(), grid);
    std::fs::remove_file(path.with_extension("json")).unwrap();
    let bare = import_grid(&path).unwrap();
    assert_eq!(bare.num_classes(), 5);
    assert_eq!(bare.labels(), grid.labels());
}

#[test]
fn config_text_survives_a_file_round_trip() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn scene_file_round_trip_recomputes_ground_truth() {
    let cfg = toy();
    let scene = make_scene(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    save_scene(&scene, &path).unwrap();
    let back = load_scene(&path).unwrap();
    assert_eq!(back.gt, scene.gt);
    assert_eq!(back.objects, scene.objects);
}

#[test]
fn checkpoint_restores_parameters_exactly() {
    let cfg = toy();
    let scene = make_scene(&cfg).unwrap();
    let (store, _, _) = build_model(&cfg.model_config(), &scene, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::from_store(&cfg, 11, &store).save(&path).unwrap();
    let (mut other, _, _) = build_model(&cfg.model_config(), &scene, 4).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.step, 11);
    ckpt.restore(&mut other).unwrap();
    for ((_, a, x), (_, b, y)) in store.iter().zip(other.iter()) {
        assert_eq!(a, b);
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn overfit_writes_outputs_and_predict_reproduces_them() {
    let mut cfg = toy();
    cfg.steps = 6;
    cfg.eval_every = 3;
    cfg.optimizer.lr = 1e-3;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run_overfit(&cfg, Some(&out), |_| {}).unwrap();
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(import_grid(&out.join("pred.socc")).unwrap(), o.prediction);
    assert_eq!(import_grid(&out.join("gt.socc")).unwrap(), o.scene.gt);

    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let scene = load_scene(&out.join("scene.json")).unwrap();
    let p = run_predict(&ckpt, &scene, &dir.path().join("predict")).unwrap();
    assert_eq!(p.prediction, o.prediction);
    assert_eq!(p.miou, o.miou);
}

#[test]
fn sweep_applies_the_axis_value() {
    let mut cfg = toy();
    cfg.steps = 2;
    cfg.eval_every = 1;
    let rows = run_sweep(&cfg, SweepAxis::Slices, &[1, 2], None, |_, _| {}).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 2]);
    assert!(rows.iter().all(|r| r.steps == 2 && (0.0..=1.0).contains(&r.miou)));
}

#[test]
fn gradcheck_reports_injected_nan() {
    let mut cfg = toy();
    let scene = make_scene(&cfg).unwrap();
    let (store, _, _) = build_model(&cfg.model_config(), &scene, cfg.seed).unwrap();
    let name = store.iter().next().unwrap().1.to_string();
    cfg.inject_nan = Some(name.clone());
    let report = run_gradcheck(&cfg, &[1e-5], false).unwrap();
    assert!(!report.passed);
    assert_eq!(report.faults.len(), 1);
    assert_eq!(report.faults[0].non_finite_params, vec![(name, 1)]);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_sliceocc");
    let dir = tempfile::tempdir().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    let ok = Command::new(bin)
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "gradcheck", "--skip-ops", "--eps", "1e-5"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("gradcheck.json").exists());

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "Ss = 4\n").unwrap();
    let err = Command::new(bin).args(["--config", bad.to_str().unwrap(), "export"]).output().unwrap();
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("unknown key"));
}

//! The work behind each subcommand, usable without the binary.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sliceocc::checks::{build_model, op_suite, pipeline_check, randomize_offsets};
use sliceocc::head::{default_class_names, miou, voxel_accuracy, VoxelGrid};
use sliceocc::numerics::{GradReport, Rng};
use sliceocc::optim::OptimState;
use sliceocc::synth::{generate_scene, SyntheticScene};
use sliceocc::train::{overfit, predict, EvalRecord, OverfitOptions};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::grid_io::export_grid;
use crate::scene_io::save_scene;

/// Step size that decides pass/fail; other step sizes are reported only.
pub const PRIMARY_EPS: f64 = 1e-5;
/// Entries checked per parameter in the full-pipeline check.
pub const PIPELINE_ENTRIES: usize = 64;
/// Bound, in texels, of the random offset weights used during checks.
pub const CHECK_OFFSET_BOUND: f64 = 0.4;

pub fn make_scene(cfg: &RunConfig) -> anyhow::Result<SyntheticScene> {
    generate_scene(&cfg.scene_config(), &cfg.scene_spec(), cfg.scene_seed()).context("generating the scene")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub suite: String,
    pub eps: f64,
    pub entries: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub worst: Option<String>,
}

impl GradcheckEntry {
    fn new(suite: &str, r: &GradReport) -> Self {
        Self {
            suite: suite.to_string(),
            eps: r.eps,
            entries: r.entries_checked,
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            passed: r.passed,
            worst: r.worst.as_ref().map(|w| format!("{}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric)),
        }
    }
}

/// A check that could not run because of non-finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub suite: String,
    pub error: String,
    /// `(parameter, non-finite entry count)`.
    pub non_finite_params: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub faults: Vec<Fault>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let verdict = if e.eps != PRIMARY_EPS {
                "info"
            } else if e.passed {
                "PASS"
            } else {
                "FAIL"
            };
            let _ = writeln!(s, "{:<22} eps={:<6e} entries={:<6} max_rel_err={:.3e} tol={:e} {verdict}", e.suite, e.eps, e.entries, e.max_rel_err, e.tol);
            if e.eps == PRIMARY_EPS && !e.passed {
                if let Some(w) = &e.worst {
                    let _ = writeln!(s, "    worst: {w}");
                }
            }
        }
        for f in &self.faults {
            let _ = writeln!(s, "FAULT in {}: {}", f.suite, f.error);
            for (p, n) in &f.non_finite_params {
                let _ = writeln!(s, "    {p}: {n} non-finite entries");
            }
        }
        let _ = writeln!(s, "{}", if self.passed { "gradcheck PASSED" } else { "gradcheck FAILED" });
        s
    }

    pub fn max_rel_err(&self, suite_prefix: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.eps == PRIMARY_EPS && e.suite.starts_with(suite_prefix))
            .map(|e| e.max_rel_err)
            .reduce(f64::max)
    }
}

/// Per-op suites plus a full-pipeline check on the configured model and
/// scene, at every step size in `eps`. Pass/fail is decided at
/// [`PRIMARY_EPS`], which is always included.
pub fn run_gradcheck(cfg: &RunConfig, eps: &[f64], include_ops: bool) -> anyhow::Result<GradcheckReport> {
    let mut eps: Vec<f64> = eps.to_vec();
    if !eps.contains(&PRIMARY_EPS) {
        eps.push(PRIMARY_EPS);
    }
    let mut entries = Vec::new();
    let mut faults = Vec::new();
    if include_ops {
        for &e in &eps {
            for r in op_suite(e)? {
                entries.push(GradcheckEntry::new(r.name, &r.report));
            }
        }
    }

    let scene = make_scene(cfg)?;
    let model_cfg = cfg.model_config();
    let (mut store, model, inputs) = build_model(&model_cfg, &scene, cfg.seed)?;
    randomize_offsets(&mut store, &mut Rng::new(cfg.seed).fork(1), CHECK_OFFSET_BOUND);
    if let Some(name) = &cfg.inject_nan {
        let id = store.find(name).with_context(|| format!("inject_nan: no parameter named {name}"))?;
        store.get_mut(id).data_mut()[0] = f64::NAN;
    }
    let labels = scene.gt.labels();
    for &e in &eps {
        match pipeline_check(&mut store, &model, &inputs, &labels, e, Some(PIPELINE_ENTRIES)) {
            Ok(r) => entries.push(GradcheckEntry::new("full_pipeline", &r)),
            Err(err) => {
                let non_finite_params = store
                    .iter()
                    .filter_map(|(_, name, t)| {
                        let n = t.data().iter().filter(|v| !v.is_finite()).count();
                        (n > 0).then(|| (name.to_string(), n))
                    })
                    .collect();
                faults.push(Fault {
                    suite: "full_pipeline".into(),
                    error: err.to_string(),
                    non_finite_params,
                });
                break;
            }
        }
    }
    let passed = faults.is_empty() && entries.iter().filter(|e| e.eps == PRIMARY_EPS).all(|e| e.passed);
    Ok(GradcheckReport { entries, faults, passed })
}

#[derive(Clone, Debug)]
pub struct OverfitOutcome {
    pub records: Vec<EvalRecord>,
    pub csv: String,
    pub prediction: VoxelGrid,
    pub scene: SyntheticScene,
    pub miou: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "step,l_ce,l_geo,l_sem,l_total,miou,accuracy";

pub fn metrics_csv(records: &[EvalRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let l = &r.loss;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, l.l_ce, l.l_geo, l.l_sem, l.l_total, r.miou, r.accuracy);
    }
    s
}

/// Trains on one generated scene. With `out`, writes the config, metrics,
/// scene, ground-truth and predicted grids, and a checkpoint there.
pub fn run_overfit(cfg: &RunConfig, out: Option<&Path>, on_eval: impl FnMut(&EvalRecord)) -> anyhow::Result<OverfitOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let scene = make_scene(cfg)?;
    let model_cfg = cfg.model_config();
    let (mut store, model, inputs) = build_model(&model_cfg, &scene, cfg.seed)?;
    let mut opt = OptimState::new(&store, cfg.optimizer);
    let gt = scene.gt.labels();
    let opts = OverfitOptions {
        steps: cfg.steps,
        eval_every: cfg.eval_every,
    };
    let records = overfit(&model, &mut store, &mut opt, &inputs, &gt, opts, on_eval)?;
    let probs = predict(&model, &store, &inputs)?;
    let c = model_cfg.scene.num_classes;
    let prediction = VoxelGrid::from_indices(model_cfg.voxel_dims(), default_class_names(c), probs.labels())?;
    let last = records.last().expect("overfit records the initial evaluation");
    let csv = metrics_csv(&records);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        save_scene(&scene, &dir.join("scene.json"))?;
        export_grid(&scene.gt, &dir.join("gt.socc"), cfg)?;
        export_grid(&prediction, &dir.join("pred.socc"), cfg)?;
        Checkpoint::from_store(cfg, cfg.steps, &store).save(&dir.join("checkpoint.json"))?;
    }
    Ok(OverfitOutcome {
        miou: last.miou,
        accuracy: last.accuracy,
        records,
        csv,
        prediction,
        scene,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
pub enum SweepAxis {
    Slices,
    Resolution,
    Layers,
    Views,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Slices => "slices",
            Self::Resolution => "resolution",
            Self::Layers => "layers",
            Self::Views => "views",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Self::Slices => c.scene.num_slices = value,
            Self::Resolution => {
                c.scene.slice_w = value;
                c.scene.slice_l = value;
            }
            Self::Layers => c.scene.layers = value,
            Self::Views => c.scene.num_views = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub miou: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub wall_seconds: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,miou,accuracy,steps,wall_seconds";

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{:.3}", axis.name(), r.value, r.miou, r.accuracy, r.steps, r.wall_seconds);
    }
    s
}

/// One overfit run per value with the same seeds; each run writes to its own
/// subdirectory of `out`.
pub fn run_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
    out: Option<&Path>,
    mut on_eval: impl FnMut(usize, &EvalRecord),
) -> anyhow::Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let configs: Vec<RunConfig> = values.iter().map(|&v| axis.apply(cfg, v)).collect();
    for (c, v) in configs.iter().zip(values) {
        c.validate().with_context(|| format!("{} = {v}", axis.name()))?;
    }
    let mut rows = Vec::with_capacity(values.len());
    for (c, &v) in configs.iter().zip(values) {
        let dir = out.map(|d| d.join(format!("{}_{v}", axis.name())));
        let o = run_overfit(c, dir.as_deref(), |r| on_eval(v, r))?;
        rows.push(SweepRow {
            value: v,
            miou: o.miou,
            accuracy: o.accuracy,
            steps: c.steps,
            wall_seconds: o.wall_seconds,
        });
    }
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("sweep.csv"), sweep_csv(axis, &rows))?;
    }
    Ok(rows)
}

/// Writes the configured scene and its ground-truth grid.
pub fn run_export(cfg: &RunConfig, scene: &SyntheticScene, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    save_scene(scene, &out.join("scene.json"))?;
    export_grid(&scene.gt, &out.join("gt.socc"), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutcome {
    pub prediction: VoxelGrid,
    pub miou: f64,
    pub accuracy: f64,
}

/// Runs a checkpoint on a scene and writes the predicted grid.
pub fn run_predict(ckpt: &Checkpoint, scene: &SyntheticScene, out: &Path) -> anyhow::Result<PredictOutcome> {
    let cfg = &ckpt.run_config;
    let mut model_cfg = cfg.model_config();
    // the camera count may differ; everything else must match
    let mut lattice = scene.config.clone();
    lattice.num_views = model_cfg.scene.num_views;
    if lattice != model_cfg.scene {
        bail!("scene lattice or bounds differ from the checkpoint configuration");
    }
    model_cfg.scene.num_views = scene.cameras.len();
    let (mut store, model, inputs) = build_model(&model_cfg, scene, cfg.seed)?;
    ckpt.restore(&mut store)?;
    let c = model_cfg.scene.num_classes;
    let labels = predict(&model, &store, &inputs)?.labels();
    let gt = scene.gt.labels();
    let prediction = VoxelGrid::from_indices(model_cfg.voxel_dims(), default_class_names(c), labels)?;
    std::fs::create_dir_all(out)?;
    export_grid(&prediction, &out.join("pred.socc"), cfg)?;
    let pred = prediction.labels();
    Ok(PredictOutcome {
        miou: miou(&pred, &gt, c)?.miou,
        accuracy: voxel_accuracy(&pred, &gt),
        prediction,
    })
}

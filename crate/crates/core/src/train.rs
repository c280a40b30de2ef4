//! Optimization steps, prediction, and the single-scene overfit loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{default_class_names, miou, voxel_accuracy, VoxelGrid};
use crate::loss::{total_loss, LossReport};
use crate::model::{SceneInputs, SliceOccModel};
use crate::numerics::{Graph, ParamStore};
use crate::optim::OptimState;

/// One forward/backward pass and optimizer update on a labeled scene.
pub fn train_step(
    model: &SliceOccModel,
    store: &mut ParamStore,
    opt: &mut OptimState,
    inputs: &SceneInputs,
    labels: &[u32],
) -> Result<LossReport> {
    let (report, tape, grads) = {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, inputs)?;
        let (total, report) = total_loss(&mut g.tape, out.probs, labels)?;
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite { op: "total loss" });
        }
        let grads = g.tape.backward(total);
        (report, g.tape, grads)
    };
    store.absorb(&tape, &grads);
    if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(Error::InvalidConfig(format!("non-finite gradient for parameter {name}")));
    }
    opt.update(store)?;
    if let Some((_, name, _)) = store.iter().find(|(_, _, t)| !t.is_finite()) {
        return Err(Error::InvalidConfig(format!("parameter {name} became non-finite after the update")));
    }
    Ok(report)
}

/// Class probabilities for every voxel.
pub fn predict(model: &SliceOccModel, store: &ParamStore, inputs: &SceneInputs) -> Result<VoxelGrid> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, inputs)?;
    let probs = g.tape.data(out.probs).to_vec();
    let c = model.config.scene.num_classes;
    VoxelGrid::from_probabilities(model.config.voxel_dims(), default_class_names(c), probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: LossReport,
    pub miou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitOptions {
    pub steps: usize,
    /// Evaluate every this many steps (and always after the last one).
    pub eval_every: usize,
}

/// Scores the current parameters without updating them.
pub fn evaluate(model: &SliceOccModel, store: &ParamStore, inputs: &SceneInputs, gt: &[u32], step: usize) -> Result<EvalRecord> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, inputs)?;
    let (_, loss) = total_loss(&mut g.tape, out.probs, gt)?;
    let c = model.config.scene.num_classes;
    let pred = crate::head::argmax_rows(g.tape.data(out.probs), c);
    Ok(EvalRecord {
        step,
        loss,
        miou: miou(&pred, gt, c)?.miou,
        accuracy: voxel_accuracy(&pred, gt),
    })
}

/// Trains on a single scene. `on_eval` sees every evaluation as it happens;
/// step 0 is the untrained model.
pub fn overfit(
    model: &SliceOccModel,
    store: &mut ParamStore,
    opt: &mut OptimState,
    inputs: &SceneInputs,
    gt: &[u32],
    opts: OverfitOptions,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<Vec<EvalRecord>> {
    let every = opts.eval_every.max(1);
    let mut records = Vec::new();
    let first = evaluate(model, store, inputs, gt, 0)?;
    on_eval(&first);
    records.push(first);
    for step in 1..=opts.steps {
        train_step(model, store, opt, inputs, gt)?;
        if step % every == 0 || step == opts.steps {
            let rec = evaluate(model, store, inputs, gt, step)?;
            on_eval(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::nn::{Graph, ParamId, ParamStore};
use crate::numerics::tape::Var;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation for the central difference.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`,
    /// so entries whose gradients are both below `floor` are compared on an
    /// absolute scale.
    pub floor: f64,
    /// Restrict the check to these parameters; `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub loss: f64,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryError>,
    pub tol: f64,
    pub eps: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries, eps={:e}, max rel err {:.3e} (tol {:e}) -> {}",
            self.entries_checked,
            self.eps,
            self.max_rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}]: analytic {:.6e}, numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let v = g.tape.value(out);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            expected: "scalar loss".into(),
            got: format!("{:?}", v.shape()),
        });
    }
    let loss = v.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    Ok(loss)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences for every entry of the selected parameters.
pub fn grad_check<F>(f: F, store: &mut ParamStore, params: Option<&[ParamId]>, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !store.all_finite() {
        return Err(Error::NonFinite { op: "grad_check parameters" });
    }
    let (loss, analytic) = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let loss = g.tape.value(out).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "grad_check loss" });
        }
        let grads = g.tape.backward(out);
        let mut s = store.clone();
        s.absorb(&g.tape, &grads);
        let analytic: Vec<Vec<f64>> = s.iter().map(|(_, _, t)| t.grad.clone().unwrap_or_default()).collect();
        (loss, analytic)
    };

    let selected: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradReport {
        loss,
        entries_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tol: opts.tol,
        eps: opts.eps,
        passed: true,
    };
    for pid in selected {
        let n = store.get(pid).numel();
        let count = opts.max_entries_per_param.map_or(n, |m| m.min(n));
        // spread sampled entries evenly when capped
        let stride = if count == 0 { 1 } else { (n / count).max(1) };
        for k in 0..count {
            let i = k * stride;
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + opts.eps;
            let plus = eval(&f, store);
            store.get_mut(pid).data_mut()[i] = orig - opts.eps;
            let minus = eval(&f, store);
            store.get_mut(pid).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[pid.0][i];
            let rel = relative_error(a, numeric, opts.floor);
            report.entries_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(EntryError {
                    param: store.name(pid).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

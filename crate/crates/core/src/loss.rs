//! Cross-entropy and scene-class affinity losses over voxel probabilities.
//!
//! Losses take `[voxels, C]` probabilities and compute their value and
//! gradient directly, recording the result as a single scalar op.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Var};

/// Floor applied to every probability or ratio before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalMode {
    /// Occupied vs empty, with occupancy `1 - P(empty)`.
    Geometric,
    /// Every class against the rest.
    Semantic,
}

/// Precision/recall/specificity of one class; `None` where the
/// denominator vanished and the term was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityTerms {
    pub class: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_geo: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub geo_terms: Vec<AffinityTerms>,
    pub sem_terms: Vec<AffinityTerms>,
}

fn check(tape: &Tape, op: &'static str, probs: Var, labels: &[u32]) -> Result<(usize, usize)> {
    let s = tape.shape(probs);
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err(op, format!("[{}, C]", labels.len()), format!("{s:?}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= s[1]) {
        return Err(Error::InvalidConfig(format!("{op}: label {bad} out of range for C={}", s[1])));
    }
    Ok((s[0], s[1]))
}

#[inline]
fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// Mean negative log-likelihood of the labels.
pub fn loss_ce(tape: &mut Tape, probs: Var, labels: &[u32]) -> Result<Var> {
    let (n, c) = check(tape, "loss_ce", probs, labels)?;
    let p = tape.data(probs);
    let mut value = 0.0;
    let mut grad = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        let py = p[i * c + y as usize];
        value -= clamped_ln(py);
        if py > LOG_EPS {
            grad[i * c + y as usize] = -1.0 / (n as f64 * py);
        }
    }
    tape.scalar_fn("loss_ce", probs, value / n as f64, grad)
}

/// Affinity terms of one binary problem: prediction `p`, target `y`.
/// Returns `(sum of clamped logs, d(sum)/dp, terms)`.
fn affinity(p: &[f64], y: &[bool], class: usize) -> (f64, Vec<f64>, AffinityTerms) {
    let (mut a, mut b, mut ny, mut q, mut nn) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(y) {
        b += pi;
        if yi {
            a += pi;
            ny += 1.0;
        } else {
            q += 1.0 - pi;
            nn += 1.0;
        }
    }
    let mut sum = 0.0;
    let mut grad = vec![0.0; p.len()];
    let mut terms = AffinityTerms {
        class,
        precision: None,
        recall: None,
        specificity: None,
    };
    if b > 0.0 {
        let prec = a / b;
        terms.precision = Some(prec);
        sum += clamped_ln(prec);
        if prec > LOG_EPS {
            for (g, &yi) in grad.iter_mut().zip(y) {
                *g += if yi { 1.0 / a } else { 0.0 } - 1.0 / b;
            }
        }
    }
    if ny > 0.0 {
        let rec = a / ny;
        terms.recall = Some(rec);
        sum += clamped_ln(rec);
        if rec > LOG_EPS {
            for (g, &yi) in grad.iter_mut().zip(y) {
                if yi {
                    *g += 1.0 / a;
                }
            }
        }
    }
    if nn > 0.0 {
        let spec = q / nn;
        terms.specificity = Some(spec);
        sum += clamped_ln(spec);
        if spec > LOG_EPS {
            for (g, &yi) in grad.iter_mut().zip(y) {
                if !yi {
                    *g -= 1.0 / q;
                }
            }
        }
    }
    (sum, grad, terms)
}

/// Scene-class affinity loss.
///
/// For each class present (some target voxel, or nonzero predicted mass),
/// `-(ln P + ln R + ln S)` averaged over present classes. A ratio with a
/// zero denominator is left out of its class's sum.
pub fn loss_scal(tape: &mut Tape, probs: Var, labels: &[u32], mode: ScalMode) -> Result<(Var, Vec<AffinityTerms>)> {
    let (n, c) = check(tape, "loss_scal", probs, labels)?;
    let p = tape.data(probs);
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    let mut all_terms = Vec::new();
    let mut pc = vec![0.0; n];
    let mut yc = vec![false; n];
    let classes: Vec<usize> = match mode {
        ScalMode::Geometric => vec![1],
        ScalMode::Semantic => (0..c).collect(),
    };
    // gradient chain for each class column: d(loss)/d(p[i, col]) = sign * g
    let mut present = Vec::new();
    for &class in &classes {
        let (col, sign) = match mode {
            ScalMode::Geometric => (0, -1.0),
            ScalMode::Semantic => (class, 1.0),
        };
        for i in 0..n {
            let pi = p[i * c + col];
            pc[i] = if mode == ScalMode::Geometric { 1.0 - pi } else { pi };
            yc[i] = match mode {
                ScalMode::Geometric => labels[i] != 0,
                ScalMode::Semantic => labels[i] as usize == class,
            };
        }
        let has_gt = yc.iter().any(|&y| y);
        let has_mass = pc.iter().any(|&x| x > 0.0);
        if !(has_gt || has_mass) {
            continue;
        }
        let (sum, g, terms) = affinity(&pc, &yc, class);
        total += sum;
        present.push((col, sign, g));
        all_terms.push(terms);
    }
    if present.is_empty() {
        return Err(Error::Degenerate("loss_scal: no class present".into()));
    }
    let k = present.len() as f64;
    for (col, sign, g) in present {
        for (i, gi) in g.iter().enumerate() {
            grad[i * c + col] -= sign * gi / k;
        }
    }
    let name = match mode {
        ScalMode::Geometric => "loss_scal_geo",
        ScalMode::Semantic => "loss_scal_sem",
    };
    let var = tape.scalar_fn(name, probs, -total / k, grad)?;
    Ok((var, all_terms))
}

/// `L_ce + L_geo + L_sem` and its breakdown.
pub fn total_loss(tape: &mut Tape, probs: Var, labels: &[u32]) -> Result<(Var, LossReport)> {
    let ce = loss_ce(tape, probs, labels)?;
    let (geo, geo_terms) = loss_scal(tape, probs, labels, ScalMode::Geometric)?;
    let (sem, sem_terms) = loss_scal(tape, probs, labels, ScalMode::Semantic)?;
    let partial = tape.add(ce, geo)?;
    let total = tape.add(partial, sem)?;
    let report = LossReport {
        l_ce: tape.value(ce).item(),
        l_geo: tape.value(geo).item(),
        l_sem: tape.value(sem).item(),
        l_total: tape.value(total).item(),
        geo_terms,
        sem_terms,
    };
    Ok((total, report))
}

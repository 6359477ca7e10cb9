//! Training objectives with analytic gradients: patch-level InfoNCE, the
//! geodesic angle distance and the log-scale plus geodesic regression loss.

use crate::error::{invalid, Error, Result};
use crate::featuregrid::{FeatureGrid, PatchIndex};

/// Distance of the clamped `acos` argument from +-1.
pub const ACOS_CLAMP: f64 = 1e-7;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn clamped_cos(x: f64) -> (f64, bool) {
    let lo = -1.0 + ACOS_CLAMP;
    let hi = 1.0 - ACOS_CLAMP;
    if x < lo {
        (lo, true)
    } else if x > hi {
        (hi, true)
    } else {
        (x, false)
    }
}

/// Angle between two in-plane rotations, in `[0, pi]`.
pub fn geodesic(alpha1: f64, alpha2: f64) -> f64 {
    let (s1, c1) = alpha1.sin_cos();
    let (s2, c2) = alpha2.sin_cos();
    clamped_cos(c1 * c2 + s1 * s2).0.acos()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InfoNceMode {
    /// Positive logit included in the softmax denominator.
    #[default]
    Standard,
    /// Denominator over negatives only. Unbounded below.
    Strict,
}

/// Query/template grids with ground-truth patch correspondences per pair.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub queries: Vec<FeatureGrid>,
    pub templates: Vec<FeatureGrid>,
    /// `(query patch, template patch)` positives for each pair.
    pub positives: Vec<Vec<(PatchIndex, PatchIndex)>>,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    /// Gradients shaped like each grid's `data()`.
    pub query_grads: Vec<Vec<f64>>,
    pub template_grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixLoss {
    pub value: f64,
    pub grad_q: Vec<Vec<f64>>,
    pub grad_t: Vec<Vec<f64>>,
}

/// InfoNCE over `P` positive pairs `(q[p], t[p])`: each query row is scored
/// against every template row, with the other rows acting as negatives.
pub fn infonce_matrix(q: &[Vec<f64>], t: &[Vec<f64>], temperature: f64, mode: InfoNceMode) -> Result<MatrixLoss> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if q.len() != t.len() {
        return Err(invalid(format!("{} queries for {} templates", q.len(), t.len())));
    }
    let n = q.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("{n} positives leave no negatives")));
    }
    let dim = q[0].len();
    if q.iter().chain(t).any(|v| v.len() != dim) {
        return Err(invalid("descriptor dimensions differ"));
    }
    let mut value = 0.0;
    let mut grad_q = vec![vec![0.0; dim]; n];
    let mut grad_t = vec![vec![0.0; dim]; n];
    for p in 0..n {
        let logits: Vec<f64> = t
            .iter()
            .map(|tr| q[p].iter().zip(tr).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let in_denominator = |r: usize| mode == InfoNceMode::Standard || r != p;
        let max = (0..n).filter(|&r| in_denominator(r)).map(|r| logits[r]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&r| in_denominator(r)).map(|r| (logits[r] - max).exp()).sum();
        value += max + z.ln() - logits[p];
        // d/dlogit_r = softmax_r - [r == p]
        for r in 0..n {
            let mut w = if in_denominator(r) {
                (logits[r] - max).exp() / z
            } else {
                0.0
            };
            if r == p {
                w -= 1.0;
            }
            if w == 0.0 {
                continue;
            }
            let w = w / temperature;
            for d in 0..dim {
                grad_q[p][d] += w * t[r][d];
                grad_t[r][d] += w * q[p][d];
            }
        }
    }
    Ok(MatrixLoss { value, grad_q, grad_t })
}

/// Patch-level InfoNCE over a batch. Negatives for a positive come from
/// every other positive in the batch, including other pairs.
pub fn infonce_loss(batch: &ContrastiveBatch, mode: InfoNceMode) -> Result<InfoNceOutput> {
    let k = batch.queries.len();
    if batch.templates.len() != k || batch.positives.len() != k {
        return Err(invalid(format!(
            "batch has {k} queries, {} templates and {} correspondence lists",
            batch.templates.len(),
            batch.positives.len()
        )));
    }
    let mut q = Vec::new();
    let mut t = Vec::new();
    let mut origin = Vec::new();
    for (pair, corrs) in batch.positives.iter().enumerate() {
        let (qg, tg) = (&batch.queries[pair], &batch.templates[pair]);
        if qg.dim() != tg.dim() {
            return Err(invalid(format!("pair {pair}: descriptor dims {} and {}", qg.dim(), tg.dim())));
        }
        if corrs.is_empty() {
            return Err(Error::DegenerateBatch(format!("pair {pair} has no positives")));
        }
        for &(i, j) in corrs {
            if !qg.contains(i) || !qg.is_masked(i) || !tg.contains(j) || !tg.is_masked(j) {
                return Err(invalid(format!(
                    "pair {pair}: positive ({}, {}) -> ({}, {}) not on both masks",
                    i.row, i.col, j.row, j.col
                )));
            }
            q.push(qg.descriptor(i).iter().map(|&v| v as f64).collect());
            t.push(tg.descriptor(j).iter().map(|&v| v as f64).collect());
            origin.push((pair, qg.cell(i), tg.cell(j)));
        }
    }
    let m = infonce_matrix(&q, &t, batch.temperature, mode)?;
    let mut query_grads: Vec<Vec<f64>> = batch.queries.iter().map(|g| vec![0.0; g.data().len()]).collect();
    let mut template_grads: Vec<Vec<f64>> = batch.templates.iter().map(|g| vec![0.0; g.data().len()]).collect();
    for (p, &(pair, qc, tc)) in origin.iter().enumerate() {
        let d = batch.queries[pair].dim();
        for (dst, g) in query_grads[pair][qc * d..(qc + 1) * d].iter_mut().zip(&m.grad_q[p]) {
            *dst += g;
        }
        for (dst, g) in template_grads[pair][tc * d..(tc + 1) * d].iter_mut().zip(&m.grad_t[p]) {
            *dst += g;
        }
    }
    Ok(InfoNceOutput {
        value: m.value,
        query_grads,
        template_grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleInplaneLoss {
    pub value: f64,
    pub grad_log_scale: Vec<f64>,
    pub grad_cos: Vec<f64>,
    pub grad_sin: Vec<f64>,
}

/// Loss on raw regressor outputs `(ln s, cos a, sin a)` per correspondence:
/// `(ln s - ln s*)^2 + acos(cos a cos a* + sin a sin a*)`. The angle pair is
/// used as given, without normalization.
pub fn scale_inplane_loss_raw(
    log_scales: &[f64],
    cos_sin: &[(f64, f64)],
    s_star: f64,
    alpha_star: f64,
) -> Result<ScaleInplaneLoss> {
    if !(s_star > 0.0) {
        return Err(invalid(format!("target scale {s_star} must be positive")));
    }
    if log_scales.len() != cos_sin.len() {
        return Err(invalid(format!(
            "{} scales for {} angles",
            log_scales.len(),
            cos_sin.len()
        )));
    }
    let ln_star = s_star.ln();
    let (ss, cs) = alpha_star.sin_cos();
    let mut out = ScaleInplaneLoss {
        value: 0.0,
        grad_log_scale: Vec::with_capacity(log_scales.len()),
        grad_cos: Vec::with_capacity(log_scales.len()),
        grad_sin: Vec::with_capacity(log_scales.len()),
    };
    for (&ls, &(c, s)) in log_scales.iter().zip(cos_sin) {
        let diff = ls - ln_star;
        let (x, clamped) = clamped_cos(c * cs + s * ss);
        out.value += diff * diff + x.acos();
        out.grad_log_scale.push(2.0 * diff);
        let dacos = if clamped { 0.0 } else { -1.0 / (1.0 - x * x).sqrt() };
        out.grad_cos.push(dacos * cs);
        out.grad_sin.push(dacos * ss);
    }
    Ok(out)
}

/// Same loss from predicted scales and angles.
pub fn scale_inplane_loss(s_pred: &[f64], alpha_pred: &[f64], s_star: f64, alpha_star: f64) -> Result<ScaleInplaneLoss> {
    if let Some(s) = s_pred.iter().find(|s| !(**s > 0.0)) {
        return Err(invalid(format!("predicted scale {s} must be positive")));
    }
    let logs: Vec<f64> = s_pred.iter().map(|s| s.ln()).collect();
    let cos_sin: Vec<(f64, f64)> = alpha_pred.iter().map(|a| (a.cos(), a.sin())).collect();
    scale_inplane_loss_raw(&logs, &cos_sin, s_star, alpha_star)
}

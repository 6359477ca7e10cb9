//! Single-correspondence hypotheses and exhaustive consensus scoring.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::weights::RegressorWeights;
use crate::error::{invalid, Error, Result};
use crate::featuregrid::{patch_center, PatchGeometry};
use crate::geometry::{kabsch2d, Affine2};
use crate::matching::Correspondence;
use crate::par::{self, Execution};

/// Inlier radius in processed pixels: one patch.
pub const DEFAULT_DELTA_PX: f64 = 14.0;
/// Upper bound on pairs tried by the two-correspondence estimator.
pub const DEFAULT_PAIR_CAP: usize = 20_000;

/// Regressed scale and in-plane angle for one correspondence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleInplane {
    pub scale: f64,
    pub alpha: f64,
}

/// A correspondence in processed-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMatch {
    pub template: Vector2<f64>,
    pub query: Vector2<f64>,
    pub score: f64,
}

impl PointMatch {
    pub fn from_correspondence(corr: &Correspondence, geom: &PatchGeometry) -> Result<Self> {
        Ok(Self {
            template: patch_center(corr.template_index, geom)?,
            query: patch_center(corr.query_index, geom)?,
            score: corr.score,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineHypothesis {
    pub transform: Affine2,
    /// Index of the correspondence the hypothesis was built from.
    pub source: usize,
    /// Second correspondence for two-point hypotheses.
    pub partner: Option<usize>,
    /// Indices of correspondences within `delta`, ascending.
    pub inliers: Vec<usize>,
    pub mean_inlier_score: f64,
}

/// Runs both regressor heads on a `[query; template]` descriptor pair.
pub fn predict_scale_inplane(weights: &RegressorWeights, feat_q: &[f32], feat_t: &[f32]) -> Result<ScaleInplane> {
    let d = weights.descriptor_dim();
    if feat_q.len() != d || feat_t.len() != d {
        return Err(Error::InvalidWeights(format!(
            "regressor expects {d}-dim descriptors, got {} and {}",
            feat_q.len(),
            feat_t.len()
        )));
    }
    let input: Vec<f64> = feat_q.iter().chain(feat_t).map(|&v| v as f64).collect();
    let log_scale = weights.scale_head().forward(&input)?[0];
    let cs = weights.inplane_head().forward(&input)?;
    let norm = cs[0].hypot(cs[1]);
    if !(norm >= 1e-6) {
        return Err(Error::UnreliableAngle(norm));
    }
    Ok(ScaleInplane {
        scale: log_scale.exp(),
        alpha: (cs[1] / norm).atan2(cs[0] / norm),
    })
}

/// Similarity with the given scale and angle that maps `p_t` onto `p_q`.
pub fn hypothesis_from_points(p_t: &Vector2<f64>, p_q: &Vector2<f64>, scale: f64, alpha: f64) -> Result<Affine2> {
    let (s, c) = alpha.sin_cos();
    let t = p_q - Matrix2::new(c, -s, s, c) * p_t * scale;
    Affine2::new(scale, alpha, t)
}

pub fn hypothesis_from_correspondence(corr: &Correspondence, scale: f64, alpha: f64, geom: &PatchGeometry) -> Result<Affine2> {
    let m = PointMatch::from_correspondence(corr, geom)?;
    hypothesis_from_points(&m.template, &m.query, scale, alpha)
}

/// Inlier count and mean inlier score of a transform.
pub fn consensus(transform: &Affine2, matches: &[PointMatch], delta: f64) -> (usize, f64) {
    let mut count = 0;
    let mut total = 0.0;
    for m in matches {
        if (transform.apply(&m.template) - m.query).norm() <= delta {
            count += 1;
            total += m.score;
        }
    }
    (count, if count > 0 { total / count as f64 } else { 0.0 })
}

fn inlier_indices(transform: &Affine2, matches: &[PointMatch], delta: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| (transform.apply(&m.template) - m.query).norm() <= delta)
        .map(|(i, _)| i)
        .collect()
}

struct Scored {
    order: usize,
    transform: Affine2,
    source: usize,
    partner: Option<usize>,
    count: usize,
    mean: f64,
}

/// More inliers, then higher mean inlier score, then earlier hypothesis.
fn better(a: &Scored, b: &Scored) -> Ordering {
    a.count
        .cmp(&b.count)
        .then_with(|| a.mean.total_cmp(&b.mean))
        .then_with(|| b.order.cmp(&a.order))
}

fn pick_best(scored: Vec<Option<Scored>>, matches: &[PointMatch], delta: f64) -> Result<AffineHypothesis> {
    let best = scored
        .into_iter()
        .flatten()
        .max_by(better)
        .ok_or(Error::NoCorrespondences)?;
    Ok(AffineHypothesis {
        transform: best.transform,
        source: best.source,
        partner: best.partner,
        inliers: inlier_indices(&best.transform, matches, delta),
        mean_inlier_score: best.mean,
    })
}

/// Builds one hypothesis per correspondence from its prediction and keeps the
/// one with the largest consensus. Correspondences without a prediction
/// still vote as inliers.
pub fn ransac_affine_points(
    matches: &[PointMatch],
    predictions: &[Option<ScaleInplane>],
    delta: f64,
    exec: Execution,
) -> Result<AffineHypothesis> {
    if matches.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    if predictions.len() != matches.len() {
        return Err(invalid(format!(
            "{} predictions for {} correspondences",
            predictions.len(),
            matches.len()
        )));
    }
    let scored = par::map_range(exec, matches.len(), |i| {
        let p = predictions[i]?;
        let m = &matches[i];
        let transform = hypothesis_from_points(&m.template, &m.query, p.scale, p.alpha).ok()?;
        let (count, mean) = consensus(&transform, matches, delta);
        Some(Scored {
            order: i,
            transform,
            source: i,
            partner: None,
            count,
            mean,
        })
    });
    pick_best(scored, matches, delta)
}

pub fn ransac_affine(
    correspondences: &[Correspondence],
    predictions: &[Option<ScaleInplane>],
    delta: f64,
    geom: &PatchGeometry,
    exec: Execution,
) -> Result<AffineHypothesis> {
    let matches = correspondences
        .iter()
        .map(|c| PointMatch::from_correspondence(c, geom))
        .collect::<Result<Vec<_>>>()?;
    ransac_affine_points(&matches, predictions, delta, exec)
}

/// Pairs `(i, j)`, `i < j`, in lexicographic order, or a seeded sample of
/// `cap` of them when there are more.
pub fn correspondence_pairs(n: usize, cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if pairs.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(cap);
    }
    pairs
}

/// Two-correspondence variant: each pair defines a similarity through the
/// 2D Kabsch solution. Degenerate pairs are skipped.
pub fn ransac_kabsch2_points(
    matches: &[PointMatch],
    delta: f64,
    pair_cap: usize,
    seed: u64,
    exec: Execution,
) -> Result<AffineHypothesis> {
    if matches.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: matches.len(),
        });
    }
    let pairs = correspondence_pairs(matches.len(), pair_cap, seed);
    let scored = par::map_range(exec, pairs.len(), |order| {
        let (i, j) = pairs[order];
        let (a, b) = (&matches[i], &matches[j]);
        let transform = kabsch2d(&a.template, &b.template, &a.query, &b.query).ok()?;
        let (count, mean) = consensus(&transform, matches, delta);
        Some(Scored {
            order,
            transform,
            source: i,
            partner: Some(j),
            count,
            mean,
        })
    });
    pick_best(scored, matches, delta)
}

pub fn ransac_kabsch2(
    correspondences: &[Correspondence],
    delta: f64,
    geom: &PatchGeometry,
    pair_cap: usize,
    seed: u64,
    exec: Execution,
) -> Result<AffineHypothesis> {
    let matches = correspondences
        .iter()
        .map(|c| PointMatch::from_correspondence(c, geom))
        .collect::<Result<Vec<_>>>()?;
    ransac_kabsch2_points(&matches, delta, pair_cap, seed, exec)
}

//! Scale/in-plane regression, 2D similarity hypotheses and pose selection
//! over retrieved templates.

mod mlp;
mod ransac;
mod weights;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

pub use mlp::{mlp_forward, DenseLayer, Mlp};
pub use ransac::{
    consensus, correspondence_pairs, hypothesis_from_correspondence, hypothesis_from_points, predict_scale_inplane,
    ransac_affine, ransac_affine_points, ransac_kabsch2, ransac_kabsch2_points, AffineHypothesis, PointMatch,
    ScaleInplane, DEFAULT_DELTA_PX, DEFAULT_PAIR_CAP,
};
pub use weights::{RegressorWeights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::{invalid, Error, Result};
use crate::featuregrid::{FeatureGrid, PatchGeometry};
use crate::geometry::{compose_template_to_query, recover_pose, Affine2, CameraIntrinsics, Pose6D, Rotation3};
use crate::matching::{Correspondence, RetrievalResult};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EstimatorMode {
    /// One hypothesis per correspondence from regressed scale and angle.
    #[default]
    Single,
    /// One hypothesis per correspondence pair via 2D Kabsch.
    Kabsch2,
}

impl FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "kabsch2" | "kabsch" => Ok(Self::Kabsch2),
            other => Err(invalid(format!("unknown estimator mode {other:?}"))),
        }
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Kabsch2 => "kabsch2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub delta_px: f64,
    pub pair_cap: usize,
    pub pair_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Single,
            delta_px: DEFAULT_DELTA_PX,
            pair_cap: DEFAULT_PAIR_CAP,
            pair_seed: 0,
        }
    }
}

/// What pose recovery needs to know about a template.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemplateCamera {
    /// Out-of-plane rotation the template was rendered with.
    pub r_ae: Rotation3,
    /// Original image to processed crop.
    pub crop: Affine2,
    /// Object depth in the template camera, mm.
    pub tz: f64,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryCamera {
    pub crop: Affine2,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub template_id: usize,
    pub similarity: f64,
    pub hypothesis: AffineHypothesis,
    pub pose: Pose6D,
}

/// Regressor predictions for each correspondence. Failures (for instance an
/// unreliable angle) become `None` so the correspondence still votes.
pub fn predict_correspondences(
    weights: &RegressorWeights,
    query_variant: &FeatureGrid,
    template_variant: &FeatureGrid,
    correspondences: &[Correspondence],
) -> Vec<Option<ScaleInplane>> {
    correspondences
        .iter()
        .map(|c| {
            if !query_variant.contains(c.query_index) || !template_variant.contains(c.template_index) {
                return None;
            }
            let q = query_variant.descriptor(c.query_index);
            let t = template_variant.descriptor(c.template_index);
            match predict_scale_inplane(weights, q, t) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::debug!("prediction skipped: {e}");
                    None
                }
            }
        })
        .collect()
}

/// Runs the configured estimator on one template's correspondences.
pub fn estimate_transform(
    correspondences: &[Correspondence],
    predictions: &[Option<ScaleInplane>],
    config: &EstimatorConfig,
    geom: &PatchGeometry,
) -> Result<AffineHypothesis> {
    match config.mode {
        EstimatorMode::Single => {
            ransac_affine(correspondences, predictions, config.delta_px, geom, Execution::Sequential)
        }
        EstimatorMode::Kabsch2 => ransac_kabsch2(
            correspondences,
            config.delta_px,
            geom,
            config.pair_cap,
            config.pair_seed,
            Execution::Sequential,
        ),
    }
}

/// Estimates a transform for every retrieved template and keeps the one
/// with the most inliers (ties: higher similarity, then smaller id).
/// Returns the winning position in `candidates`. `predictions[k]` belongs to
/// `candidates[k]` and may be omitted in Kabsch mode.
pub fn select_hypothesis(
    candidates: &[RetrievalResult],
    predictions: &[Vec<Option<ScaleInplane>>],
    config: &EstimatorConfig,
    geom: &PatchGeometry,
    exec: Execution,
) -> Result<(usize, AffineHypothesis)> {
    if candidates.is_empty() {
        return Err(invalid("no candidate templates"));
    }
    if config.mode == EstimatorMode::Single && predictions.len() != candidates.len() {
        return Err(invalid(format!(
            "{} prediction lists for {} candidates",
            predictions.len(),
            candidates.len()
        )));
    }
    let none: Vec<Option<ScaleInplane>> = Vec::new();
    let outcomes = par::map_range(exec, candidates.len(), |k| {
        let preds = predictions.get(k).unwrap_or(&none);
        estimate_transform(&candidates[k].correspondences, preds, config, geom)
    });

    let mut diagnostics = Vec::new();
    let mut best: Option<(usize, AffineHypothesis)> = None;
    for (k, outcome) in outcomes.into_iter().enumerate() {
        let cand = &candidates[k];
        match outcome {
            Ok(h) => {
                let replace = match &best {
                    None => true,
                    Some((b, bh)) => rank(cand, &h, &candidates[*b], bh) == Ordering::Greater,
                };
                if replace {
                    best = Some((k, h));
                }
            }
            Err(e) => diagnostics.push(format!("template {}: {e}", cand.template_id)),
        }
    }
    best.ok_or(Error::EstimationFailed { diagnostics })
}

/// Lifts a processed-crop hypothesis to a 6D pose.
pub fn pose_from_hypothesis(query: &QueryCamera, template: &TemplateCamera, hypothesis: &AffineHypothesis) -> Result<Pose6D> {
    let m = compose_template_to_query(&template.crop, &hypothesis.transform, &query.crop);
    recover_pose(
        &template.r_ae,
        hypothesis.transform.alpha(),
        &m,
        &template.intrinsics.principal_point(),
        template.tz,
        &template.intrinsics,
        &query.intrinsics,
    )
}

/// [`select_hypothesis`] followed by [`pose_from_hypothesis`]; `templates`
/// is indexed by template id.
pub fn select_pose(
    query: &QueryCamera,
    candidates: &[RetrievalResult],
    predictions: &[Vec<Option<ScaleInplane>>],
    templates: &[TemplateCamera],
    config: &EstimatorConfig,
    geom: &PatchGeometry,
    exec: Execution,
) -> Result<PoseEstimate> {
    let (k, hypothesis) = select_hypothesis(candidates, predictions, config, geom, exec)?;
    let cand = &candidates[k];
    let template = templates.get(cand.template_id).ok_or_else(|| {
        invalid(format!(
            "template {} outside the {} known templates",
            cand.template_id,
            templates.len()
        ))
    })?;
    let pose = pose_from_hypothesis(query, template, &hypothesis)?;
    Ok(PoseEstimate {
        template_id: cand.template_id,
        similarity: cand.similarity,
        hypothesis,
        pose,
    })
}

fn rank(a: &RetrievalResult, ha: &AffineHypothesis, b: &RetrievalResult, hb: &AffineHypothesis) -> Ordering {
    ha.inliers
        .len()
        .cmp(&hb.inliers.len())
        .then_with(|| a.similarity.total_cmp(&b.similarity))
        .then_with(|| b.template_id.cmp(&a.template_id))
}

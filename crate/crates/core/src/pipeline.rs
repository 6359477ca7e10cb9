//! Per-detection inference: retrieve, estimate, recover, and write
//! BOP-style CSV rows.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::config::Config;
use crate::error::{invalid, Error, Result};
use crate::estimator::{
    pose_from_hypothesis, predict_correspondences, select_hypothesis, EstimatorMode, PoseEstimate, QueryCamera,
    RegressorWeights,
};
use crate::featuregrid::{CropTransform, FeatureGrid};
use crate::geometry::{CameraIntrinsics, Pose6D, Rotation3};
use crate::manifest::{load_grid, read_json, QueryManifest};
use crate::par::{self, Execution};
use crate::store::TemplateStore;

pub const BOP_HEADER: &str = "scene_id,im_id,obj_id,score,R,t,time";

/// One segmented detection, already cropped and featurized.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryObservation {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub invariant: FeatureGrid,
    pub variant: FeatureGrid,
    pub crop: CropTransform,
    pub intrinsics: CameraIntrinsics,
}

impl QueryObservation {
    pub fn camera(&self) -> QueryCamera {
        QueryCamera {
            crop: *self.crop.affine(),
            intrinsics: self.intrinsics,
        }
    }
}

/// Reads a query manifest and its grids; paths resolve against the
/// manifest's directory.
pub fn load_queries(manifest_path: &Path) -> Result<Vec<QueryObservation>> {
    let manifest: QueryManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .detections
        .iter()
        .map(|d| {
            Ok(QueryObservation {
                scene_id: d.scene_id,
                im_id: d.im_id,
                obj_id: d.obj_id,
                invariant: load_grid(base, &d.invariant)?,
                variant: load_grid(base, &d.variant)?,
                crop: d.crop.to_crop()?,
                intrinsics: d.intrinsics.to_intrinsics()?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub retrieval: Duration,
    pub estimation: Duration,
    pub pose: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.retrieval + self.estimation + self.pose
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    /// Winning inlier count over the query's masked patch count; 0 on
    /// failure.
    pub score: f64,
    pub estimate: std::result::Result<PoseEstimate, String>,
    pub timings: StageTimings,
}

impl DetectionResult {
    pub fn pose(&self) -> Option<&Pose6D> {
        self.estimate.as_ref().ok().map(|e| &e.pose)
    }
}

/// Shared read-only state for inference over one object.
pub struct Pipeline<'a> {
    store: &'a TemplateStore,
    weights: Option<&'a RegressorWeights>,
    config: Config,
}

impl<'a> Pipeline<'a> {
    /// Weights are required in single-correspondence mode.
    pub fn new(store: &'a TemplateStore, weights: Option<&'a RegressorWeights>, config: Config) -> Result<Self> {
        config.validate()?;
        if config.estimator_mode == EstimatorMode::Single {
            let w = weights.ok_or_else(|| invalid("single-correspondence mode needs regressor weights"))?;
            let var_dim = store.templates()[0].variant.dim();
            if w.descriptor_dim() != var_dim {
                return Err(Error::InvalidWeights(format!(
                    "weights expect {}-dim variant descriptors, store has {var_dim}",
                    w.descriptor_dim()
                )));
            }
        }
        Ok(Self { store, weights, config })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Runs one detection. Failures are reported in the result, not raised.
    pub fn infer_one(&self, query: &QueryObservation, exec: Execution) -> DetectionResult {
        let mut timings = StageTimings::default();
        let estimate = self.run(query, exec, &mut timings);
        let score = match &estimate {
            Ok(e) => e.hypothesis.inliers.len() as f64 / query.invariant.mask_count().max(1) as f64,
            Err(_) => 0.0,
        };
        let estimate = estimate.map_err(|e| {
            log::warn!("detection scene {} image {} object {}: {e}", query.scene_id, query.im_id, query.obj_id);
            e.to_string()
        });
        DetectionResult {
            scene_id: query.scene_id,
            im_id: query.im_id,
            obj_id: query.obj_id,
            score,
            estimate,
            timings,
        }
    }

    fn run(&self, query: &QueryObservation, exec: Execution, timings: &mut StageTimings) -> Result<PoseEstimate> {
        if query.obj_id != self.store.object_id() {
            return Err(invalid(format!(
                "detection is for object {}, store holds object {}",
                query.obj_id,
                self.store.object_id()
            )));
        }
        let geom = self.store.geometry();
        if !query.invariant.matches_geometry(geom) || !query.variant.matches_geometry(geom) {
            return Err(invalid("query grids do not match the store geometry"));
        }
        let start = Instant::now();
        let retrieval =
            self.store
                .index()
                .retrieve_topk(&query.invariant, self.config.top_k, self.config.similarity_threshold, exec)?;
        timings.retrieval = start.elapsed();

        let start = Instant::now();
        let templates = self.store.templates();
        let predictions: Vec<_> = match (self.config.estimator_mode, self.weights) {
            (EstimatorMode::Single, Some(w)) => retrieval
                .results
                .iter()
                .map(|r| predict_correspondences(w, &query.variant, &templates[r.template_id].variant, &r.correspondences))
                .collect(),
            _ => Vec::new(),
        };
        let selected = select_hypothesis(&retrieval.results, &predictions, &self.config.estimator(), geom, exec);
        timings.estimation = start.elapsed();
        let (k, hypothesis) = selected?;

        let start = Instant::now();
        let cand = &retrieval.results[k];
        let pose = pose_from_hypothesis(&query.camera(), &templates[cand.template_id].camera(), &hypothesis);
        timings.pose = start.elapsed();
        Ok(PoseEstimate {
            template_id: cand.template_id,
            similarity: cand.similarity,
            hypothesis,
            pose: pose?,
        })
    }

    /// Runs every detection; output order follows input order. With
    /// parallel execution detections are spread over threads and each runs
    /// sequentially inside.
    pub fn infer_batch(&self, queries: &[QueryObservation], exec: Execution) -> Vec<DetectionResult> {
        par::map_slice(exec, queries, |q| self.infer_one(q, Execution::Sequential))
    }
}

/// BOP CSV; `with_time = false` writes `-1` in the time column so outputs
/// can be compared byte for byte.
pub fn bop_csv(results: &[DetectionResult], with_time: bool) -> String {
    let mut out = String::from(BOP_HEADER);
    out.push('\n');
    for r in results {
        let pose = r.pose().copied().unwrap_or_else(|| Pose6D::new(Rotation3::identity(), nalgebra::Vector3::zeros()));
        let rot = pose.rotation.to_row_array().map(|v| format!("{v:.9}")).join(" ");
        let t = pose.translation.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
        let time = if with_time {
            format!("{:.6}", r.timings.total().as_secs_f64())
        } else {
            "-1".to_string()
        };
        let _ = writeln!(out, "{},{},{},{:.6},{},{},{}", r.scene_id, r.im_id, r.obj_id, r.score, rot, t, time);
    }
    out
}

/// A parsed BOP CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct BopRow {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub score: f64,
    pub pose: Pose6D,
    pub time: f64,
}

pub fn parse_bop_csv(text: &str) -> Result<Vec<BopRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("scene_id")) {
            continue;
        }
        let bad = |what: &str| invalid(format!("CSV line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(&format!("expected 7 fields, got {}", fields.len())));
        }
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad number {v:?}"))))
                .collect()
        };
        let r = floats(fields[4])?;
        let t = floats(fields[5])?;
        if r.len() != 9 || t.len() != 3 {
            return Err(bad("R needs 9 values and t 3"));
        }
        let parse_u = |s: &str| s.trim().parse::<u32>().map_err(|_| bad(&format!("bad id {s:?}")));
        rows.push(BopRow {
            scene_id: parse_u(fields[0])?,
            im_id: parse_u(fields[1])?,
            obj_id: parse_u(fields[2])?,
            score: fields[3].trim().parse().map_err(|_| bad("bad score"))?,
            pose: Pose6D::new(
                Rotation3::from_matrix_lenient(nalgebra::Matrix3::from_row_slice(&r), 1e-6)?,
                nalgebra::Vector3::new(t[0], t[1], t[2]),
            ),
            time: fields[6].trim().parse().map_err(|_| bad("bad time"))?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencySummary {
    pub stage: &'static str,
    pub n: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(stage: &'static str, samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pick = |q: f64| {
            if ms.is_empty() {
                0.0
            } else {
                ms[((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1]
            }
        };
        Self {
            stage,
            n: ms.len(),
            p50_ms: pick(0.5),
            p90_ms: pick(0.9),
            p99_ms: pick(0.99),
            mean_ms: if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 },
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "stage": self.stage,
            "n": self.n,
            "p50_ms": self.p50_ms,
            "p90_ms": self.p90_ms,
            "p99_ms": self.p99_ms,
            "mean_ms": self.mean_ms,
        })
        .to_string()
    }
}

/// Times `repeats` passes over `queries`, each detection run with `exec`
/// inside. Returns per-stage summaries and the poses of the last pass.
pub fn bench(
    pipeline: &Pipeline<'_>,
    queries: &[QueryObservation],
    repeats: usize,
    exec: Execution,
) -> Result<(Vec<LatencySummary>, Vec<DetectionResult>)> {
    if repeats == 0 {
        return Err(invalid("repeats must be at least 1"));
    }
    let mut retrieval = Vec::new();
    let mut estimation = Vec::new();
    let mut pose = Vec::new();
    let mut total = Vec::new();
    let mut last = Vec::new();
    for _ in 0..repeats {
        last = queries.iter().map(|q| pipeline.infer_one(q, exec)).collect::<Vec<_>>();
        for r in &last {
            retrieval.push(r.timings.retrieval);
            estimation.push(r.timings.estimation);
            pose.push(r.timings.pose);
            total.push(r.timings.total());
        }
    }
    Ok((
        vec![
            LatencySummary::from_samples("retrieval", &retrieval),
            LatencySummary::from_samples("estimation", &estimation),
            LatencySummary::from_samples("pose", &pose),
            LatencySummary::from_samples("total", &total),
        ],
        last,
    ))
}

/// Queries built from the store's own templates, cycling through the
/// viewpoints with a fixed stride. Used when no query set is given.
pub fn queries_from_templates(store: &TemplateStore, n: usize) -> Vec<QueryObservation> {
    let templates = store.templates();
    let stride = 37;
    (0..n)
        .map(|i| {
            let t = &templates[(i * stride) % templates.len()];
            QueryObservation {
                scene_id: 0,
                im_id: i as u32,
                obj_id: store.object_id(),
                invariant: t.invariant.clone(),
                variant: t.variant.clone(),
                crop: t.crop,
                intrinsics: t.intrinsics,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let s: Vec<Duration> = (1..=100).map(|k| Duration::from_millis(k)).collect();
        let l = LatencySummary::from_samples("x", &s);
        assert_eq!((l.p50_ms, l.p90_ms, l.p99_ms), (50.0, 90.0, 99.0));
        assert!((l.mean_ms - 50.5).abs() < 1e-9);
        assert!(l.to_json_line().starts_with("{\""));
    }

    #[test]
    fn empty_csv_has_header_only() {
        assert_eq!(bop_csv(&[], true), format!("{BOP_HEADER}\n"));
        assert!(parse_bop_csv(&bop_csv(&[], true)).unwrap().is_empty());
    }
}

//! JSON manifests exchanged with the feature exporter: template directories
//! for onboarding and query lists for inference. Grid paths are relative to
//! the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::{DetectionRecord, Mask, ObjectModel};
use crate::featuregrid::{read_grid, CropTransform, FeatureGrid};
use crate::geometry::{CameraIntrinsics, Pose6D, Rotation3};
use crate::gt_corr::{DepthMap, DepthView};
use crate::pipeline::BopRow;

pub const TEMPLATE_MANIFEST: &str = "templates.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CropRecord {
    pub fn to_crop(&self) -> Result<CropTransform> {
        CropTransform::new(self.scale, nalgebra::Vector2::new(self.tx, self.ty))
    }
}

impl From<&CropTransform> for CropRecord {
    fn from(c: &CropTransform) -> Self {
        let t = c.translation();
        Self {
            scale: c.scale(),
            tx: t.x,
            ty: t.y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl IntrinsicsRecord {
    pub fn to_intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

impl From<&CameraIntrinsics> for IntrinsicsRecord {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    /// Index into the icosphere viewpoint set.
    pub viewpoint: usize,
    pub invariant: PathBuf,
    pub variant: PathBuf,
    pub crop: CropRecord,
    /// Object depth in the template camera, mm.
    pub tz: f64,
    pub intrinsics: IntrinsicsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub object_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdivisions: Option<u32>,
    pub templates: Vec<TemplateEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub invariant: PathBuf,
    pub variant: PathBuf,
    pub crop: CropRecord,
    pub intrinsics: IntrinsicsRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryManifest {
    pub detections: Vec<QueryEntry>,
}

/// Ground truth for one detection, for evaluation. Masks are run lengths
/// over the row-major image raster, starting with background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    /// Object-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    /// Translation, mm.
    pub translation: [f64; 3],
    pub intrinsics: IntrinsicsRecord,
    pub height: usize,
    pub width: usize,
    pub gt_mask: Vec<usize>,
    pub pred_mask: Vec<usize>,
}

fn pose_from_arrays(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Pose6D> {
    Ok(Pose6D::new(
        Rotation3::from_matrix_lenient(Matrix3::from_row_slice(rotation), 1e-6)?,
        Vector3::from_column_slice(translation),
    ))
}

impl GroundTruthEntry {
    pub fn pose(&self) -> Result<Pose6D> {
        pose_from_arrays(&self.rotation, &self.translation)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub detections: Vec<GroundTruthEntry>,
}

impl GroundTruth {
    /// Pairs predictions with ground truth by `(scene_id, im_id, obj_id)`.
    /// Repeated keys pair up in file order. Every ground-truth entry needs a
    /// prediction.
    pub fn records(&self, predictions: &[BopRow]) -> Result<Vec<DetectionRecord>> {
        let mut by_key: BTreeMap<(u32, u32, u32), std::collections::VecDeque<&BopRow>> = BTreeMap::new();
        for p in predictions {
            by_key.entry((p.scene_id, p.im_id, p.obj_id)).or_default().push_back(p);
        }
        self.detections
            .iter()
            .map(|g| {
                let key = (g.scene_id, g.im_id, g.obj_id);
                let pred = by_key.get_mut(&key).and_then(|q| q.pop_front()).ok_or_else(|| {
                    invalid(format!("no prediction for scene {} image {} object {}", key.0, key.1, key.2))
                })?;
                Ok(DetectionRecord {
                    scene_id: g.scene_id,
                    im_id: g.im_id,
                    obj_id: g.obj_id,
                    pred_mask: Mask::from_rle(g.height, g.width, &g.pred_mask)?,
                    gt_mask: Mask::from_rle(g.height, g.width, &g.gt_mask)?,
                    pred_pose: pred.pose,
                    gt_pose: g.pose()?,
                    score: pred.score,
                    intrinsics: g.intrinsics.to_intrinsics()?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub obj_id: u32,
    /// Points in the object frame, mm.
    pub points: Vec<[f64; 3]>,
    /// Symmetry rotations, row-major. The identity may be omitted.
    #[serde(default)]
    pub symmetries: Vec<[f64; 9]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub models: Vec<ModelEntry>,
}

impl ModelSet {
    pub fn objects(&self) -> Result<BTreeMap<u32, ObjectModel>> {
        let mut out = BTreeMap::new();
        for m in &self.models {
            let symmetries = m
                .symmetries
                .iter()
                .map(|r| Rotation3::from_matrix_lenient(Matrix3::from_row_slice(r), 1e-6))
                .collect::<Result<Vec<_>>>()?;
            let points = m.points.iter().map(|p| Vector3::from_column_slice(p)).collect();
            if out.insert(m.obj_id, ObjectModel::new(points, symmetries)?).is_some() {
                return Err(invalid(format!("object {} listed twice", m.obj_id)));
            }
        }
        Ok(out)
    }
}

/// One processed crop with depth for correspondence generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthViewEntry {
    /// `GPDP` raster of the processed crop.
    pub depth: PathBuf,
    /// Intrinsics of the processed crop.
    pub intrinsics: IntrinsicsRecord,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Patch mask, row-major over the grid.
    pub mask: Vec<bool>,
}

impl DepthViewEntry {
    pub fn load(&self, base: &Path) -> Result<DepthView> {
        let file = std::fs::File::open(base.join(&self.depth))?;
        Ok(DepthView {
            depth: DepthMap::read(std::io::BufReader::new(file))?,
            intrinsics: self.intrinsics.to_intrinsics()?,
            pose: pose_from_arrays(&self.rotation, &self.translation)?,
            mask: self.mask.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPairEntry {
    pub source: DepthViewEntry,
    pub target: DepthViewEntry,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthPairManifest {
    pub pairs: Vec<DepthPairEntry>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn load_grid(base: &Path, rel: &Path) -> Result<FeatureGrid> {
    let file = std::fs::File::open(base.join(rel))?;
    read_grid(std::io::BufReader::new(file))
}

//! Symmetry-aware pose errors, average recall and the segmentation
//! robustness table.
//!
//! Reported AR averages MSSD and MSPD recalls only (no VSD), so it is not
//! the full BOP score.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D, Rotation3};
use crate::par::{self, Execution};

/// Object points (mm, object frame) and the rotations under which the
/// object looks the same.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    points: Vec<Vector3<f64>>,
    symmetries: Vec<Rotation3>,
    diameter: f64,
}

impl ObjectModel {
    /// The identity is added to `symmetries` when missing.
    pub fn new(points: Vec<Vector3<f64>>, mut symmetries: Vec<Rotation3>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidModel(format!("{} points, need at least 4", points.len())));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidModel("non-finite model point".into()));
        }
        if !symmetries.iter().any(|s| s.angle_to(&Rotation3::identity()) < 1e-9) {
            symmetries.insert(0, Rotation3::identity());
        }
        let mut diameter: f64 = 0.0;
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        Ok(Self {
            points,
            symmetries,
            diameter,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn symmetries(&self) -> &[Rotation3] {
        &self.symmetries
    }

    /// Largest distance between two model points.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }
}

/// Rotations about `axis` in `steps` equal increments, identity first.
pub fn discretize_continuous_symmetry(axis: &Vector3<f64>, steps: usize) -> Vec<Rotation3> {
    (0..steps)
        .map(|k| Rotation3::from_axis_angle(axis, std::f64::consts::TAU * k as f64 / steps as f64))
        .collect()
}

/// Maximum symmetry-aware surface distance, mm.
pub fn mssd(pred: &Pose6D, gt: &Pose6D, model: &ObjectModel) -> Result<f64> {
    if model.points.is_empty() {
        return Err(Error::InvalidModel("empty point set".into()));
    }
    let mut best = f64::INFINITY;
    for sym in &model.symmetries {
        let g = gt.rotation.compose(sym);
        let worst = model
            .points
            .iter()
            .map(|x| (pred.transform(x) - (g.rotate(x) + gt.translation)).norm())
            .fold(0.0, f64::max);
        best = best.min(worst);
    }
    Ok(best)
}

/// Maximum symmetry-aware projection distance, pixels.
pub fn mspd(pred: &Pose6D, gt: &Pose6D, model: &ObjectModel, k: &CameraIntrinsics) -> Result<f64> {
    if model.points.is_empty() {
        return Err(Error::InvalidModel("empty point set".into()));
    }
    let project = |index: usize, p: Vector3<f64>| {
        if p.z > 0.0 {
            Ok(k.project(&p))
        } else {
            Err(Error::BehindCamera { index, depth: p.z })
        }
    };
    let pred_px = model
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| project(i, pred.transform(x)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = f64::INFINITY;
    for sym in &model.symmetries {
        let g = gt.rotation.compose(sym);
        let mut worst: f64 = 0.0;
        for (i, (x, p)) in model.points.iter().zip(&pred_px).enumerate() {
            let q = project(i, g.rotate(x) + gt.translation)?;
            worst = worst.max((p - q).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Mean over thresholds of the fraction of errors strictly below each.
pub fn recall_curve(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(invalid("no recall thresholds"));
    }
    if errors.is_empty() {
        return Ok(0.0);
    }
    let n = errors.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|&th| errors.iter().filter(|&&e| e < th).count() as f64 / n)
        .sum();
    Ok(total / thresholds.len() as f64)
}

/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(invalid(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Run lengths over the row-major raster, starting with a run of zeros
    /// (possibly empty) and alternating.
    pub fn from_rle(height: usize, width: usize, counts: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for (k, &n) in counts.iter().enumerate() {
            bits.extend(std::iter::repeat(k % 2 == 1).take(n));
        }
        if bits.len() != height * width {
            return Err(invalid(format!(
                "run lengths cover {} pixels, mask has {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn to_rle(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                current = b;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(invalid(format!(
            "mask sizes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub pred_mask: Mask,
    pub gt_mask: Mask,
    pub pred_pose: Pose6D,
    pub gt_pose: Pose6D,
    pub score: f64,
    pub intrinsics: CameraIntrinsics,
}

/// Recall thresholds: MSSD as fractions of the object diameter, MSPD as
/// multiples of `r = image diagonal / 640` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ArThresholds {
    pub mssd_fractions: Vec<f64>,
    pub mspd_multiples: Vec<f64>,
}

impl Default for ArThresholds {
    fn default() -> Self {
        Self {
            mssd_fractions: (1..=10).map(|k| 0.05 * k as f64).collect(),
            mspd_multiples: (1..=10).map(|k| 5.0 * k as f64).collect(),
        }
    }
}

/// Per-record errors normalised by their threshold unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordErrors {
    pub iou: f64,
    pub mssd_mm: f64,
    pub mspd_px: f64,
    pub mssd_norm: f64,
    pub mspd_norm: f64,
}

pub fn record_errors(record: &DetectionRecord, model: &ObjectModel) -> Result<RecordErrors> {
    let iou = mask_iou(&record.pred_mask, &record.gt_mask)?;
    let mssd_mm = mssd(&record.pred_pose, &record.gt_pose, model)?;
    let mspd_px = match mspd(&record.pred_pose, &record.gt_pose, model, &record.intrinsics) {
        Ok(v) => v,
        Err(Error::BehindCamera { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let (h, w) = (record.gt_mask.height as f64, record.gt_mask.width as f64);
    let r = h.hypot(w) / 640.0;
    Ok(RecordErrors {
        iou,
        mssd_mm,
        mspd_px,
        mssd_norm: mssd_mm / model.diameter(),
        mspd_norm: mspd_px / r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub iou_threshold: f64,
    pub n_records: usize,
    /// `None` when no record falls below the threshold.
    pub ar_mssd: Option<f64>,
    pub ar_mspd: Option<f64>,
    pub ar_mean: Option<f64>,
}

/// Average recall restricted to records whose mask IoU is below each
/// threshold.
pub fn robustness_curve(
    records: &[DetectionRecord],
    models: &BTreeMap<u32, ObjectModel>,
    iou_thresholds: &[f64],
    thresholds: &ArThresholds,
) -> Result<Vec<RobustnessRow>> {
    if records.is_empty() {
        return Err(invalid("no detection records"));
    }
    let errors = all_record_errors(records, models)?;
    iou_thresholds
        .iter()
        .map(|&tau| {
            let kept: Vec<&RecordErrors> = errors.iter().filter(|e| e.iou < tau).collect();
            if kept.is_empty() {
                return Ok(RobustnessRow {
                    iou_threshold: tau,
                    n_records: 0,
                    ar_mssd: None,
                    ar_mspd: None,
                    ar_mean: None,
                });
            }
            let m: Vec<f64> = kept.iter().map(|e| e.mssd_norm).collect();
            let p: Vec<f64> = kept.iter().map(|e| e.mspd_norm).collect();
            let ar_mssd = recall_curve(&m, &thresholds.mssd_fractions)?;
            let ar_mspd = recall_curve(&p, &thresholds.mspd_multiples)?;
            Ok(RobustnessRow {
                iou_threshold: tau,
                n_records: kept.len(),
                ar_mssd: Some(ar_mssd),
                ar_mspd: Some(ar_mspd),
                ar_mean: Some((ar_mssd + ar_mspd) / 2.0),
            })
        })
        .collect()
}

pub fn all_record_errors(records: &[DetectionRecord], models: &BTreeMap<u32, ObjectModel>) -> Result<Vec<RecordErrors>> {
    par::map_slice(Execution::default(), records, |rec| {
        let model = models
            .get(&rec.obj_id)
            .ok_or_else(|| invalid(format!("no model for object {}", rec.obj_id)))?;
        record_errors(rec, model)
    })
    .into_iter()
    .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("iou_threshold,n_records,ar_mssd,ar_mspd,ar_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iou_threshold,
            r.n_records,
            opt(r.ar_mssd),
            opt(r.ar_mspd),
            opt(r.ar_mean)
        );
    }
    out
}

pub fn record_errors_csv(records: &[DetectionRecord], errors: &[RecordErrors]) -> String {
    let mut out = String::from("scene_id,im_id,obj_id,iou,mssd_mm,mspd_px\n");
    for (r, e) in records.iter().zip(errors) {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.scene_id, r.im_id, r.obj_id, e.iou, e.mssd_mm, e.mspd_px
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cube() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-2.0, 2.0] {
                    pts.push(Vector3::new(x, y, z) * 10.0);
                }
            }
        }
        pts
    }

    fn at(z: f64) -> Pose6D {
        Pose6D::new(Rotation3::identity(), Vector3::new(0.0, 0.0, z))
    }

    #[test]
    fn model_validation() {
        assert!(matches!(
            ObjectModel::new(cube()[..3].to_vec(), vec![]),
            Err(Error::InvalidModel(_))
        ));
        let m = ObjectModel::new(cube(), vec![]).unwrap();
        assert_eq!(m.symmetries().len(), 1);
        assert!((m.diameter() - (4.0f64 + 4.0 + 16.0).sqrt() * 10.0).abs() < 1e-9);
    }

    #[test]
    fn mssd_examples() {
        let m = ObjectModel::new(cube(), vec![]).unwrap();
        assert_eq!(mssd(&at(500.0), &at(500.0), &m).unwrap(), 0.0);
        let shifted = Pose6D::new(Rotation3::identity(), Vector3::new(3.0, 4.0, 500.0));
        assert!((mssd(&shifted, &at(500.0), &m).unwrap() - 5.0).abs() < 1e-12);
        let flip = Rotation3::about_z(PI);
        let sym = ObjectModel::new(cube(), vec![Rotation3::identity(), flip]).unwrap();
        let flipped = Pose6D::new(flip, Vector3::new(0.0, 0.0, 500.0));
        assert!(mssd(&flipped, &at(500.0), &sym).unwrap() < 1e-9);
        assert!(mssd(&flipped, &at(500.0), &m).unwrap() > 1.0);
    }

    #[test]
    fn mspd_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let m = ObjectModel::new(cube(), vec![]).unwrap();
        assert_eq!(mspd(&at(500.0), &at(500.0), &m, &k).unwrap(), 0.0);
        assert!(matches!(
            mspd(&at(5.0), &at(500.0), &m, &k),
            Err(Error::BehindCamera { .. })
        ));
        let axis = ObjectModel::new(vec![Vector3::zeros(); 4], vec![]).unwrap();
        assert_eq!(mspd(&at(900.0), &at(500.0), &axis, &k).unwrap(), 0.0);
    }

    #[test]
    fn recall_examples() {
        assert!((recall_curve(&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_curve(&[0.0; 3], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(recall_curve(&[9.0; 3], &[0.1, 0.2]).unwrap(), 0.0);
        assert!(recall_curve(&[1.0], &[]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = Mask::new(1, 4, vec![true, true, false, false]).unwrap();
        let b = Mask::new(1, 4, vec![false, true, true, false]).unwrap();
        let c = Mask::new(1, 4, vec![false, false, true, true]).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = Mask::new(1, 4, vec![false; 4]).unwrap();
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
        assert!(mask_iou(&a, &Mask::new(2, 2, vec![true; 4]).unwrap()).is_err());
    }

    #[test]
    fn rle_roundtrip() {
        let m = Mask::new(2, 3, vec![true, true, false, false, true, false]).unwrap();
        assert_eq!(m.to_rle(), vec![0, 2, 2, 1, 1]);
        assert_eq!(Mask::from_rle(2, 3, &m.to_rle()).unwrap(), m);
        assert!(Mask::from_rle(2, 3, &[1, 2]).is_err());
    }
}

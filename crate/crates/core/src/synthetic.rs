//! Seeded synthetic scenes on top of the analytic feature provider: a
//! textured sphere onboarded from every icosphere viewpoint, detections at
//! random poses with noisy segmentation, closed-form regressor weights and
//! ground truth for evaluation.
//!
//! Projection is weak perspective: the sphere images as a disk of radius
//! `f * radius / t_z` around the projected centre, which keeps the 2D
//! similarity between template and query crops exact.

use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::error::{invalid, Result};
use crate::estimator::{DenseLayer, Mlp, RegressorWeights};
use crate::eval::{Mask, ObjectModel};
use crate::featuregrid::synth::{SyntheticObject, VARIANT_LOG_SCALE_RANGE, VARIANT_MIN_DIM};
use crate::featuregrid::{crop_transform, write_grid, CropTransform, FeatureGrid, PatchGeometry};
use crate::geometry::{
    compose_rotation, icosphere_viewpoints, viewpoint_to_rotation, Affine2, CameraIntrinsics, Pose6D, Rotation3, ViewpointSet,
};
use crate::manifest::{
    write_json, CropRecord, GroundTruth, GroundTruthEntry, IntrinsicsRecord, ModelEntry, ModelSet, QueryEntry,
    QueryManifest, TemplateEntry, TemplateManifest, TEMPLATE_MANIFEST,
};
use crate::pipeline::QueryObservation;
use crate::store::{Template, TemplateStore};

/// Knot spacing of the piecewise-linear squares in the in-plane head.
const SQUARE_KNOT_STEP: f64 = 0.125;
/// Covers `|a +- b| <= sqrt(2)` for frame entries of magnitude `<= 1/sqrt(2)`.
const SQUARE_KNOTS: usize = 12;

/// `sum_k c_k relu(|u| - k h)` interpolates `u^2` at multiples of `h`.
fn square_knot_weight(k: usize) -> f64 {
    if k == 0 {
        SQUARE_KNOT_STEP
    } else {
        2.0 * SQUARE_KNOT_STEP
    }
}

/// Regressor weights that invert the provider's variant descriptors.
///
/// A variant descriptor holds `w * P` (`P` the 2x3 in-crop frame) and the
/// scale channel `h`. The scale head returns `range * (h_q - h_t)` exactly.
/// With `M = P_t P_q^T`, the in-plane angle `a` maximising
/// `tr(R_z(a) R_t R_q^T)` satisfies
/// `(cos a, sin a) ~ (M11 + M22, M12 - M21)`, a sum of products
/// `x_q x_t + y_q y_t` and `y_q x_t - x_q y_t` over the three columns. The
/// in-plane head writes each product as `((a + b)^2 - (a - b)^2) / 4` and
/// interpolates the squares with ReLUs (error below `h^2 / 4` per square).
pub fn oracle_regressor(variant_dim: usize) -> Result<RegressorWeights> {
    if variant_dim < VARIANT_MIN_DIM {
        return Err(invalid(format!("variant dim must be >= {VARIANT_MIN_DIM}, got {variant_dim}")));
    }
    let d = variant_dim;
    let n_in = 2 * d;
    let (hq, ht) = (6, d + 6);

    let mut w1 = vec![0f32; 2 * n_in];
    let r = VARIANT_LOG_SCALE_RANGE as f32;
    w1[hq] = r;
    w1[ht] = -r;
    w1[n_in + hq] = -r;
    w1[n_in + ht] = r;
    let scale = Mlp::new(vec![
        DenseLayer::new(2, n_in, w1, vec![0.0; 2])?,
        DenseLayer::new(1, 2, vec![1.0, -1.0], vec![0.0])?,
    ])?;

    // (first input, second input, sign of second, output row, output sign)
    let mut forms = Vec::new();
    for k in 0..3 {
        let (xq, yq, xt, yt) = (k, 3 + k, d + k, d + 3 + k);
        forms.extend([
            (xq, xt, 1.0, 0, 1.0),
            (xq, xt, -1.0, 0, -1.0),
            (yq, yt, 1.0, 0, 1.0),
            (yq, yt, -1.0, 0, -1.0),
            (yq, xt, 1.0, 1, 1.0),
            (yq, xt, -1.0, 1, -1.0),
            (xq, yt, 1.0, 1, -1.0),
            (xq, yt, -1.0, 1, 1.0),
        ]);
    }
    let hidden = forms.len() * 2 * SQUARE_KNOTS;
    let mut w1 = vec![0f32; hidden * n_in];
    let mut b1 = vec![0f32; hidden];
    let mut w2 = vec![0f32; 2 * hidden];
    let mut unit = 0;
    for &(a, b, sign_b, row, sign_out) in &forms {
        for side in [1.0, -1.0] {
            for k in 0..SQUARE_KNOTS {
                w1[unit * n_in + a] = side as f32;
                w1[unit * n_in + b] = (side * sign_b) as f32;
                b1[unit] = -(k as f64 * SQUARE_KNOT_STEP) as f32;
                w2[row * hidden + unit] = (sign_out * 0.25 * square_knot_weight(k)) as f32;
                unit += 1;
            }
        }
    }
    let inplane = Mlp::new(vec![
        DenseLayer::new(hidden, n_in, w1, b1)?,
        DenseLayer::new(2, hidden, w2, vec![0.0; 2])?,
    ])?;
    RegressorWeights::new(scale, inplane)
}

/// Random in-plane rotation of a viewing direction within `spread` radians
/// of a random viewpoint.
fn near_viewpoint_rotation(rng: &mut ChaCha8Rng, viewpoints: &ViewpointSet, spread: f64) -> Result<Rotation3> {
    let base = viewpoints.viewpoints[rng.gen_range(0..viewpoints.len())].direction;
    let random = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let axis = base.cross(&random);
    let tilt = if axis.norm() > 1e-9 {
        Rotation3::from_axis_angle(&axis.normalize(), rng.gen_range(0.0..=spread))
    } else {
        Rotation3::identity()
    };
    let direction = tilt.rotate(&base);
    Ok(compose_rotation(
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        &viewpoint_to_rotation(&direction)?,
    ))
}

/// Image-space disk, pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub center: Vector2<f64>,
    pub radius: f64,
}

impl Disk {
    pub fn bbox(&self) -> [f64; 4] {
        let (c, r) = (self.center, self.radius);
        [c.x - r, c.y - r, c.x + r, c.y + r]
    }

    /// Pixels whose centres (integer coordinates) lie inside the disk.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let r2 = self.radius * self.radius;
        let mut bits = vec![false; height * width];
        let y0 = (self.center.y - self.radius).floor().max(0.0) as usize;
        let y1 = ((self.center.y + self.radius).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let x0 = (self.center.x - self.radius).floor().max(0.0) as usize;
        let x1 = ((self.center.x + self.radius).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = Vector2::new(x as f64, y as f64) - self.center;
                if d.norm_squared() <= r2 {
                    bits[y * width + x] = true;
                }
            }
        }
        Mask::new(height, width, bits).expect("sized raster")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub object_id: u32,
    pub object_seed: u64,
    pub dim: usize,
    pub variant_dim: usize,
    /// Sphere radius, mm.
    pub radius_mm: f64,
    pub subdivisions: u32,
    pub pad_ratio: f64,
    pub geometry: PatchGeometry,
    pub template_tz: f64,
    pub template_intrinsics: CameraIntrinsics,
    pub query_intrinsics: CameraIntrinsics,
    pub image_width: usize,
    pub image_height: usize,
    /// Query object depth range, mm.
    pub depth_range: (f64, f64),
    /// Segmentation error: predicted disk centre offset and radius change,
    /// each up to this fraction of the true radius.
    pub mask_noise: f64,
    /// Query viewing directions: `Some(a)` tilts a random template
    /// viewpoint by up to `a` radians, `None` samples rotations uniformly.
    pub view_spread: Option<f64>,
    pub n_detections: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            object_id: 1,
            object_seed: 7,
            dim: 64,
            variant_dim: 8,
            radius_mm: 60.0,
            subdivisions: 2,
            pad_ratio: 0.0,
            geometry: PatchGeometry::default(),
            template_tz: 1000.0,
            template_intrinsics: CameraIntrinsics::new(572.4, 572.4, 320.0, 240.0).expect("positive focal"),
            query_intrinsics: CameraIntrinsics::new(600.0, 600.0, 318.0, 245.0).expect("positive focal"),
            image_width: 640,
            image_height: 480,
            depth_range: (700.0, 1400.0),
            mask_noise: 0.05,
            view_spread: Some(0.1),
            n_detections: 10,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Inference settings matching how the scene was cropped.
    pub fn pipeline_config(&self) -> Config {
        Config {
            subdivisions: self.subdivisions,
            pad_ratio: self.pad_ratio,
            ..Config::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for k in [&self.template_intrinsics, &self.query_intrinsics] {
            if k.fx != k.fy {
                return Err(invalid("synthetic scenes need square pixels (fx == fy)"));
            }
        }
        let (lo, hi) = self.depth_range;
        if !(lo > self.radius_mm && hi >= lo) {
            return Err(invalid(format!("depth range {lo}..{hi} must lie beyond the radius")));
        }
        if !(self.mask_noise >= 0.0 && self.mask_noise < 0.5) {
            return Err(invalid(format!("mask noise {} outside [0, 0.5)", self.mask_noise)));
        }
        if let Some(a) = self.view_spread {
            if !(0.0..=std::f64::consts::PI).contains(&a) {
                return Err(invalid(format!("view spread {a} outside [0, pi]")));
            }
        }
        let r = self.query_intrinsics.fx * self.radius_mm / lo * (1.0 + 2.0 * self.mask_noise);
        if 2.0 * r >= self.image_width.min(self.image_height) as f64 {
            return Err(invalid("object does not fit in the image at the nearest depth"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDetection {
    pub query: QueryObservation,
    pub gt_pose: Pose6D,
    pub gt_disk: Disk,
    pub pred_disk: Disk,
    /// Viewpoint closest to the true viewing direction.
    pub nearest_viewpoint: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub object: SyntheticObject,
    pub templates: Vec<Template>,
    pub detections: Vec<SyntheticDetection>,
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
    let q = Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    Rotation3::from_matrix_lenient(m, 1e-9).expect("unit quaternion gives a rotation")
}

/// Crop-to-pixel similarity of a sphere imaged as `disk` and cropped by `crop`.
fn crop_view(crop: &CropTransform, disk: &Disk) -> Result<Affine2> {
    Ok(crop.affine().then_after(&Affine2::new(disk.radius, 0.0, disk.center)?))
}

impl SyntheticScene {
    pub fn generate(config: SceneConfig) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry;
        let object = SyntheticObject::new(config.object_seed, config.dim)?.with_variant_dim(config.variant_dim)?;
        let viewpoints = icosphere_viewpoints(config.subdivisions)?;

        let kt = config.template_intrinsics;
        let template_disk = Disk {
            center: kt.principal_point(),
            radius: kt.fx * config.radius_mm / config.template_tz,
        };
        let crop_t = crop_transform(template_disk.bbox(), config.pad_ratio, &geom)?;
        let view_t = crop_view(&crop_t, &template_disk)?;
        let templates = viewpoints
            .viewpoints
            .iter()
            .enumerate()
            .map(|(v, vp)| {
                Ok(Template {
                    viewpoint: v,
                    r_ae: vp.rotation,
                    invariant: object.render(&vp.rotation, &view_t, &geom)?,
                    variant: object.render_variant(&vp.rotation, &view_t, &geom)?,
                    crop: crop_t,
                    tz: config.template_tz,
                    intrinsics: kt,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let kq = config.query_intrinsics;
        let (w, h) = (config.image_width as f64, config.image_height as f64);
        let mut detections = Vec::with_capacity(config.n_detections);
        for i in 0..config.n_detections {
            let rotation = match config.view_spread {
                Some(spread) => near_viewpoint_rotation(&mut rng, &viewpoints, spread)?,
                None => random_rotation(&mut rng),
            };
            let tz = rng.gen_range(config.depth_range.0..=config.depth_range.1);
            let radius = kq.fx * config.radius_mm / tz;
            let margin = radius * (1.0 + 2.0 * config.mask_noise) + 1.0;
            let center = Vector2::new(
                rng.gen_range(margin..=(w - margin).max(margin)),
                rng.gen_range(margin..=(h - margin).max(margin)),
            );
            let translation = kq.unproject(&center) * tz;
            let gt_disk = Disk { center, radius };
            let noise = config.mask_noise;
            let mut jitter = || if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            let pred_disk = Disk {
                center: center + Vector2::new(jitter(), jitter()) * radius,
                radius: radius * (1.0 + jitter()),
            };
            let crop = crop_transform(pred_disk.bbox(), config.pad_ratio, &geom)?;
            let view = crop_view(&crop, &gt_disk)?;
            let direction = -rotation.matrix().row(2).transpose();
            detections.push(SyntheticDetection {
                query: QueryObservation {
                    scene_id: 0,
                    im_id: i as u32,
                    obj_id: config.object_id,
                    invariant: object.render(&rotation, &view, &geom)?,
                    variant: object.render_variant(&rotation, &view, &geom)?,
                    crop,
                    intrinsics: kq,
                },
                gt_pose: Pose6D::new(rotation, translation),
                gt_disk,
                pred_disk,
                nearest_viewpoint: viewpoints.nearest(&direction),
            });
        }
        Ok(Self {
            config,
            object,
            templates,
            detections,
        })
    }

    pub fn store(&self) -> Result<TemplateStore> {
        TemplateStore::new(
            self.config.object_id,
            self.config.subdivisions,
            self.config.geometry,
            self.templates.clone(),
        )
    }

    pub fn weights(&self) -> Result<RegressorWeights> {
        oracle_regressor(self.config.variant_dim)
    }

    pub fn queries(&self) -> Vec<QueryObservation> {
        self.detections.iter().map(|d| d.query.clone()).collect()
    }

    /// Surface points on the sphere (icosphere vertices).
    pub fn model(&self) -> Result<ObjectModel> {
        let pts = icosphere_viewpoints(3)?
            .viewpoints
            .iter()
            .map(|v| v.direction * self.config.radius_mm)
            .collect();
        ObjectModel::new(pts, vec![])
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let (h, w) = (self.config.image_height, self.config.image_width);
        GroundTruth {
            detections: self
                .detections
                .iter()
                .map(|d| GroundTruthEntry {
                    scene_id: d.query.scene_id,
                    im_id: d.query.im_id,
                    obj_id: d.query.obj_id,
                    rotation: d.gt_pose.rotation.to_row_array(),
                    translation: [d.gt_pose.translation.x, d.gt_pose.translation.y, d.gt_pose.translation.z],
                    intrinsics: IntrinsicsRecord::from(&d.query.intrinsics),
                    height: h,
                    width: w,
                    gt_mask: d.gt_disk.rasterize(h, w).to_rle(),
                    pred_mask: d.pred_disk.rasterize(h, w).to_rle(),
                })
                .collect(),
        }
    }

    /// Writes the full fixture:
    ///
    /// ```text
    /// templates/templates.json, templates/t###_{inv,var}.gpfg
    /// queries/queries.json,     queries/q####_{inv,var}.gpfg
    /// weights.gpwt  gt.json  models.json  config.txt
    /// ```
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("templates");
        let qdir = dir.join("queries");
        std::fs::create_dir_all(&tdir)?;
        std::fs::create_dir_all(&qdir)?;
        let save = |path: PathBuf, grid: &FeatureGrid| -> Result<()> {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_grid(&mut f, grid)
        };

        let mut entries = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            let (inv, var) = (format!("t{:03}_inv.gpfg", t.viewpoint), format!("t{:03}_var.gpfg", t.viewpoint));
            save(tdir.join(&inv), &t.invariant)?;
            save(tdir.join(&var), &t.variant)?;
            entries.push(TemplateEntry {
                viewpoint: t.viewpoint,
                invariant: inv.into(),
                variant: var.into(),
                crop: CropRecord::from(&t.crop),
                tz: t.tz,
                intrinsics: IntrinsicsRecord::from(&t.intrinsics),
            });
        }
        write_json(
            &tdir.join(TEMPLATE_MANIFEST),
            &TemplateManifest {
                object_id: self.config.object_id,
                subdivisions: Some(self.config.subdivisions),
                templates: entries,
            },
        )?;

        let mut queries = Vec::with_capacity(self.detections.len());
        for d in &self.detections {
            let q = &d.query;
            let (inv, var) = (format!("q{:04}_inv.gpfg", q.im_id), format!("q{:04}_var.gpfg", q.im_id));
            save(qdir.join(&inv), &q.invariant)?;
            save(qdir.join(&var), &q.variant)?;
            queries.push(QueryEntry {
                scene_id: q.scene_id,
                im_id: q.im_id,
                obj_id: q.obj_id,
                invariant: inv.into(),
                variant: var.into(),
                crop: CropRecord::from(&q.crop),
                intrinsics: IntrinsicsRecord::from(&q.intrinsics),
            });
        }
        write_json(&qdir.join("queries.json"), &QueryManifest { detections: queries })?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("weights.gpwt"))?);
        self.weights()?.write(&mut f)?;
        drop(f);
        write_json(&dir.join("gt.json"), &self.ground_truth())?;
        let model = self.model()?;
        write_json(
            &dir.join("models.json"),
            &ModelSet {
                models: vec![ModelEntry {
                    obj_id: self.config.object_id,
                    points: model.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
                    symmetries: vec![],
                }],
            },
        )?;
        std::fs::write(dir.join("config.txt"), self.config.pipeline_config().to_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::predict_scale_inplane;
    use crate::featuregrid::synth::canonical_view;
    use crate::geometry::{compose_rotation, normalize_angle};

    #[test]
    fn oracle_heads_recover_scale_and_angle() {
        let g = PatchGeometry::default();
        let obj = SyntheticObject::new(5, 16).unwrap();
        let w = oracle_regressor(obj.variant_dim()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = g.cells() / 2 + g.grid_side as usize / 2;
        for _ in 0..200 {
            let r_ae = random_rotation(&mut rng);
            let alpha: f64 = rng.gen_range(-3.1..3.1);
            let s: f64 = rng.gen_range(0.6..1.6);
            let t = obj.render_variant(&r_ae, &canonical_view(&g, 72.0), &g).unwrap();
            let q = obj
                .render_variant(
                    &compose_rotation(alpha, &r_ae),
                    &Affine2::new(72.0 * s, 0.0, g.image_center()).unwrap(),
                    &g,
                )
                .unwrap();
            let pred = predict_scale_inplane(&w, q.cell_descriptor(cell), t.cell_descriptor(cell)).unwrap();
            assert!((pred.scale / s).ln().abs() < 1e-5, "scale {} vs {s}", pred.scale);
            assert!(normalize_angle(pred.alpha - alpha).abs() < 0.02, "alpha {} vs {alpha}", pred.alpha);
        }
    }

    #[test]
    fn oracle_angle_minimises_rotation_error() {
        // query off the template viewpoint: the predicted angle should be
        // the in-plane rotation that brings the template closest
        let g = PatchGeometry::default();
        let obj = SyntheticObject::new(5, 16).unwrap();
        let w = oracle_regressor(obj.variant_dim()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = g.cells() / 2 + g.grid_side as usize / 2;
        for _ in 0..50 {
            let r_t = random_rotation(&mut rng);
            let tilt = crate::geometry::Rotation3::from_axis_angle(&nalgebra::Vector3::x(), rng.gen_range(-0.15..0.15));
            let r_q = compose_rotation(rng.gen_range(-3.0..3.0), &tilt.compose(&r_t));
            let view = canonical_view(&g, 72.0);
            let t = obj.render_variant(&r_t, &view, &g).unwrap();
            let q = obj.render_variant(&r_q, &view, &g).unwrap();
            let pred = predict_scale_inplane(&w, q.cell_descriptor(cell), t.cell_descriptor(cell)).unwrap();
            let err = |a: f64| compose_rotation(a, &r_t).angle_to(&r_q);
            let best = (0..3600)
                .map(|k| err(k as f64 * std::f64::consts::TAU / 3600.0))
                .fold(f64::INFINITY, f64::min);
            assert!(err(pred.alpha) < best + 0.01);
        }
    }

    #[test]
    fn scene_is_deterministic_and_consistent() {
        let cfg = SceneConfig {
            n_detections: 3,
            dim: 16,
            ..SceneConfig::default()
        };
        let a = SyntheticScene::generate(cfg.clone()).unwrap();
        let b = SyntheticScene::generate(cfg).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.templates.len(), 162);
        for d in &a.detections {
            let c = d.query.intrinsics.project(&d.gt_pose.translation);
            assert!((c - d.gt_disk.center).norm() < 1e-9);
        }
        assert!(a.store().is_ok());
    }
}

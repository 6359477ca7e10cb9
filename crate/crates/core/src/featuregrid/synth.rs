//! Analytic feature provider used as a test oracle in place of a trained
//! backbone.
//!
//! The object is a unit sphere carrying a seeded smooth texture. A processed
//! crop is described by the object rotation (object to camera) and a 2D
//! similarity `view` from normalized camera-plane coordinates (sphere radius
//! 1) to processed pixels. Projection is orthographic, so two crops that
//! differ by an in-plane rotation and a scale of `view` sample the same
//! surface points and produce the same descriptors.
//!
//! Invariant descriptors depend on the surface point and on the angle
//! between its normal and the viewing axis. Variant descriptors encode the
//! object's in-plane orientation and the crop scale: the first two rows of
//! the object rotation, rotated into the crop (`P`, 2x3), followed by
//! `h = ln(scale / VARIANT_REFERENCE_RADIUS) / VARIANT_LOG_SCALE_RANGE`, as
//! `[sqrt((1-h^2)/2) vec(P), h, 0, ...]` with `vec` row-major.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FeatureGrid, PatchGeometry, PatchIndex};
use crate::error::{invalid, Result};
use crate::featuregrid::patch_center;
use crate::geometry::{Affine2, Rotation3};

/// Sphere radius in processed pixels for [`synth_features`].
pub const DEFAULT_RADIUS_PX: f64 = 72.0;
/// Crop scale at which the variant scale channel reads zero.
pub const VARIANT_REFERENCE_RADIUS: f64 = 72.0;
/// Log-scale span mapped onto the variant channel's [-1, 1].
pub const VARIANT_LOG_SCALE_RANGE: f64 = 2.0;
pub const DEFAULT_VARIANT_DIM: usize = 8;
/// Six frame entries plus the scale channel.
pub const VARIANT_MIN_DIM: usize = 7;

const TEXTURE_FREQUENCY: f64 = 1.6;
const VIEW_WEIGHT: f64 = 1.0;

/// Seeded textured sphere.
#[derive(Clone, Debug)]
pub struct SyntheticObject {
    seed: u64,
    dim: usize,
    variant_dim: usize,
    texture: Vec<(Vector3<f64>, f64)>,
    view: Vec<(f64, f64)>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl SyntheticObject {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(invalid(format!("synthetic descriptor dim must be >= 8, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view_dims = (dim / 4).max(2);
        let texture = (0..dim - view_dims)
            .map(|_| {
                let w = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * TEXTURE_FREQUENCY;
                (w, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let view = (0..view_dims)
            .map(|_| (rng.gen_range(1.0..4.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        Ok(Self {
            seed,
            dim,
            variant_dim: DEFAULT_VARIANT_DIM,
            texture,
            view,
        })
    }

    pub fn with_variant_dim(mut self, variant_dim: usize) -> Result<Self> {
        if variant_dim < VARIANT_MIN_DIM {
            return Err(invalid(format!("variant dim must be >= {VARIANT_MIN_DIM}, got {variant_dim}")));
        }
        self.variant_dim = variant_dim;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variant_dim(&self) -> usize {
        self.variant_dim
    }

    /// Unnormalized invariant descriptor of a surface point seen at
    /// `view_angle` (radians between normal and viewing axis).
    pub fn invariant_descriptor(&self, point: &Vector3<f64>, view_angle: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        out.extend(self.texture.iter().map(|(w, b)| (w.dot(point) + b).cos()));
        out.extend(self.view.iter().map(|(f, b)| VIEW_WEIGHT * (f * view_angle + b).cos()));
        out
    }

    /// Surface hit by the orthographic ray through a processed pixel:
    /// `(object-frame point, camera-frame point)`.
    pub fn hit(&self, rotation: &Rotation3, view: &Affine2, pixel: &Vector2<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let n = view.inverse().apply(pixel);
        let r2 = n.norm_squared();
        if r2 >= 1.0 {
            return None;
        }
        let cam = Vector3::new(n.x, n.y, -(1.0 - r2).sqrt());
        Some((rotation.transpose().rotate(&cam), cam))
    }

    fn cells(&self, rotation: &Rotation3, view: &Affine2, geom: &PatchGeometry) -> Vec<Option<(Vector3<f64>, Vector3<f64>)>> {
        let side = geom.grid_side as usize;
        (0..side * side)
            .map(|cell| {
                let c = patch_center(PatchIndex::new(cell / side, cell % side), geom).expect("cell in grid");
                self.hit(rotation, view, &c)
            })
            .collect()
    }

    /// Scale/rotation invariant grid for a crop.
    pub fn render(&self, rotation: &Rotation3, view: &Affine2, geom: &PatchGeometry) -> Result<FeatureGrid> {
        let side = geom.grid_side as usize;
        let mut data = vec![0f32; side * side * self.dim];
        let mut mask = vec![false; side * side];
        for (cell, hit) in self.cells(rotation, view, geom).into_iter().enumerate() {
            if let Some((obj, cam)) = hit {
                let angle = (-cam.z).clamp(-1.0, 1.0).acos();
                let desc = self.invariant_descriptor(&obj, angle);
                for (dst, v) in data[cell * self.dim..(cell + 1) * self.dim].iter_mut().zip(desc) {
                    *dst = v as f32;
                }
                mask[cell] = true;
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(invalid("synthetic object does not intersect the crop"));
        }
        FeatureGrid::from_unnormalized(side, side, self.dim, data, mask)
    }

    /// Scale/rotation sensitive grid for a crop.
    pub fn render_variant(&self, rotation: &Rotation3, view: &Affine2, geom: &PatchGeometry) -> Result<FeatureGrid> {
        let side = geom.grid_side as usize;
        let d = self.variant_dim;
        let mut data = vec![0f32; side * side * d];
        let mut mask = vec![false; side * side];
        let h = ((view.scale() / VARIANT_REFERENCE_RADIUS).ln() / VARIANT_LOG_SCALE_RANGE).clamp(-0.99, 0.99);
        let weight = ((1.0 - h * h) / 2.0).sqrt();
        let frame = self.image_frame(rotation, view);
        for (cell, hit) in self.cells(rotation, view, geom).into_iter().enumerate() {
            if hit.is_some() {
                let dst = &mut data[cell * d..(cell + 1) * d];
                for (k, v) in frame.iter().enumerate() {
                    dst[k] = (weight * v) as f32;
                }
                dst[6] = h as f32;
                mask[cell] = true;
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(invalid("synthetic object does not intersect the crop"));
        }
        Ok(FeatureGrid::from_unnormalized(side, side, d, data, mask)?.with_variant(true))
    }

    /// First two rows of `rotation` turned by the crop's in-plane angle,
    /// row-major.
    pub fn image_frame(&self, rotation: &Rotation3, view: &Affine2) -> [f64; 6] {
        let m = rotation.matrix();
        let (sn, cs) = view.alpha().sin_cos();
        let mut out = [0.0; 6];
        for k in 0..3 {
            out[k] = cs * m[(0, k)] - sn * m[(1, k)];
            out[3 + k] = sn * m[(0, k)] + cs * m[(1, k)];
        }
        out
    }
}

/// Crop with the sphere centred and `radius_px` pixels wide.
pub fn canonical_view(geom: &PatchGeometry, radius_px: f64) -> Affine2 {
    Affine2::new(radius_px, 0.0, geom.image_center()).expect("positive radius")
}

/// Invariant grid of the synthetic object `object_seed` seen with
/// out-of-plane rotation `r_ae`, centred at the default scale.
pub fn synth_features(r_ae: &Rotation3, geom: &PatchGeometry, object_seed: u64, dim: usize) -> Result<FeatureGrid> {
    SyntheticObject::new(object_seed, dim)?.render(r_ae, &canonical_view(geom, DEFAULT_RADIUS_PX), geom)
}

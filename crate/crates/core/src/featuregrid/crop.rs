use nalgebra::Vector2;

use super::PatchGeometry;
use crate::error::{invalid, Result};
use crate::geometry::Affine2;

/// Scale-and-translate map from original image pixels to the processed
/// square crop. Never rotates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    affine: Affine2,
}

impl CropTransform {
    pub fn new(scale: f64, translation: Vector2<f64>) -> Result<Self> {
        Ok(Self {
            affine: Affine2::new(scale, 0.0, translation)?,
        })
    }

    pub fn from_affine(affine: Affine2) -> Result<Self> {
        if affine.alpha() != 0.0 {
            return Err(invalid(format!("crop transforms cannot rotate (alpha {})", affine.alpha())));
        }
        Ok(Self { affine })
    }

    pub fn affine(&self) -> &Affine2 {
        &self.affine
    }

    pub fn scale(&self) -> f64 {
        self.affine.scale()
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.affine.translation()
    }
}

/// Square crop centred on the box, side `max(w, h) * (1 + pad_ratio)`,
/// resized to the processed image side.
pub fn crop_transform(bbox: [f64; 4], pad_ratio: f64, geom: &PatchGeometry) -> Result<CropTransform> {
    let [x0, y0, x1, y1] = bbox;
    if !(x1 > x0 && y1 > y0) {
        return Err(invalid(format!("empty bounding box {bbox:?}")));
    }
    if !(pad_ratio > -1.0) || !pad_ratio.is_finite() {
        return Err(invalid(format!("pad ratio {pad_ratio} must exceed -1")));
    }
    let side = (x1 - x0).max(y1 - y0) * (1.0 + pad_ratio);
    let scale = geom.image_side as f64 / side;
    let center = Vector2::new((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    CropTransform::new(scale, geom.image_center() - center * scale)
}

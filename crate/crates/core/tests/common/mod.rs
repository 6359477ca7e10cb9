#![allow(dead_code)]

use gigapose_core::featuregrid::{FeatureGrid, PatchGeometry, PatchIndex};
use gigapose_core::geometry::{CameraIntrinsics, Pose6D, Rotation3};
use gigapose_core::gt_corr::{DepthMap, DepthView};
use nalgebra::{Vector2, Vector3};
use rand::Rng;

/// Grid with descriptors drawn from {-1, 0, 1} so that equal similarities
/// occur often.
pub fn quantized_grid(rng: &mut impl Rng, h: usize, w: usize, dim: usize, mask_p: f64) -> FeatureGrid {
    let mut mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(mask_p)).collect();
    mask[0] = true;
    let mut data = vec![0f32; h * w * dim];
    for cell in 0..h * w {
        let d = &mut data[cell * dim..(cell + 1) * dim];
        loop {
            for v in d.iter_mut() {
                *v = rng.gen_range(-1i32..=1) as f32;
            }
            if d.iter().any(|&v| v != 0.0) {
                break;
            }
        }
    }
    FeatureGrid::from_unnormalized(h, w, dim, data, mask).unwrap()
}

/// Similarity of two descriptors, summed in index order in f64.
pub fn brute_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] as f64 * b[k] as f64;
    }
    s
}

/// Scans every template cell; first maximum in row-major order wins.
pub fn brute_nearest(query: &FeatureGrid, i: PatchIndex, template: &FeatureGrid) -> (PatchIndex, f64) {
    let q = query.descriptor(i);
    let mut best = (PatchIndex::new(0, 0), f64::NEG_INFINITY);
    for r in 0..template.height() {
        for c in 0..template.width() {
            let j = PatchIndex::new(r, c);
            if !template.is_masked(j) {
                continue;
            }
            let s = brute_dot(q, template.descriptor(j));
            if s > best.1 {
                best = (j, s);
            }
        }
    }
    (best.0, best.1.clamp(-1.0, 1.0))
}

/// Mean of retained nearest-neighbour scores and the retained matches in
/// query scan order.
pub fn brute_similarity(query: &FeatureGrid, template: &FeatureGrid, threshold: f64) -> (f64, Vec<(PatchIndex, PatchIndex, f64)>) {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut kept = Vec::new();
    for r in 0..query.height() {
        for c in 0..query.width() {
            let i = PatchIndex::new(r, c);
            if !query.is_masked(i) {
                continue;
            }
            n += 1;
            let (j, s) = brute_nearest(query, i, template);
            if s >= threshold {
                total += s;
                kept.push((i, j, s));
            }
        }
    }
    (total / n as f64, kept)
}

/// Depth view of a sphere of `radius` mm centred at `pose.translation`,
/// masked where the patch centre ray hits it.
pub fn sphere_view(pose: Pose6D, radius: f64, k: CameraIntrinsics, geom: &PatchGeometry) -> DepthView {
    let side = geom.image_side as usize;
    let c = pose.translation;
    let mut depth = vec![0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            if let Some(z) = sphere_depth(&k, &c, radius, x as f64, y as f64) {
                depth[y * side + x] = z as f32;
            }
        }
    }
    let depth = DepthMap::new(side, side, depth).unwrap();
    let g = geom.grid_side as usize;
    let half = geom.patch_size as f64 / 2.0;
    let mask = (0..g * g)
        .map(|cell| {
            let p = Vector2::new(
                (cell % g) as f64 * geom.patch_size as f64 + half,
                (cell / g) as f64 * geom.patch_size as f64 + half,
            );
            depth.sample(&p).is_some()
        })
        .collect();
    DepthView {
        depth,
        intrinsics: k,
        pose,
        mask,
    }
}

/// Depth (camera z) of the first ray-sphere intersection through pixel (x, y).
pub fn sphere_depth(k: &CameraIntrinsics, center: &Vector3<f64>, radius: f64, x: f64, y: f64) -> Option<f64> {
    let d = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
    let a = d.norm_squared();
    let b = d.dot(center);
    let disc = b * b - a * (center.norm_squared() - radius * radius);
    if disc < 0.0 {
        return None;
    }
    Some((b - disc.sqrt()) / a)
}

/// Lifts a pixel of `view` into the object frame using its depth map.
pub fn lift(view: &DepthView, p: &Vector2<f64>) -> Option<Vector3<f64>> {
    let z = view.depth.sample(p)?;
    let cam = Vector3::new((p.x - view.intrinsics.cx) / view.intrinsics.fx * z, (p.y - view.intrinsics.cy) / view.intrinsics.fy * z, z);
    Some(view.pose.inverse().transform(&cam))
}

/// Largest distance between object points seen through the pixels of patch
/// `j`.
pub fn patch_footprint(view: &DepthView, j: PatchIndex, geom: &PatchGeometry) -> f64 {
    let size = geom.patch_size as usize;
    let mut pts = Vec::new();
    for y in j.row * size..(j.row + 1) * size {
        for x in j.col * size..(j.col + 1) * size {
            if let Some(p) = lift(view, &Vector2::new(x as f64, y as f64)) {
                pts.push(p);
            }
        }
    }
    let mut d: f64 = 0.0;
    for (a, p) in pts.iter().enumerate() {
        for q in &pts[a + 1..] {
            d = d.max((p - q).norm());
        }
    }
    d
}

/// Random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
    gigapose_core::synthetic::random_rotation(rng)
}

mod common;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gigapose_core::featuregrid::synth::{canonical_view, SyntheticObject, DEFAULT_RADIUS_PX};
use gigapose_core::featuregrid::{patch_center, PatchGeometry, PatchIndex};
use gigapose_core::geometry::{compose_rotation, icosphere_viewpoints, Affine2, CameraIntrinsics, Pose6D, Rotation3};
use gigapose_core::gt_corr::{reproject_correspondences, symmetrize, DepthMap, DepthView};
use gigapose_core::matching::{template_similarity, Correspondence};

use common::{lift, patch_footprint, random_rotation, sphere_view};

/// Camera distance for the near-orthographic views of the unit synthetic sphere.
const FAR: f64 = 1e4;

/// Depth view matching what `SyntheticObject` renders: a unit sphere seen
/// from `FAR` away, with focal length chosen so one unit spans `radius_px`.
fn synthetic_view(object: &SyntheticObject, rotation: &Rotation3, view: &Affine2, geom: &PatchGeometry) -> DepthView {
    let side = geom.image_side as usize;
    let mut depth = vec![0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            if let Some((_, cam)) = object.hit(rotation, view, &Vector2::new(x as f64, y as f64)) {
                depth[y * side + x] = (FAR + cam.z) as f32;
            }
        }
    }
    let f = view.scale() * FAR;
    let c = view.translation();
    let mask = object.render(rotation, view, geom).unwrap().mask().to_vec();
    DepthView {
        depth: DepthMap::new(side, side, depth).unwrap(),
        intrinsics: CameraIntrinsics::new(f, f, c.x, c.y).unwrap(),
        pose: Pose6D::new(*rotation, Vector3::new(0.0, 0.0, FAR)),
        mask,
    }
}

fn masked(view: &DepthView, i: PatchIndex, geom: &PatchGeometry) -> bool {
    view.mask[i.row * geom.grid_side as usize + i.col]
}

#[test]
fn emitted_pairs_are_masked_on_both_sides() {
    let geom = PatchGeometry::default();
    let k = CameraIntrinsics::new(900.0, 900.0, 112.0, 112.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let t = Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(400.0..700.0));
        let source = sphere_view(Pose6D::new(random_rotation(&mut rng), t), 50.0, k, &geom);
        let target = sphere_view(Pose6D::new(random_rotation(&mut rng), t + Vector3::new(10.0, -5.0, 0.0)), 50.0, k, &geom);
        let corrs = reproject_correspondences(&source, &target, &geom).unwrap();
        assert!(!corrs.is_empty());
        for c in &corrs {
            assert!(masked(&source, c.query_index, &geom));
            assert!(masked(&target, c.template_index, &geom));
        }
    }
}

#[test]
fn sphere_pairs_agree_within_a_patch_footprint() {
    let geom = PatchGeometry::default();
    let k = CameraIntrinsics::new(900.0, 900.0, 112.0, 112.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let r = random_rotation(&mut rng);
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let t = Vector3::new(0.0, 0.0, 500.0);
        let source = sphere_view(Pose6D::new(r, t), 50.0, k, &geom);
        let target = sphere_view(Pose6D::new(r.compose(&Rotation3::from_axis_angle(&axis, 10f64.to_radians())), t), 50.0, k, &geom);
        let corrs = reproject_correspondences(&source, &target, &geom).unwrap();
        assert!(corrs.len() > 10);
        for c in corrs {
            let xs = lift(&source, &patch_center(c.query_index, &geom).unwrap()).unwrap();
            let xt = lift(&target, &patch_center(c.template_index, &geom).unwrap()).unwrap();
            assert!((xs - xt).norm() <= patch_footprint(&target, c.template_index, &geom));
        }
    }
}

#[test]
fn target_moved_out_of_view_yields_nothing() {
    let geom = PatchGeometry::default();
    let k = CameraIntrinsics::new(900.0, 900.0, 112.0, 112.0).unwrap();
    let source = sphere_view(Pose6D::new(Rotation3::identity(), Vector3::new(0.0, 0.0, 500.0)), 50.0, k, &geom);
    let mut target = source.clone();
    target.pose.translation.x += 400.0;
    assert!(reproject_correspondences(&source, &target, &geom).unwrap().is_empty());

    let mut blind = source.clone();
    blind.depth = DepthMap::new(224, 224, vec![0.0; 224 * 224]).unwrap();
    assert!(reproject_correspondences(&blind, &source, &geom).unwrap().is_empty());
}

#[test]
fn mismatched_mask_is_rejected() {
    let geom = PatchGeometry::default();
    let k = CameraIntrinsics::new(900.0, 900.0, 112.0, 112.0).unwrap();
    let good = sphere_view(Pose6D::new(Rotation3::identity(), Vector3::new(0.0, 0.0, 500.0)), 50.0, k, &geom);
    let mut bad = good.clone();
    bad.mask.pop();
    assert!(reproject_correspondences(&good, &bad, &geom).is_err());
    assert!(reproject_correspondences(&bad, &good, &geom).is_err());
}

#[test]
fn symmetrize_merges_without_duplicates() {
    let c = |a: usize, b: usize| Correspondence {
        query_index: PatchIndex::new(a, 0),
        template_index: PatchIndex::new(b, 0),
        score: 1.0,
    };
    let forward: Vec<_> = (0..5).map(|i| c(i, i + 1)).collect();
    assert_eq!(symmetrize(&forward, &[]), forward);
    let mirrored: Vec<_> = forward.iter().map(|f| c(f.template_index.row, f.query_index.row)).collect();
    assert_eq!(symmetrize(&forward, &mirrored).len(), 5);
    let other: Vec<_> = (0..3).map(|i| c(i + 10, i + 20)).collect();
    assert_eq!(symmetrize(&forward, &other).len(), 8);
}

/// Nearest-neighbour matches between synthetic grids of nearby viewpoints
/// should mostly land on, or next to, the patch the depth reprojection
/// predicts. Both sides quantize to patch centres, so one cell of slack.
#[test]
fn feature_matches_follow_the_reprojected_ground_truth() {
    let geom = PatchGeometry::default();
    let object = SyntheticObject::new(3, 64).unwrap();
    let set = icosphere_viewpoints(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut matched, mut agreed) = (0usize, 0usize);
    for (a, b) in set.edges().into_iter().step_by(7).take(20) {
        let alpha = rng.gen_range(-0.5..0.5);
        let rq = compose_rotation(alpha, &set.viewpoints[a].rotation);
        let rt = set.viewpoints[b].rotation;
        let vq = canonical_view(&geom, DEFAULT_RADIUS_PX * rng.gen_range(0.9..1.1));
        let vt = canonical_view(&geom, DEFAULT_RADIUS_PX);
        let query = object.render(&rq, &vq, &geom).unwrap();
        let template = object.render(&rt, &vt, &geom).unwrap();
        let gt = reproject_correspondences(&synthetic_view(&object, &rq, &vq, &geom), &synthetic_view(&object, &rt, &vt, &geom), &geom).unwrap();
        for c in template_similarity(&query, &template, 0.5).unwrap().correspondences {
            if let Some(g) = gt.iter().find(|g| g.query_index == c.query_index) {
                matched += 1;
                agreed += usize::from(g.template_index.row.abs_diff(c.template_index.row) <= 1
                    && g.template_index.col.abs_diff(c.template_index.col) <= 1);
            }
        }
    }
    let rate = agreed as f64 / matched as f64;
    assert!(matched > 100);
    assert!(rate >= 0.8, "{rate}");
}

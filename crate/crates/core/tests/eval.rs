mod common;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gigapose_core::eval::{
    discretize_continuous_symmetry, mask_iou, mspd, mssd, recall_curve, record_errors, robustness_curve, ArThresholds,
    DetectionRecord, Mask, ObjectModel,
};
use gigapose_core::geometry::{CameraIntrinsics, Pose6D, Rotation3};

use common::random_rotation;

/// Points with exactly the 4-fold symmetry about z: a square ring at two
/// heights, with distinct radii so nothing else maps it to itself.
fn square_prism() -> ObjectModel {
    let mut pts = Vec::new();
    for (z, r) in [(-30.0, 40.0), (25.0, 15.0)] {
        for k in 0..4 {
            let a = std::f64::consts::FRAC_PI_2 * k as f64 + 0.3;
            pts.push(Vector3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    pts.push(Vector3::new(0.0, 0.0, 50.0));
    ObjectModel::new(pts, discretize_continuous_symmetry(&Vector3::z(), 4)).unwrap()
}

fn k() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose6D {
    Pose6D::new(
        random_rotation(rng),
        Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(500.0..1000.0)),
    )
}

#[test]
fn errors_vanish_exactly_on_symmetric_poses() {
    let model = square_prism();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let gt = random_pose(&mut rng);
        for sym in model.symmetries() {
            let pred = Pose6D::new(gt.rotation.compose(sym), gt.translation);
            assert!(mssd(&pred, &gt, &model).unwrap() < 1e-9);
            assert!(mspd(&pred, &gt, &model, &k()).unwrap() < 1e-9);
        }
        // any other rotation moves some point
        let off = Pose6D::new(gt.rotation.compose(&Rotation3::from_axis_angle(&Vector3::z(), 0.4)), gt.translation);
        assert!(mssd(&off, &gt, &model).unwrap() > 1e-3);
        assert!(mspd(&off, &gt, &model, &k()).unwrap() > 1e-3);
        let shifted = Pose6D::new(gt.rotation, gt.translation + Vector3::new(0.0, 0.0, 1.0));
        assert!((mssd(&shifted, &gt, &model).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn surface_distance_ignores_symmetric_relabelling_of_the_truth() {
    let model = square_prism();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let (pred, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let base = mssd(&pred, &gt, &model).unwrap();
        for sym in model.symmetries() {
            let relabelled = Pose6D::new(gt.rotation.compose(sym), gt.translation);
            assert!((mssd(&pred, &relabelled, &model).unwrap() - base).abs() < 1e-9);
            assert!((mssd(&relabelled, &pred, &model).unwrap() - base).abs() < 1e-9);
        }
    }
}

#[test]
fn points_behind_the_camera_count_as_a_miss() {
    let model = square_prism();
    let gt = Pose6D::new(Rotation3::identity(), Vector3::new(0.0, 0.0, 600.0));
    let pred = Pose6D::new(Rotation3::identity(), Vector3::new(0.0, 0.0, -600.0));
    assert!(mspd(&pred, &gt, &model, &k()).is_err());
    let mask = Mask::new(4, 4, vec![true; 16]).unwrap();
    let rec = DetectionRecord {
        scene_id: 1,
        im_id: 1,
        obj_id: 1,
        pred_mask: mask.clone(),
        gt_mask: mask,
        pred_pose: pred,
        gt_pose: gt,
        score: 1.0,
        intrinsics: k(),
    };
    assert_eq!(record_errors(&rec, &model).unwrap().mspd_px, f64::INFINITY);
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Mask::new(h, w, bits).unwrap())
}

proptest! {
    #[test]
    fn recall_rises_with_the_thresholds(errors in prop::collection::vec(0.0..2.0f64, 1..40),
                                        thresholds in prop::collection::vec(0.01..2.0f64, 1..10),
                                        grow in 1.0..3.0f64) {
        let raised: Vec<f64> = thresholds.iter().map(|t| t * grow).collect();
        let lo = recall_curve(&errors, &thresholds).unwrap();
        let hi = recall_curve(&errors, &raised).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(hi >= lo);
    }

    #[test]
    fn iou_is_symmetric_and_one_only_for_equal_masks(a in mask_strategy(5, 7), b in mask_strategy(5, 7)) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.area() > 0 {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn run_lengths_round_trip(m in mask_strategy(6, 9)) {
        let rle = m.to_rle();
        prop_assert_eq!(rle.iter().sum::<usize>(), 54);
        prop_assert_eq!(Mask::from_rle(6, 9, &rle).unwrap(), m);
    }
}

#[test]
fn robustness_rows_grow_with_the_iou_threshold() {
    let model = square_prism();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let records: Vec<DetectionRecord> = (0..60)
        .map(|i| {
            let gt_bits: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
            let pred_bits: Vec<bool> = gt_bits.iter().map(|&b| if rng.gen_bool(0.3) { !b } else { b }).collect();
            let gt = random_pose(&mut rng);
            let pred = Pose6D::new(gt.rotation, gt.translation + Vector3::new(rng.gen_range(-20.0..20.0), 0.0, 0.0));
            DetectionRecord {
                scene_id: 1,
                im_id: i,
                obj_id: 7,
                pred_mask: Mask::new(8, 8, pred_bits).unwrap(),
                gt_mask: Mask::new(8, 8, gt_bits).unwrap(),
                pred_pose: pred,
                gt_pose: gt,
                score: 1.0,
                intrinsics: k(),
            }
        })
        .collect();
    let models = BTreeMap::from([(7, model)]);
    let taus = [0.0, 0.2, 0.4, 0.6, 0.8, 1.01];
    let rows = robustness_curve(&records, &models, &taus, &ArThresholds::default()).unwrap();
    assert_eq!(rows[0].n_records, 0);
    assert!(rows[0].ar_mssd.is_none());
    assert_eq!(rows.last().unwrap().n_records, records.len());
    assert!(rows.windows(2).all(|w| w[0].n_records <= w[1].n_records));
    assert!(robustness_curve(&records, &BTreeMap::new(), &taus, &ArThresholds::default()).is_err());
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(recall_curve(&[0.1], &[]).is_err());
    assert_eq!(recall_curve(&[], &[0.1]).unwrap(), 0.0);
    assert!(Mask::new(2, 2, vec![true; 3]).is_err());
    assert!(Mask::from_rle(2, 2, &[1, 2]).is_err());
    let a = Mask::new(2, 2, vec![true; 4]).unwrap();
    let b = Mask::new(1, 4, vec![true; 4]).unwrap();
    assert!(mask_iou(&a, &b).is_err());
    assert!(ObjectModel::new(vec![Vector3::zeros(); 3], vec![]).is_err());
}

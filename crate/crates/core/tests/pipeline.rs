use gigapose_core::config::Config;
use gigapose_core::pipeline::{bop_csv, parse_bop_csv, Pipeline, BOP_HEADER};
use gigapose_core::synthetic::{SceneConfig, SyntheticScene};
use gigapose_core::Execution;

fn scene(n: usize) -> SyntheticScene {
    SyntheticScene::generate(SceneConfig {
        n_detections: n,
        seed: 11,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn every_detection_gets_one_row() {
    let scene = scene(6);
    let store = scene.store().unwrap();
    let weights = scene.weights().unwrap();
    let pipeline = Pipeline::new(&store, Some(&weights), scene.config.pipeline_config()).unwrap();
    let mut queries = scene.queries();
    // an empty query mask cannot be matched and must soft-fail
    let side = queries[2].invariant.height() * queries[2].invariant.width();
    let dim = queries[2].invariant.dim();
    queries[2].invariant = gigapose_core::featuregrid::FeatureGrid::from_unnormalized(
        queries[2].invariant.height(),
        queries[2].invariant.width(),
        dim,
        vec![1.0; side * dim],
        vec![false; side],
    )
    .unwrap();
    let results = pipeline.infer_batch(&queries, Execution::Parallel);
    assert_eq!(results.len(), queries.len());
    assert!(results[2].estimate.is_err());
    assert_eq!(results[2].score, 0.0);
    assert!(results.iter().enumerate().all(|(i, r)| i == 2 || r.estimate.is_ok()));

    let csv = bop_csv(&results, false);
    assert!(csv.starts_with(BOP_HEADER));
    let rows = parse_bop_csv(&csv).unwrap();
    assert_eq!(rows.len(), queries.len());
    for (row, q) in rows.iter().zip(&queries) {
        assert_eq!((row.scene_id, row.im_id, row.obj_id), (q.scene_id, q.im_id, q.obj_id));
        assert_eq!(row.time, -1.0);
    }
}

#[test]
fn batch_output_does_not_depend_on_the_schedule() {
    let scene = scene(8);
    let store = scene.store().unwrap();
    let weights = scene.weights().unwrap();
    let pipeline = Pipeline::new(&store, Some(&weights), scene.config.pipeline_config()).unwrap();
    let queries = scene.queries();
    let seq = bop_csv(&pipeline.infer_batch(&queries, Execution::Sequential), false);
    let par = bop_csv(&pipeline.infer_batch(&queries, Execution::Parallel), false);
    assert_eq!(seq, par);
    let one_by_one: Vec<_> = queries.iter().map(|q| pipeline.infer_one(q, Execution::Parallel)).collect();
    assert_eq!(seq, bop_csv(&one_by_one, false));
}

#[test]
fn single_mode_needs_matching_weights() {
    let scene = scene(1);
    let store = scene.store().unwrap();
    assert!(Pipeline::new(&store, None, scene.config.pipeline_config()).is_err());
    let other = SyntheticScene::generate(SceneConfig {
        variant_dim: 12,
        n_detections: 1,
        ..SceneConfig::default()
    })
    .unwrap()
    .weights()
    .unwrap();
    assert!(Pipeline::new(&store, Some(&other), scene.config.pipeline_config()).is_err());
    let bad = Config {
        ransac_delta_px: -1.0,
        ..scene.config.pipeline_config()
    };
    let weights = scene.weights().unwrap();
    assert!(Pipeline::new(&store, Some(&weights), bad).is_err());
}

#[test]
fn malformed_csv_is_rejected() {
    assert!(parse_bop_csv("1,2,3,0.5,1 0 0 0 1 0 0 0 1,0 0 1").is_err());
    assert!(parse_bop_csv("1,2,3,0.5,1 0 0 0 1 0 0 0,0 0 1,-1").is_err());
    assert!(parse_bop_csv("x,2,3,0.5,1 0 0 0 1 0 0 0 1,0 0 1,-1").is_err());
    assert_eq!(parse_bop_csv(&format!("{BOP_HEADER}\n")).unwrap().len(), 0);
}

use gigapose_core::featuregrid::synth::{canonical_view, SyntheticObject, DEFAULT_RADIUS_PX};
use gigapose_core::featuregrid::PatchGeometry;
use gigapose_core::geometry::compose_rotation;
use gigapose_core::store::TemplateStore;
use gigapose_core::synthetic::{SceneConfig, SyntheticScene};
use gigapose_core::Execution;

fn scene() -> SyntheticScene {
    SyntheticScene::generate(SceneConfig {
        subdivisions: 1,
        n_detections: 4,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn saved_store_retrieves_like_the_original() {
    let scene = scene();
    let store = scene.store().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obj.gpst");
    store.save(&path).unwrap();
    let loaded = TemplateStore::load(&path).unwrap();
    assert_eq!(loaded.templates(), store.templates());
    assert_eq!(loaded.object_id(), store.object_id());

    let geom = PatchGeometry::default();
    let object = SyntheticObject::new(scene.config.object_seed, scene.config.dim).unwrap();
    for v in loaded.viewpoints().viewpoints.iter().step_by(4) {
        let q = object.render(&compose_rotation(0.4, &v.rotation), &canonical_view(&geom, DEFAULT_RADIUS_PX), &geom).unwrap();
        assert_eq!(
            loaded.index().retrieve_topk(&q, 5, 0.5, Execution::Sequential).unwrap(),
            store.index().retrieve_topk(&q, 5, 0.5, Execution::Sequential).unwrap()
        );
    }
}

#[test]
fn serialization_is_stable() {
    let store = scene().store().unwrap();
    let bytes = store.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"GPST");
    let again = TemplateStore::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn damaged_bytes_are_rejected() {
    let bytes = scene().store().unwrap().to_bytes().unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(TemplateStore::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(TemplateStore::from_bytes(&wrong_magic).is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(TemplateStore::from_bytes(&trailing).is_err());
}

#[test]
fn template_sets_must_cover_each_viewpoint_once() {
    let scene = scene();
    let geom = scene.config.geometry;
    let mut templates = scene.templates.clone();
    assert!(TemplateStore::new(1, 1, geom, templates.clone()).is_ok());

    let mut dup = templates.clone();
    dup[1].viewpoint = dup[0].viewpoint;
    let err = TemplateStore::new(1, 1, geom, dup).unwrap_err().to_string();
    assert!(err.contains("duplicate"), "{err}");

    templates.pop();
    assert!(TemplateStore::new(1, 1, geom, templates).is_err());

    let mut shape = scene.templates.clone();
    shape[2].invariant = shape[2].variant.clone();
    assert!(TemplateStore::new(1, 1, geom, shape).is_err());

    let mut depth = scene.templates.clone();
    depth[0].tz = -1.0;
    assert!(TemplateStore::new(1, 1, geom, depth).is_err());
}

#[test]
fn onboarding_reads_the_exported_directory() {
    let scene = scene();
    let dir = tempfile::tempdir().unwrap();
    scene.write_dir(dir.path()).unwrap();
    let store = TemplateStore::onboard(&dir.path().join("templates"), 1, scene.config.geometry).unwrap();
    assert_eq!(store.templates(), scene.store().unwrap().templates());
    assert!(TemplateStore::onboard(&dir.path().join("templates"), 2, scene.config.geometry).is_err());
    assert!(TemplateStore::onboard(&dir.path().join("missing"), 1, scene.config.geometry).is_err());
}

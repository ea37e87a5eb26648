use scenefit::io::{
    parse_versioned, read_csv, read_versioned, write_csv, write_json, FitsFile, IoError, MetricRow,
    SceneFile,
};
use scenefit::pipeline::{self, GenerateOptions};
use scenefit_core::synth::{NoiseConfig, PlacementConfig};
use scenefit_core::{AttributeCatalog, BodyModel, Intrinsics};

fn scenes(with_gt: bool) -> SceneFile {
    let opts = GenerateOptions {
        n_scenes: 4,
        persons_min: 1,
        persons_max: 3,
        seed: 17,
        with_gt,
        camera: Intrinsics::default(),
        placement: PlacementConfig::default(),
        noise: NoiseConfig::noisy(),
    };
    pipeline::generate(
        &BodyModel::default_humanoid(),
        &AttributeCatalog::default(),
        &opts,
    )
    .unwrap()
}

#[test]
fn scene_file_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let original = scenes(true);
    write_json(&a, &original).unwrap();
    let back: SceneFile = read_versioned(&a).unwrap();
    assert_eq!(back, original);
    write_json(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn fits_round_trip_through_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fits.json");
    let m = BodyModel::default_humanoid();
    let mut cfg = pipeline::load_config(Some("profile=multihmr_like")).unwrap();
    for s in &mut cfg.stages {
        s.iterations = 3;
    }
    let out = pipeline::fit_all(&m, &scenes(false), &cfg, Some(1)).unwrap();
    write_json(&path, &out.fits).unwrap();
    let back: FitsFile = read_versioned(&path).unwrap();
    assert_eq!(back, out.fits);
}

#[test]
fn scenes_without_ground_truth_omit_it() {
    let file = scenes(false);
    let text = serde_json::to_string(&file).unwrap();
    assert!(!text.contains("\"gt\""));
    assert!(file
        .scenes
        .iter()
        .all(|s| s.ground_truth(&file.camera).is_none()));
}

#[test]
fn missing_camera_is_located() {
    let mut v = serde_json::to_value(scenes(true)).unwrap();
    v.as_object_mut().unwrap().remove("camera");
    let err = parse_versioned::<SceneFile>(&v.to_string(), "s.json").unwrap_err();
    match err {
        IoError::Parse { at, .. } => assert_eq!(at, "$.camera"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn bad_nested_value_is_located() {
    let mut v = serde_json::to_value(scenes(true)).unwrap();
    v["scenes"][1]["persons"][0]["init"]["tau"] = serde_json::json!("far");
    let err = parse_versioned::<SceneFile>(&v.to_string(), "s.json").unwrap_err();
    match err {
        IoError::Parse { at, .. } => assert_eq!(at, "$.scenes[1].persons[0].init.tau"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn other_versions_are_refused() {
    let mut v = serde_json::to_value(scenes(true)).unwrap();
    v["version"] = serde_json::json!("2");
    let err = parse_versioned::<SceneFile>(&v.to_string(), "s.json").unwrap_err();
    assert!(
        matches!(err, IoError::Version { ref found, .. } if found == "2"),
        "{err}"
    );
}

#[test]
fn wrong_cue_count_fails_validation() {
    let mut file = scenes(true);
    file.scenes[2].persons[0]
        .cues
        .as_mut()
        .unwrap()
        .keypoints
        .points
        .pop();
    let err = file
        .validate(&BodyModel::default_humanoid(), "s.json")
        .unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("$.scenes[2].persons[0].cues.keypoints"),
        "{msg}"
    );
}

#[test]
fn duplicate_ids_fail_validation() {
    let mut file = scenes(true);
    file.scenes[1].id = file.scenes[0].id;
    assert!(file
        .validate(&BodyModel::default_humanoid(), "s.json")
        .is_err());
}

#[test]
fn metric_rows_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = BodyModel::default_humanoid();
    let c = AttributeCatalog::default();
    let (_, report) = pipeline::evaluate(&m, &c, &scenes(true), None).unwrap();
    let row = MetricRow::from_report("init", &report);
    write_csv(&path, std::slice::from_ref(&row)).unwrap();
    let back: Vec<MetricRow> = read_csv(&path).unwrap();
    assert_eq!(back, vec![row]);
}

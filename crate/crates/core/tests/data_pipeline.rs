use std::fs;

use voxocc::config::RunConfig;
use voxocc::losses::class_frequencies;
use voxocc::metrics::{iou_per_class, miou, ConfusionMatrix};
use voxocc::synth::{generate_dataset, Manifest, SceneConfig, MANIFEST_FILE};
use voxocc::train::{evaluate, Dataset, Model};
use voxocc::voxel::VoxelGrid;

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn dataset_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SceneConfig { seed: 10, ..SceneConfig::desk() };
    let manifest = generate_dataset(&cfg, 5, tmp.path()).unwrap();
    let files = dir_bytes(tmp.path());
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".voxg")).count(), 5);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".voxt")).count(), 5);
    let text = fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 5);

    let read = Manifest::read(tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read.entries, manifest.entries);
    let scenes = read.load_all(&cfg.label_space).unwrap();
    for (i, (features, grid)) in scenes.iter().enumerate() {
        grid.validate(&cfg.label_space).unwrap();
        assert_eq!(features.shape(), &[8, 8, 32, 32]);
        assert_eq!(read.entries[i].seed, 10 + i as u64);
    }
    assert_ne!(scenes[0].1, scenes[1].1);

    let again = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 5, again.path()).unwrap();
    assert_eq!(dir_bytes(again.path()), files);
}

#[test]
fn missing_scene_file_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(&SceneConfig::desk(), 2, tmp.path()).unwrap();
    fs::remove_file(tmp.path().join("scene_0001.voxg")).unwrap();
    let err = Manifest::read(tmp.path().join(MANIFEST_FILE))
        .unwrap()
        .load_all(&SceneConfig::desk().label_space)
        .unwrap_err();
    assert!(err.to_string().contains("scene_0001.voxg"), "{err}");
}

#[test]
fn zero_classifier_predicts_one_class() {
    let cfg = RunConfig::parse("head.base_channels = 4\nhead.zero_classifier = true\ndata.eval_scenes = 2\n").unwrap();
    let data = Dataset::load(&cfg).unwrap();
    let model = Model::<f64>::new(&cfg, data.train[0].features.shape()).unwrap();
    let report = evaluate(&model, &data.eval, &data.label_space).unwrap();

    // every voxel predicted as class 0; IoU from the counts directly
    let mut cm = ConfusionMatrix::new(6);
    for s in &data.eval {
        let pred = VoxelGrid::filled(*s.grid.geometry(), 0);
        assert_eq!(model.predict(&s.features, &s.grid).unwrap(), pred);
        cm.accumulate(&pred, &s.grid).unwrap();
    }
    let stats = class_frequencies(data.eval.iter().map(|s| &s.grid), &data.label_space).unwrap();
    let total: u64 = stats.total();
    let expected_iou0 = stats.counts()[0] as f64 / total as f64;
    let per_class = iou_per_class(&cm);
    assert_eq!(per_class[0], Some(expected_iou0));
    let present = (1..5).filter(|&c| stats.counts()[c] > 0).count() as f64;
    let expected = expected_iou0 / (1.0 + present);
    assert!((report.miou - expected).abs() < 1e-15);
    assert_eq!(report.miou, miou(&per_class, &data.label_space).unwrap());
}

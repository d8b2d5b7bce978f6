use advdet::pipeline::{
    generate_synthetic_dataset, load_frames, load_voc_style, save_image, write_voc_style, RunConfig, SyntheticConfig,
};
use advdet::{Error, Execution, Image};

#[test]
fn synthetic_dataset_survives_voc_round_trip() {
    let cfg = SyntheticConfig {
        num_images: 20,
        seed: 4,
        ..Default::default()
    };
    let ds = generate_synthetic_dataset(&cfg, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_voc_style(dir.path(), "train", &ds.classes, &ds.samples).unwrap();
    let report = load_voc_style(dir.path(), "train", None).unwrap();
    assert!(report.issues.is_empty());
    let manifest = report.manifest;
    assert_eq!(manifest.classes, ds.classes);
    let loaded = manifest.load_images().unwrap();
    assert_eq!(loaded.len(), ds.samples.len());
    for (a, b) in loaded.iter().zip(&ds.samples) {
        assert_eq!(a.image.id(), b.image.id());
        assert_eq!(a.objects, b.objects);
        for (p, q) in a.image.pixels().iter().zip(b.image.pixels()) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn config_serialization_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.yaml");
    std::fs::write(&path, "seed: 9\ndag:\n  max_iterations: 40\ngenerator:\n  linf_cap: null\n").unwrap();
    let first = RunConfig::load(&path).unwrap();
    assert_eq!(first.generator.linf_cap, None);
    let again = dir.path().join("b.yaml");
    first.save(&again).unwrap();
    let text1 = std::fs::read_to_string(&again).unwrap();
    RunConfig::load(&again).unwrap().save(&again).unwrap();
    assert_eq!(std::fs::read_to_string(&again).unwrap(), text1);
}

#[test]
fn frames_load_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["000003", "000001", "000002"].iter().enumerate() {
        save_image(&Image::filled(*name, 16, 16, i as f32 / 4.0).unwrap(), &dir.path().join(format!("{name}.png"))).unwrap();
    }
    let seq = load_frames(dir.path()).unwrap();
    let ids: Vec<&str> = seq.frames().iter().map(|f| f.id()).collect();
    assert_eq!(ids, ["000001", "000002", "000003"]);
}

#[test]
fn mixed_frame_sizes_name_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    save_image(&Image::filled("000001", 16, 16, 0.2).unwrap(), &dir.path().join("000001.png")).unwrap();
    save_image(&Image::filled("000002", 20, 16, 0.2).unwrap(), &dir.path().join("000002.png")).unwrap();
    match load_frames(dir.path()) {
        Err(Error::Format(msg)) => assert!(msg.contains("000002"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

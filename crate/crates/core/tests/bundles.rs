use raywatch::features::FeatureMatrix;
use raywatch::imagery::FlipAxis;
use raywatch::imagery::{write_dataset, Preprocess, SynthSeries};
use raywatch::pipelines::{
    evaluate, flip_experiment, sample_eval_pool, train_offline, train_on_features, FeatureSource,
    ModelSpec, OfflineBundle, PipelineError, TrainConfig,
};
use raywatch::Label;

fn small_config(model: ModelSpec) -> TrainConfig {
    TrainConfig {
        model,
        pca: Some(16),
        preprocess: Preprocess::default(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_dataset(dir: &std::path::Path) -> raywatch::imagery::Manifest {
    let mut series = SynthSeries::with_seed(12);
    series.base.height = 48;
    series.base.width = 24;
    write_dataset(dir, &series.dataset(60, 12)).unwrap()
}

#[test]
fn offline_training_is_byte_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    for model in [ModelSpec::iforest(50), ModelSpec::ocsvm(1e-3, 0.05)] {
        let a: OfflineBundle<f64> = train_offline(&manifest, &small_config(model)).unwrap();
        let b: OfflineBundle<f64> = train_offline(&manifest, &small_config(model)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.model_id(), b.model_id());
        let path = dir.path().join(format!("{}.fmxs", model.name()));
        a.save(&path).unwrap();
        let loaded = OfflineBundle::<f64>::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), a.to_bytes());
        let ra = evaluate(&a, &manifest);
        let rb = evaluate(&loaded, &manifest);
        assert_eq!(ra.verdicts_jsonl(), rb.verdicts_jsonl());
        assert_eq!(a.provenance.n_train, 60);
        assert!(a.warm_up);
    }
}

#[test]
fn flips_report_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let bundle: OfflineBundle<f64> =
        train_offline(&manifest, &small_config(ModelSpec::iforest(50))).unwrap();
    let pool = sample_eval_pool(&manifest, 10, 5, 1).unwrap();
    let axes = [
        FlipAxis::Identity,
        FlipAxis::Horizontal,
        FlipAxis::Vertical,
        FlipAxis::Both,
    ];
    let reports = flip_experiment(&bundle, &pool, &axes);
    for (_, r) in &reports {
        assert_eq!(r.total(), 15);
        assert_eq!(r.valid_passed + r.valid_flagged, 10);
        assert_eq!(r.anomalous_missed + r.anomalous_flagged, 5);
        let w = r.weighted_accuracy().unwrap();
        assert!((w - (r.correct_valid() + r.correct_anomalous()) as f64 / 15.0).abs() < 1e-12);
    }
    let table = raywatch::pipelines::flip_table(&reports);
    assert!(table.lines().next().unwrap().contains("normal"));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn external_features_cannot_featurize_images() {
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0 + i as f64])
        .collect();
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let cfg = TrainConfig {
        pca: None,
        ..small_config(ModelSpec::iforest(10))
    };
    let b = train_on_features(
        &x,
        &[Label::Valid; 10],
        &cfg,
        FeatureSource::External,
        "d".into(),
    )
    .unwrap();
    let img = raywatch::imagery::ImageTensor::filled(2, 2, [0, 0, 0]).unwrap();
    assert!(b.classify_image(&img).is_err());
    assert!(b.classify_row(vec![1.0, 2.0, 3.0]).is_ok());
    assert!(matches!(
        b.classify_row(vec![1.0]),
        Err(PipelineError::DimensionMismatch { .. })
    ));
}

#[test]
fn corrupt_bundles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fmxs");
    std::fs::write(&path, b"FMXSgarbage").unwrap();
    assert!(OfflineBundle::<f64>::load(&path).is_err());
    assert!(OfflineBundle::<f64>::load(&dir.path().join("missing")).is_err());
}

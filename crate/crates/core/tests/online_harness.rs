use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raywatch::features::FeatureMatrix;
use raywatch::imagery::{write_dataset, Preprocess, SynthSeries};
use raywatch::pipelines::{
    emit_prediction_plot_data, online_records_jsonl, run_online, Access, ManifestSource,
    MatrixSource, ModelSpec, OnlineConfig, RecordingSource,
};
use raywatch::Label;

fn stream(n: usize, anomaly_at: usize) -> (FeatureMatrix<f64>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let shift = if i >= anomaly_at { 6.0 } else { 0.0 };
        rows.push(
            (0..5)
                .map(|_| rng.gen_range(-1.0..1.0) + shift)
                .collect::<Vec<f64>>(),
        );
        labels.push(if i >= anomaly_at {
            Label::Anomalous
        } else {
            Label::Valid
        });
    }
    (FeatureMatrix::from_rows(&rows).unwrap(), labels)
}

fn config() -> OnlineConfig {
    OnlineConfig {
        start: 4,
        warm_up_threshold: 20,
        model: ModelSpec::iforest(25),
        ..OnlineConfig::default()
    }
}

#[test]
fn step_t_trains_on_exactly_t_frames_and_flags_warm_up() {
    let (x, labels) = stream(40, 35);
    let cfg = config();
    let (records, summary) = run_online(
        &MatrixSource {
            x: &x,
            labels: &labels,
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(records.len(), 40 - cfg.start);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r.step, cfg.start + k);
        assert_eq!(r.training_size, r.step);
        assert_eq!(r.warm_up, r.step < cfg.warm_up_threshold);
        assert_eq!(r.last_seen.position, r.step);
        assert_eq!(r.unseen.len(), cfg.lookahead.min(40 - r.step));
        assert_eq!(
            r.unseen.first().map(|p| p.position),
            (r.step < 40).then_some(r.step + 1)
        );
    }
    assert_eq!(summary.warm_up_steps, 20 - cfg.start);
    assert_eq!(summary.peak_live_models, 1);
    assert_eq!(summary.live_models_after, 0);
    let first_anomaly = records.iter().find(|r| r.step == 34).unwrap();
    assert_eq!(first_anomaly.unseen[0].predicted, Label::Anomalous);
}

#[test]
fn labels_are_read_only_for_unseen_frames() {
    let (x, labels) = stream(30, 25);
    let cfg = config();
    let source = RecordingSource::new(MatrixSource {
        x: &x,
        labels: &labels,
    });
    run_online(&source, &cfg).unwrap();
    let log = source.take();
    // Split label reads into one contiguous run per step.
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut prev_was_label = false;
    for a in &log {
        match *a {
            Access::Label(i) => {
                if !prev_was_label
                    || runs
                        .last()
                        .and_then(|r| r.last())
                        .is_none_or(|&l| i != l + 1)
                {
                    runs.push(Vec::new());
                }
                runs.last_mut().unwrap().push(i);
                prev_was_label = true;
            }
            Access::Features(_) => prev_was_label = false,
        }
    }
    let steps: Vec<usize> = (cfg.start..30).collect();
    assert_eq!(runs.len(), steps.len());
    for (run, &t) in runs.iter().zip(&steps) {
        let expected: Vec<usize> = (t..(t + cfg.lookahead).min(30)).collect();
        assert_eq!(run, &expected, "step {t}");
    }
    // Each frame is featurized exactly once.
    let features: Vec<usize> = log
        .iter()
        .filter_map(|a| {
            if let Access::Features(i) = a {
                Some(*i)
            } else {
                None
            }
        })
        .collect();
    assert_eq!(features, (0..30).collect::<Vec<_>>());
}

#[test]
fn runs_are_reproducible() {
    let (x, labels) = stream(30, 25);
    let src = MatrixSource {
        x: &x,
        labels: &labels,
    };
    let (a, _) = run_online(&src, &config()).unwrap();
    let (b, _) = run_online(&src, &config()).unwrap();
    assert_eq!(online_records_jsonl(&a), online_records_jsonl(&b));
    let plot = emit_prediction_plot_data(&a);
    assert_eq!(plot.lines().count(), a.len() + 1);
    assert!(plot.starts_with("step\ttraining_size\tpercent_correct"));
}

#[test]
fn image_stream_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut series = SynthSeries::with_seed(4);
    series.base.height = 32;
    series.base.width = 16;
    let manifest = write_dataset(dir.path(), &series.dataset(20, 2)).unwrap();
    let source = ManifestSource {
        manifest: &manifest,
        preprocess: Preprocess::default(),
    };
    let (records, summary) = run_online::<f32, _>(&source, &config()).unwrap();
    assert_eq!(records.len(), 22 - 4);
    assert_eq!(summary.live_models_after, 0);
}

#[test]
fn too_short_streams_are_rejected() {
    let (x, labels) = stream(4, 4);
    assert!(run_online(
        &MatrixSource {
            x: &x,
            labels: &labels
        },
        &config()
    )
    .is_err());
}

//! Library-level pipeline: generate, persist, train, checkpoint, evaluate.

use asf_core::dataset::{generate_dataset, label_rows, load_dataset, save_dataset};
use asf_core::head::{compute_mask, read_checkpoint, write_checkpoint};
use asf_core::train::{evaluate, train, train_from, EvalReport};
use asf_core::{BackboneStub, DatasetSpec, HeadConfig, HeadParams, TrainConfig, ViewPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        num_videos: 32,
        activities: 4,
        t_full: 64,
        forbidden_pairs: vec![(2, 3)],
        ..DatasetSpec::default()
    }
}

fn small_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        finetune_iterations: iterations / 4,
        batch_size: 4,
        base_rate: 2,
        tuning_rates: vec![1, 2],
        ..TrainConfig::default()
    }
}

fn head() -> HeadConfig {
    HeadConfig {
        channels: 16,
        feature_channels: 8,
        observations: 4,
        groups: 2,
        ..HeadConfig::desk(4)
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let spec = small_spec();
    let videos = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = save_dataset(dir.path(), &spec, &videos).unwrap();
    let (manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(loaded.len(), videos.len());
    for (a, b) in videos.iter().zip(&loaded) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.regions, b.regions);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.frames.data()), bits(b.frames.data()));
    }
    assert_eq!(manifest.label_rows(), label_rows(&videos));
}

#[test]
fn training_lowers_the_loss_and_checkpoints_reproduce_scores() {
    let spec = small_spec();
    let videos = generate_dataset(&spec).unwrap();
    let backbone = BackboneStub::new(spec.channels, 16, 4, 2, 7).unwrap();
    let mask = compute_mask(&label_rows(&videos), spec.activities).unwrap();
    let cfg = small_train(200);
    let out = train(&videos, &backbone, &head(), &cfg, Some(&mask)).unwrap();
    assert_eq!(out.losses.len(), cfg.total_iterations());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&out.losses[180..200]) < mean(&out.losses[..20]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.asfh");
    write_checkpoint(&path, &out.params).unwrap();
    let restored = read_checkpoint(&path).unwrap();
    let plan = ViewPlan::evenly_spaced(spec.t_full, &[(1, 2), (2, 1)]).unwrap();
    let (scores_a, report_a) = evaluate(&videos, &backbone, &out.params, Some(&mask), &plan).unwrap();
    let (scores_b, report_b) = evaluate(&videos, &backbone, &restored, Some(&mask), &plan).unwrap();
    assert_eq!(scores_a, scores_b);
    assert_eq!(report_a.map.to_bits(), report_b.map.to_bits());
    assert_rows_match_positive_activities(&report_a, &label_rows(&videos));
}

fn assert_rows_match_positive_activities(report: &EvalReport, labels: &[Vec<u8>]) {
    let with_positives = (0..labels[0].len()).filter(|&a| labels.iter().any(|r| r[a] == 1)).count();
    assert_eq!(report.scored(), with_positives);
    assert_eq!(report.to_csv().lines().count(), 2 + with_positives);
}

#[test]
fn training_is_independent_of_the_thread_count() {
    let spec = small_spec();
    let videos = generate_dataset(&spec).unwrap();
    let backbone = BackboneStub::new(spec.channels, 16, 4, 2, 7).unwrap();
    let mask = compute_mask(&label_rows(&videos), spec.activities).unwrap();
    let cfg = small_train(12);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let init = HeadParams::init(&head(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            train_from(init, &videos, &backbone, &cfg, Some(&mask), |_, _| {}).unwrap()
        })
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.losses, three.losses);
    for ((na, ta), (nb, tb)) in one.params.named_tensors().into_iter().zip(three.params.named_tensors()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
}

mod common;

use advdet::advgen::{load_checkpoint, train_ablation, train_generator, GeneratorConfig, TrainOptions, UeaGenerator};
use advdet::eval::timing_benchmark;
use advdet::losses::LossWeights;
use advdet::nn::NamedTensors;
use advdet::Error;

fn config() -> GeneratorConfig {
    GeneratorConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 21,
        // The briefly trained test victim is less confident than a fully trained one.
        score_threshold: 0.3,
        ..Default::default()
    }
}

fn weights() -> LossWeights {
    LossWeights {
        epsilon: vec![1.0, 2.0],
        ..Default::default()
    }
}

fn bits(t: &NamedTensors) -> Vec<(String, Vec<u32>)> {
    t.iter()
        .map(|(k, v)| {
            let vals: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            (k.clone(), vals.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}

#[test]
fn same_seed_same_trajectory_and_frozen_victim() {
    let t = common::trained();
    let data = &t.train[..24];
    let before = bits(&t.proposal.params());
    let a = train_generator(&t.proposal, data, &weights(), &config(), &TrainOptions::default()).unwrap();
    let b = train_generator(&t.proposal, data, &weights(), &config(), &TrainOptions::default()).unwrap();
    assert_eq!(bits(&t.proposal.params()), before);
    assert_eq!(a.log.len(), 3);
    for (x, y) in a.log.iter().zip(&b.log) {
        let rel = (x.report.total - y.report.total).abs() / x.report.total.abs().max(1e-12);
        assert!(rel <= 1e-6, "step {}: {} vs {}", x.step, x.report.total, y.report.total);
    }
    assert_eq!(bits(a.generator.params()), bits(b.generator.params()));
    assert!(a.log.iter().any(|r| r.report.dag_class != 0.0), "no proposals were attacked");

    let other = GeneratorConfig { seed: 22, ..config() };
    let c = train_generator(&t.proposal, data, &weights(), &other, &TrainOptions::default()).unwrap();
    assert_ne!(bits(a.generator.params()), bits(c.generator.params()));
}

#[test]
fn ablation_logs_no_feature_term() {
    let t = common::trained();
    let g = train_ablation(&t.proposal, &t.train[..16], &weights(), &config(), &TrainOptions::default()).unwrap();
    assert_eq!(g.weights.epsilon, vec![0.0, 0.0]);
    for r in &g.log {
        let expected = r.report.gan_g + g.weights.alpha * r.report.l2 + g.weights.beta * r.report.dag_class;
        assert!((r.report.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    }
}

#[test]
fn zero_epochs_keep_initial_weights_and_write_a_checkpoint() {
    let t = common::trained();
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        log_path: Some(dir.path().join("log.jsonl")),
    };
    let cfg = GeneratorConfig { epochs: 0, ..config() };
    let g = train_generator(&t.proposal, &t.train[..8], &weights(), &cfg, &options).unwrap();
    assert!(g.log.is_empty());
    let init = UeaGenerator::initialized(&cfg).unwrap();
    assert_eq!(bits(g.generator.params()), bits(init.params()));
    let loaded = load_checkpoint(&dir.path().join("ckpt/epoch-0")).unwrap();
    assert_eq!(loaded.manifest.epoch, 0);
    assert_eq!(bits(loaded.generator.params()), bits(init.params()));
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"kind\":\"header\""));
}

#[test]
fn checkpoints_reproduce_outputs_bitwise() {
    let t = common::trained();
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("log.jsonl")),
    };
    let g = train_generator(&t.proposal, &t.train[..16], &weights(), &config(), &options).unwrap();
    let loaded = load_checkpoint(&dir.path().join("epoch-1")).unwrap();
    assert_eq!(loaded.manifest.weights, weights());
    assert_eq!(loaded.targets.seed(), g.targets.seed());
    let probe = &t.test[0].image;
    assert_eq!(
        g.generator.generate(probe).unwrap().adversarial,
        loaded.generator.generate(probe).unwrap().adversarial
    );
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1 + g.log.len());
}

#[test]
fn setup_errors() {
    let t = common::trained();
    let opts = TrainOptions::default();
    let err = train_generator(&t.regression, &t.train[..8], &weights(), &config(), &opts).unwrap_err();
    assert!(matches!(err, Error::Capability { .. }));
    let one_layer = LossWeights {
        epsilon: vec![1.0],
        ..Default::default()
    };
    assert!(train_generator(&t.proposal, &t.train[..8], &one_layer, &config(), &opts).is_err());
    assert!(train_generator(&t.proposal, &[], &weights(), &config(), &opts).is_err());
}

#[test]
fn generate_time_does_not_depend_on_content() {
    let t = common::trained();
    let g = UeaGenerator::initialized(&GeneratorConfig::default()).unwrap();
    let images = common::images(&t.test[..20]);
    let stats = timing_benchmark(|img| g.generate(img), &images, 3).unwrap();
    assert!(stats.cv() < 0.2, "cv {} over {:?}", stats.cv(), stats.per_image);
}

use std::collections::BTreeMap;

use ndarray::{Array1, Axis};

use horde_core::data::{gen_cil, gen_synthetic_dataset, split_holdout, DatasetSpec, LabeledDataset, StreamTask};
use horde_core::extractor::{train_feature_extractor, ExtractorCheckpoint, ExtractorTraining, FeatureExtractor, SelfSupConfig};
use horde_core::harness::TrainProtocol;
use horde_core::nn::{Activation, MlpSpec};

struct Fixture {
    data: LabeledDataset,
    task: StreamTask,
    test: Vec<usize>,
}

fn fixture() -> Fixture {
    let data = gen_synthetic_dataset(&DatasetSpec::new(6, 60, [8, 8, 1], 11)).unwrap();
    let split = split_holdout(&data, 0.25, 11).unwrap();
    let scenario = gen_cil(&split.train, 4, 1, 2, 0.1, 5).unwrap();
    let task = scenario.tasks[0].clone();
    let test = split.test.iter().copied().filter(|&i| task.classes.contains(&data.labels[i])).collect();
    Fixture {
        task,
        data,
        test,
    }
}

fn train(fx: &Fixture, selfsup: &SelfSupConfig, seed: u64) -> FeatureExtractor {
    let spec = MlpSpec {
        input_dim: 64,
        hidden_dims: vec![48],
        embedding_dim: 16,
        activation: Activation::Relu,
    };
    let protocol = TrainProtocol {
        max_epochs: 30,
        base_lr: 0.02,
        batch_size: 16,
        ..TrainProtocol::default()
    };
    let opts = ExtractorTraining {
        spec: &spec,
        selfsup,
        protocol: &protocol,
        seed,
        warm_start: None,
    };
    train_feature_extractor(&fx.data, &fx.task, &opts).unwrap().0
}

// Nearest-class-mean probe on the held-out rows of the task's classes.
fn probe_accuracy(fx: &Fixture, fe: &FeatureExtractor) -> f64 {
    let train_emb = fe.embed(&fx.data.rows(&fx.task.train_indices()).view()).unwrap();
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &i) in train_emb.axis_iter(Axis(0)).zip(&fx.task.train_indices()) {
        let e = sums.entry(fx.data.labels[i]).or_insert((Array1::zeros(row.len()), 0));
        e.0 += &row;
        e.1 += 1;
    }
    let means: Vec<(usize, Array1<f64>)> = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let test_emb = fe.embed(&fx.data.rows(&fx.test).view()).unwrap();
    let correct = test_emb
        .axis_iter(Axis(0))
        .zip(&fx.test)
        .filter(|(row, &i)| {
            let best = means
                .iter()
                .min_by(|a, b| {
                    let da = (&a.1 - row).mapv(|v| v * v).sum();
                    let db = (&b.1 - row).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best.0 == fx.data.labels[i]
        })
        .count();
    correct as f64 / fx.test.len() as f64
}

#[test]
fn trained_embedding_separates_classes() {
    let fx = fixture();
    for selfsup in [SelfSupConfig::default(), SelfSupConfig::ce_only()] {
        let fe = train(&fx, &selfsup, 3);
        let acc = probe_accuracy(&fx, &fe);
        // Four classes with several appearance modes each: chance is 0.25.
        assert!(acc > 0.45, "probe accuracy {acc} with {selfsup:?}");
        assert_eq!(fe.trained_classes.iter().copied().collect::<Vec<_>>(), fx.task.classes);
        assert_eq!(fe.embedding_dim(), 16);
    }
}

#[test]
fn returned_extractor_is_frozen_and_deterministic() {
    let fx = fixture();
    let a = train(&fx, &SelfSupConfig::default(), 8);
    let b = train(&fx, &SelfSupConfig::default(), 8);
    assert!(a.net().is_frozen());
    assert_eq!(a.net().flat_params(), b.net().flat_params());
    let c = train(&fx, &SelfSupConfig::default(), 9);
    assert_ne!(a.net().flat_params(), c.net().flat_params());
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let fx = fixture();
    let fe = train(&fx, &SelfSupConfig::ce_only(), 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fe.json");
    fe.to_checkpoint().write(&path).unwrap();
    let back = FeatureExtractor::from_checkpoint(&ExtractorCheckpoint::read(&path).unwrap()).unwrap();
    let x = fx.data.rows(&fx.test);
    let (e1, e2) = (fe.embed(&x.view()).unwrap(), back.embed(&x.view()).unwrap());
    assert!(e1.iter().zip(e2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.trained_classes, fe.trained_classes);
    assert!(back.net().is_frozen());
}


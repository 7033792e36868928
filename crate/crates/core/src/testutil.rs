//! Small fixtures shared by unit tests.

use crate::data::{gen_cil, gen_synthetic_dataset, split_holdout, DataSplit, DatasetSpec, LabeledDataset, Scenario};
use crate::extractor::SelfSupConfig;
use crate::harness::TrainProtocol;
use crate::horde::HordeConfig;
use crate::nn::NetShape;

pub fn tiny_dataset(classes: usize, seed: u64) -> (LabeledDataset, DataSplit) {
    let data = gen_synthetic_dataset(&DatasetSpec::new(classes, 20, [4, 4, 1], seed)).unwrap();
    let split = split_holdout(&data, 0.2, seed).unwrap();
    (data, split)
}

pub fn tiny_cil(split: &DataSplit, initial: usize, tasks: usize, per_task: usize, seed: u64) -> Scenario {
    gen_cil(&split.train, initial, tasks, per_task, 0.2, seed).unwrap()
}

pub fn quick_protocol(epochs: usize) -> TrainProtocol {
    TrainProtocol {
        base_lr: 0.02,
        batch_size: 16,
        max_epochs: epochs,
        ..Default::default()
    }
}

pub fn tiny_horde(budget: usize) -> HordeConfig {
    HordeConfig {
        budget,
        extractor_protocol: quick_protocol(2),
        head_protocol: quick_protocol(3),
        selfsup: SelfSupConfig {
            ml_dim: 4,
            ..SelfSupConfig::default()
        },
        full_net: NetShape {
            hidden_dims: vec![12],
            embedding_dim: 6,
        },
        slim_net: NetShape {
            hidden_dims: vec![6],
            embedding_dim: 3,
        },
        ..HordeConfig::default()
    }
}

#![allow(dead_code)]

use partsdf::model::{ModelBundle, Variant};
use partsdf::nets::{DecoderConfig, EncoderConfig, LatentDecoderConfig, PartDecoderConfig};
use partsdf::shapegen::{generate_dataset, Dataset, DatasetConfig, FamilyParams};
use partsdf::trainer::{train, TrainConfig};

pub fn dataset_config(seed: u64) -> DatasetConfig {
    let mut dc = DatasetConfig::new(FamilyParams::from_name("mixer").unwrap(), 4, 2, seed);
    dc.samples_per_shape = 2000;
    dc.cloud_points = 400;
    dc.labeled_fraction = 0.5;
    dc
}

pub fn dataset(seed: u64) -> Dataset {
    generate_dataset(&dataset_config(seed)).unwrap()
}

pub fn train_config(variant: Variant, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { variant, epochs, batch_size: 2, samples_per_shape: 256, encoder_points: 64, ..Default::default() };
    cfg.arch.generic = DecoderConfig { num_layers: 3, hidden_width: 24, skip_layer: Some(1), ..cfg.arch.generic };
    cfg.arch.part = PartDecoderConfig { num_layers: 3, hidden_width: 24, ..cfg.arch.part };
    cfg.arch.encoder = EncoderConfig { point_widths: vec![16, 16], head_width: 16 };
    cfg.arch.latent_decoder = LatentDecoderConfig { trunk_width: 16, branch_width: 12 };
    cfg.arch.sdf_output_bias = 0.1;
    cfg
}

pub fn model(variant: Variant, epochs: usize) -> (Dataset, ModelBundle) {
    let data = dataset(11);
    let m = train(&data, &train_config(variant, epochs), None).unwrap().model;
    (data, m)
}

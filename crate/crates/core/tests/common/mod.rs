#![allow(dead_code)]

use dam::adapters::AdapterConfig;
use dam::compute::RngSeed;
use dam::data::{generate_synthetic, split, upsample, Dataset, EncodedDataset, Schema, SplitSpec, SyntheticSpec};
use dam::encoder::{EncoderConfig, Vocab};
use dam::eval::{AttackerConfig, EncodedSplits};
use dam::training::{DamModel, TrainingConfig};

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 600,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 16,
        dropout_p: 0.1,
    }
}

pub fn tiny_adapter() -> AdapterConfig {
    AdapterConfig {
        hidden_dim: 16,
        reduction_factor: 4,
        dropout_p: 0.1,
    }
}

pub fn tiny_training() -> TrainingConfig {
    TrainingConfig {
        max_epochs: 2,
        max_epochs_debias: 2,
        fusion_epochs: Some(2),
        patience: 1,
        ..TrainingConfig::default()
    }
}

pub fn tiny_attackers() -> AttackerConfig {
    AttackerConfig {
        members: 2,
        max_epochs: 3,
        ..AttackerConfig::default()
    }
}

pub struct Tiny {
    pub schema: Schema,
    pub data: EncodedSplits,
    pub model: DamModel,
}

/// A small encoder and dataset over the given attributes spec.
pub fn tiny(spec: SyntheticSpec) -> Tiny {
    let spec = SyntheticSpec {
        num_examples: 480,
        ..spec
    };
    let ds = generate_synthetic(&spec).unwrap();
    let sp = split(&ds, &SplitSpec::default()).unwrap();
    let schema = Schema::infer(&[&sp.train, &sp.val, &sp.test]);
    let train = upsample(&sp.train, &schema, 0).unwrap();
    let enc = tiny_encoder();
    let vocab = Vocab::build(train.examples.iter().map(|e| e.text.as_str()), enc.vocab_size);
    let attrs: Vec<String> = schema.attributes.keys().cloned().collect();
    let e = |d: &Dataset| EncodedDataset::new(d, &vocab, enc.max_seq_len, &attrs).unwrap();
    let data = EncodedSplits {
        train: e(&train),
        val: e(&sp.val),
        test: e(&sp.test),
    };
    let model = DamModel::new(enc, tiny_adapter(), schema.clone(), RngSeed(5)).unwrap();
    Tiny { schema, data, model }
}

pub fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

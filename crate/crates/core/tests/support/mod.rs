#![allow(dead_code)]

use mumtaffect::data::{preprocess, synth, ProcessedTrial};
use mumtaffect::layers::EncoderParams;
use mumtaffect::model::ModelConfig;

/// Same wiring as the default model, with narrow widths so tests run fast.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.enc = EncoderParams {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.1,
    };
    c.fusion = EncoderParams {
        d_model: 16,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.1,
    };
    c.proj_dim = 4;
    c.stim_emo_dim = 16;
    c
}

pub fn trials(users: usize, per_user: usize, seed: u64) -> Vec<ProcessedTrial> {
    synth::generate(&synth::SynthConfig::new(users, per_user, seed))
        .iter()
        .map(|r| preprocess(r).expect("synthetic trials preprocess"))
        .collect()
}

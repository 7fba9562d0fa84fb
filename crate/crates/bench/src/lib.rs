//! Shared fixtures for the criterion benches.

use lmrl_core::synthgen::generate_sequence;
use lmrl_core::tensorcore::ParamStore;
use lmrl_core::{GenConfig, LabeledSequence, ModelConfig};

/// A default-configured model and one synthetic sequence of length `n`.
pub fn fixture(n: usize) -> (ModelConfig, ParamStore, LabeledSequence) {
    let gen = GenConfig {
        seq_len: n,
        ..GenConfig::default()
    };
    let seq = generate_sequence(&gen, 7).expect("default generator config is valid");
    let cfg = ModelConfig::default();
    let store = cfg
        .build(n, gen.embed_dim, 11)
        .expect("default model config is valid");
    (cfg, store, seq)
}

//! Shared fixtures for the integration tests.
#![allow(dead_code)] // each test target uses a subset

use adaptts_core::config::{ModelConfig, PeftConfig, Strategy};
use adaptts_core::model::{Model, ADAPTED_REFERENCE_MEL, MIX_LOGITS};
use adaptts_core::params::TensorKind;
use adaptts_core::peft;
use adaptts_core::synth::{make_corpus, Corpus, CorpusParams};
use adaptts_core::tensor::{Mat, Scalar};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        d_spk: 8,
        mel_dim: 6,
        vocab_size: 40,
        gst_channels: 6,
        gst_tokens: 4,
        gst_heads: 2,
        aligner_dim: 8,
        max_frames: 256,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus<T: Scalar>(n_speakers: usize, utts: usize, seed: u64) -> Corpus<T> {
    let mut p = CorpusParams::pretrain(n_speakers, utts, seed);
    p.mel_dim = 6;
    make_corpus(&p).expect("corpus")
}

/// Fresh tiny model in an adapted state (mixing logits + reference mel set)
/// with the given strategy's tensors initialized.
pub fn tiny_adapted_model<T: Scalar>(strategy: Strategy, seed: u64) -> Model<T> {
    let mut model = Model::new(tiny_cfg(), 3, seed).expect("model");
    for i in 0..3 {
        let mel = Mat::from_fn(10, 6, |a, b| {
            T::from_f64(((a * 3 + b + i) as f64 * 0.37).sin() * 0.8)
        });
        model.set_reference_mel(i, mel);
    }
    model.peft = PeftConfig::with_strategy(strategy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    peft::init_peft_tensors(&mut model, &mut rng).expect("peft init");
    model.params.overlay(
        MIX_LOGITS,
        Mat::from_fn(1, 3, |_, j| T::from_f64(j as f64 * 0.1 - 0.1)),
        TensorKind::Parameter,
    );
    model.params.overlay(
        ADAPTED_REFERENCE_MEL,
        Mat::from_fn(9, 6, |a, b| T::from_f64(((a + 2 * b) as f64 * 0.23).cos() * 0.6)),
        TensorKind::Buffer,
    );
    model
}

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use mmger::arfusion::FusionConfig;
use mmger::encoders::{AdapterConfig, EncoderConfig};
use mmger::lm::{FrozenLm, LanguageModel, LmConfig};
use mmger::nn::ParamStore;
use mmger::synthdata::{Generator, GeneratorConfig, SymbolVocab, Utterance};
use mmger::trainer::{EncodersConfig, MmgerConfig, MmgerModel, TrainerConfig};

pub const LM_DIM: usize = 8;

pub fn tiny_generator() -> Generator {
    Generator::new(GeneratorConfig {
        num_symbols: 6,
        feature_dim: 4,
        num_accents: 2,
        shift_strengths: vec![0.0, 0.6],
        length_range: (2, 4),
        pairs_per_accent: 2,
        branching: 3,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

pub fn tiny_utterances(n: usize) -> Vec<Utterance> {
    tiny_generator().split("train", n).unwrap()
}

pub fn tiny_lm(vocab: SymbolVocab, dtype: DType) -> FrozenLm {
    let cfg = LmConfig {
        dim: LM_DIM,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        context_cap: 96,
    };
    let mut store = ParamStore::new(11, dtype);
    LanguageModel::new(&mut store, vocab, &cfg).unwrap();
    FrozenLm::from_weights(vocab, &cfg, &store.snapshot(), dtype, 1.0).unwrap()
}

pub fn tiny_config() -> MmgerConfig {
    let enc = EncoderConfig {
        input_dim: 4,
        num_layers: 2,
        model_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        subsample_factor: 1,
        tap_layers: vec![1, 2],
        conv_kernel: None,
    };
    MmgerConfig {
        encoders: EncodersConfig {
            shared: enc.clone(),
            asr: enc,
            adapter: AdapterConfig {
                num_layers: 1,
                num_heads: 2,
                ffn_dim: 16,
            },
        },
        arfusion: FusionConfig {
            fusion_dim: 6,
            classifier_hidden: 8,
            ..FusionConfig::default()
        },
        trainer: TrainerConfig {
            batch_size: 4,
            epochs: 2,
            ..TrainerConfig::default()
        },
        ..MmgerConfig::default()
    }
}

pub fn tiny_model(cfg: &MmgerConfig, dtype: DType) -> MmgerModel {
    let vocab = tiny_generator().config.vocab().unwrap();
    MmgerModel::new(cfg, tiny_lm(vocab, dtype), 2, dtype).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

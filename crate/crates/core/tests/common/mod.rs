#![allow(dead_code)]

use depscreen_core::data::PreprocessConfig;
use depscreen_core::encoder::{EncoderConfig, EncoderParams, TextEmbedderSpec};
use depscreen_core::model::ModelBundle;
use depscreen_core::training::TrainConfig;
use depscreen_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random unit vector of dimension `d`.
pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// T=6, input_dim=3, model_dim=8, 1 block, 2 heads, M=2.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        model_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 16,
        interpolation_factor: 2,
        embedding_dim: 4,
        ..EncoderConfig::new(3)
    }
}

/// Tiny encoders (visual dim 3, audio dim 2), 3-dim text, fusion hidden 5.
pub fn tiny_bundle(seed: u64) -> ModelBundle {
    let visual = EncoderParams::init(tiny_encoder(), seed).unwrap();
    let audio = EncoderParams::init(
        EncoderConfig {
            input_dim: 2,
            ..tiny_encoder()
        },
        seed + 1,
    )
    .unwrap();
    let text = TextEmbedderSpec {
        dimension: 3,
        ..TextEmbedderSpec::default()
    };
    ModelBundle::new(
        visual,
        audio,
        text,
        PreprocessConfig::default(),
        TrainConfig::default(),
        5,
    )
    .unwrap()
}

#![allow(dead_code)]

pub mod checks;

use std::path::{Path, PathBuf};

use ctxprobe::store::TraceStore;
use ctxprobe::synthetic::{synthetic_tensors, tensors_digest, SyntheticParams};
use ctxprobe::tensor::Activation;
use ctxprobe::weights::{save_model, ModelConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn vocab_text() -> String {
    std::fs::read_to_string(fixtures().join("vocab.txt")).unwrap()
}

/// Writes the BERT-base-shaped synthetic model into `dir`; returns the
/// tensor digest that the golden generator recorded as well.
pub fn write_synthetic_bert(dir: &Path) -> String {
    let config = ModelConfig::load(fixtures().join("synthetic_bert/config.json")).unwrap();
    let params = SyntheticParams::load(fixtures().join("synthetic_bert/params.json")).unwrap();
    let tensors = synthetic_tensors(&config, &params).unwrap();
    save_model(dir, &config, &tensors, &vocab_text(), "synthetic-bert").unwrap();
    tensors_digest(&tensors)
}

/// Small model over the real vocabulary, fast enough for CLI tests.
pub fn write_tiny_model(dir: &Path, activation: Activation) -> ModelConfig {
    write_small_model(dir, activation, 32)
}

pub fn write_small_model(dir: &Path, activation: Activation, hidden: usize) -> ModelConfig {
    let config = ModelConfig {
        num_layers: 12,
        hidden,
        heads: 4,
        intermediate: 4 * hidden,
        vocab_size: 30522,
        max_positions: 128,
        type_vocab_size: 2,
        layer_norm_eps: 1e-12,
        activation,
    };
    let params = SyntheticParams::load(fixtures().join("synthetic_bert/params.json")).unwrap();
    let tensors = synthetic_tensors(&config, &params).unwrap();
    save_model(dir, &config, &tensors, &vocab_text(), "synthetic-tiny").unwrap();
    config
}

pub fn golden_store(name: &str) -> TraceStore {
    TraceStore::read(fixtures().join("golden").join(name)).unwrap()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

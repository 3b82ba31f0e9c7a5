//! Model directory loading: `config.json`, `model.safetensors`, `vocab.txt`
//! and an optional `manifest.json` with file checksums.
//!
//! Tensor names follow the canonical BERT parameter names
//! (`encoder.layer.{i}.attention.self.query.weight`, ...). A leading `bert.`
//! prefix and the legacy `LayerNorm.gamma`/`LayerNorm.beta` spellings are
//! accepted on load. Linear weights keep the `[out, in]` layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Matrix};
use crate::tokenizer::Vocab;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f32 {
    1e-12
}

/// Encoder hyperparameters. Field names on disk are the standard BERT
/// `config.json` keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "num_hidden_layers")]
    pub num_layers: usize,
    #[serde(rename = "hidden_size")]
    pub hidden: usize,
    #[serde(rename = "num_attention_heads")]
    pub heads: usize,
    #[serde(rename = "intermediate_size")]
    pub intermediate: usize,
    pub vocab_size: usize,
    #[serde(rename = "max_position_embeddings")]
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    #[serde(rename = "hidden_act", default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            vocab_size,
            max_positions: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            activation: Activation::Gelu,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("layers, hidden size and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.intermediate != 4 * self.hidden {
            return bad(format!(
                "intermediate {} must be 4 x hidden ({})",
                self.intermediate, self.hidden
            ));
        }
        if self.vocab_size == 0 || self.max_positions < 2 || self.type_vocab_size == 0 {
            return bad("vocab, position and token-type tables must be non-empty".into());
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            return bad(format!("layer_norm_eps {} invalid", self.layer_norm_eps));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every tensor the encoder needs, with its expected shape.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, i) = (self.hidden, self.intermediate);
        let mut out = vec![
            ("embeddings.word_embeddings.weight".to_owned(), vec![self.vocab_size, h]),
            ("embeddings.position_embeddings.weight".to_owned(), vec![self.max_positions, h]),
            ("embeddings.token_type_embeddings.weight".to_owned(), vec![self.type_vocab_size, h]),
            ("embeddings.LayerNorm.weight".to_owned(), vec![h]),
            ("embeddings.LayerNorm.bias".to_owned(), vec![h]),
        ];
        for l in 0..self.num_layers {
            let p = format!("encoder.layer.{l}");
            for (suffix, shape) in [
                ("attention.self.query.weight", vec![h, h]),
                ("attention.self.query.bias", vec![h]),
                ("attention.self.key.weight", vec![h, h]),
                ("attention.self.key.bias", vec![h]),
                ("attention.self.value.weight", vec![h, h]),
                ("attention.self.value.bias", vec![h]),
                ("attention.output.dense.weight", vec![h, h]),
                ("attention.output.dense.bias", vec![h]),
                ("attention.output.LayerNorm.weight", vec![h]),
                ("attention.output.LayerNorm.bias", vec![h]),
                ("intermediate.dense.weight", vec![i, h]),
                ("intermediate.dense.bias", vec![i]),
                ("output.dense.weight", vec![h, i]),
                ("output.dense.bias", vec![h]),
                ("output.LayerNorm.weight", vec![h]),
                ("output.LayerNorm.bias", vec![h]),
            ] {
                out.push((format!("{p}.{suffix}"), shape));
            }
        }
        out
    }
}

/// `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingWeights {
    pub word: Matrix,
    pub position: Matrix,
    pub token_type: Matrix,
    pub norm: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub embeddings: EmbeddingWeights,
    pub layers: Vec<LayerWeights>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub source_checkpoint: String,
    /// File name -> lowercase hex SHA-256.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub probe_sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything read from a model directory.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub vocab: Vocab,
    /// SHA-256 of `model.safetensors`.
    pub checksum: String,
    pub manifest: Option<ExportManifest>,
    pub dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads and validates a model directory.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config = ModelConfig::load(dir.join(CONFIG_FILE))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let checksum = sha256_hex(&bytes);

    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ExportManifest = serde_json::from_str(&text)?;
        for (file, expected) in &manifest.checksums {
            let found = if file == WEIGHTS_FILE {
                checksum.clone()
            } else {
                sha256_file(dir.join(file))?
            };
            if !found.eq_ignore_ascii_case(expected.trim_start_matches("sha256:")) {
                return Err(Error::Checksum {
                    file: file.clone(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Some(manifest)
    } else {
        None
    };

    let weights = parse_weights(&config, &bytes)?;
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Validation(format!(
            "vocab.txt has {} entries but config declares {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    Ok(Model {
        config,
        weights,
        vocab,
        checksum,
        manifest,
        dir: dir.to_path_buf(),
    })
}

/// Parses a safetensors container into shape-checked, finite weights.
pub fn parse_weights(config: &ModelConfig, bytes: &[u8]) -> Result<ModelWeights> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let reader = TensorReader { st: &st, config };
    let h = config.hidden;
    let i = config.intermediate;

    let embeddings = EmbeddingWeights {
        word: reader.matrix("embeddings.word_embeddings.weight", config.vocab_size, h)?,
        position: reader.matrix("embeddings.position_embeddings.weight", config.max_positions, h)?,
        token_type: reader.matrix("embeddings.token_type_embeddings.weight", config.type_vocab_size, h)?,
        norm: reader.norm("embeddings.LayerNorm")?,
    };
    let layers = (0..config.num_layers)
        .map(|l| {
            let p = format!("encoder.layer.{l}");
            Ok(LayerWeights {
                query: reader.linear(&format!("{p}.attention.self.query"), h, h)?,
                key: reader.linear(&format!("{p}.attention.self.key"), h, h)?,
                value: reader.linear(&format!("{p}.attention.self.value"), h, h)?,
                attn_out: reader.linear(&format!("{p}.attention.output.dense"), h, h)?,
                attn_norm: reader.norm(&format!("{p}.attention.output.LayerNorm"))?,
                ffn_in: reader.linear(&format!("{p}.intermediate.dense"), i, h)?,
                ffn_out: reader.linear(&format!("{p}.output.dense"), h, i)?,
                ffn_norm: reader.norm(&format!("{p}.output.LayerNorm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelWeights { embeddings, layers })
}

struct TensorReader<'a> {
    st: &'a SafeTensors<'a>,
    config: &'a ModelConfig,
}

impl TensorReader<'_> {
    fn candidates(name: &str) -> Vec<String> {
        let mut names = vec![name.to_owned()];
        if let Some(stem) = name.strip_suffix("LayerNorm.weight") {
            names.push(format!("{stem}LayerNorm.gamma"));
        } else if let Some(stem) = name.strip_suffix("LayerNorm.bias") {
            names.push(format!("{stem}LayerNorm.beta"));
        }
        let prefixed: Vec<String> = names.iter().map(|n| format!("bert.{n}")).collect();
        names.extend(prefixed);
        names
    }

    fn read(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let view = Self::candidates(name)
            .iter()
            .find_map(|n| self.st.tensor(n).ok())
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::TensorDtype {
                name: name.to_owned(),
                dtype: format!("{:?}", view.dtype()),
            });
        }
        if view.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_owned(),
                expected: shape.to_vec(),
                found: view.shape().to_vec(),
            });
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_owned()));
        }
        Ok(values)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.read(name, &[rows, cols])?)
    }

    fn linear(&self, prefix: &str, out: usize, inp: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"), out, inp)?,
            bias: self.read(&format!("{prefix}.bias"), &[out])?,
        })
    }

    fn norm(&self, prefix: &str) -> Result<LayerNormParams> {
        let h = self.config.hidden;
        Ok(LayerNormParams {
            gamma: self.read(&format!("{prefix}.weight"), &[h])?,
            beta: self.read(&format!("{prefix}.bias"), &[h])?,
        })
    }
}

/// A named f32 tensor ready for serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes tensors into a safetensors container (names sorted).
pub fn serialize_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|(t, b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, t.shape.clone(), b)
                .map(|v| (t.name.clone(), v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::Container(e.to_string()))
}

/// Writes a complete model directory, including a manifest with checksums.
pub fn save_model(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    tensors: &[NamedTensor],
    vocab_text: &str,
    source_checkpoint: &str,
) -> Result<ExportManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let container = serialize_tensors(tensors)?;
    write(CONFIG_FILE, serde_json::to_string_pretty(config)?.as_bytes())?;
    write(WEIGHTS_FILE, &container)?;
    write(VOCAB_FILE, vocab_text.as_bytes())?;
    let manifest = ExportManifest {
        source_checkpoint: source_checkpoint.to_owned(),
        checksums: [
            (WEIGHTS_FILE.to_owned(), sha256_hex(&container)),
            (VOCAB_FILE.to_owned(), sha256_hex(vocab_text.as_bytes())),
        ]
        .into_iter()
        .collect(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        probe_sentences: Vec::new(),
    };
    write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

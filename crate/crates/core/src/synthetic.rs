//! Deterministic synthetic encoder weights.
//!
//! Element `i` of tensor `name` is `offset + scale * (2u - 1)` where
//! `u = (splitmix64(fnv1a64(name) + (i + 1) * 0x9E3779B97F4A7C15) >> 40) / 2^24`,
//! evaluated in f32. The offset and scale come from the first rule whose
//! suffix matches the tensor name. The same construction is implemented in
//! `tools/make_goldens.py`, which is how the committed reference activations
//! were produced without shipping a full checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::weights::{ModelConfig, NamedTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub suffix: String,
    pub offset: f32,
    pub scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    #[serde(default)]
    pub description: String,
    pub rules: Vec<Rule>,
}

impl SyntheticParams {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn rule_for(&self, name: &str) -> Result<&Rule> {
        self.rules
            .iter()
            .find(|r| name.ends_with(&r.suffix))
            .ok_or_else(|| Error::Config(format!("no synthetic rule matches {name}")))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn synthetic_values(name: &str, len: usize, rule: &Rule) -> Vec<f32> {
    let seed = fnv1a64(name.as_bytes());
    (0..len as u64)
        .map(|i| {
            let z = mix(seed.wrapping_add((i + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            let u = (z >> 40) as f32 * (1.0 / 16_777_216.0);
            rule.offset + rule.scale * (2.0 * u - 1.0)
        })
        .collect()
}

/// All encoder tensors for `config`, in canonical order.
pub fn synthetic_tensors(config: &ModelConfig, params: &SyntheticParams) -> Result<Vec<NamedTensor>> {
    config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let rule = params.rule_for(&name)?;
            let data = synthetic_values(&name, shape.iter().product(), rule);
            Ok(NamedTensor { name, shape, data })
        })
        .collect()
}

/// SHA-256 over `name || raw little-endian bytes` for tensors sorted by name.
pub fn tensors_digest(tensors: &[NamedTensor]) -> String {
    let mut sorted: Vec<&NamedTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for t in sorted {
        h.update(t.name.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

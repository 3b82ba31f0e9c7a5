//! Trace store file format.
//!
//! ```text
//! "CTXTRC01"                 8 bytes magic
//! header length              u64 little-endian
//! header                     UTF-8 JSON (StoreHeader)
//! payload                    f32 little-endian, one record per sample
//! ```
//!
//! A record is the static embedding followed, for layers 1..=L, by the SA,
//! Acts and Out vectors of that layer. `record_len` and `payload_len` in the
//! header give the sizes; both are checked on read.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{CapturePolicy, LayerTrace, SubLayer, TraceSet};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::tokenizer::PieceSpan;

pub const MAGIC: &[u8; 8] = b"CTXTRC01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "static")]
    pub static_emb: usize,
    pub sa: usize,
    pub acts: usize,
    pub out: usize,
}

impl Dims {
    pub fn record_len(&self, num_layers: usize) -> usize {
        self.static_emb + num_layers * (self.sa + self.acts + self.out)
    }

    pub fn of(&self, sub: SubLayer) -> usize {
        match sub {
            SubLayer::Sa => self.sa,
            SubLayer::Acts => self.acts,
            SubLayer::Out => self.out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSample {
    pub index: usize,
    pub id: String,
    pub keyword: String,
    pub sense_label: String,
    pub sentence: String,
    #[serde(default)]
    pub keyword_occurrence: usize,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    /// Half-open piece span `[start, end)`.
    pub span: [usize; 2],
    #[serde(default)]
    pub piece_ids: Vec<u32>,
}

impl StoreSample {
    pub fn piece_span(&self) -> PieceSpan {
        PieceSpan::new(self.span[0], self.span[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub keyword: String,
    pub sentence: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format_version: u32,
    pub model_checksum: String,
    pub dataset_id: String,
    pub capture_policy: CapturePolicy,
    pub num_layers: usize,
    pub dims: Dims,
    pub record_len: usize,
    pub payload_len: usize,
    pub samples: Vec<StoreSample>,
    #[serde(default)]
    pub skipped: Vec<SkippedSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStore {
    pub header: StoreHeader,
    data: Vec<f32>,
}

impl TraceStore {
    /// Packs traces (one per sample, same order) into a store.
    pub fn from_traces(
        model_checksum: &str,
        dataset_id: &str,
        policy: CapturePolicy,
        samples: Vec<StoreSample>,
        traces: &[TraceSet],
        skipped: Vec<SkippedSample>,
        manifest: Option<RunManifest>,
    ) -> Result<Self> {
        if samples.len() != traces.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} traces",
                samples.len(),
                traces.len()
            )));
        }
        let first = traces
            .first()
            .ok_or_else(|| Error::EmptyDataset("no traces to store".into()))?;
        let num_layers = first.num_layers();
        let dims = Dims {
            static_emb: first.static_emb.len(),
            sa: first.layers[0].sa.len(),
            acts: first.layers[0].acts.len(),
            out: first.layers[0].out.len(),
        };
        let record_len = dims.record_len(num_layers);
        let mut data = Vec::with_capacity(record_len * traces.len());
        for (s, t) in samples.iter().zip(traces) {
            if t.policy != policy {
                return Err(Error::PolicyMismatch(format!("trace {} recorded with {:?}", s.id, t.policy)));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!("trace {} has non-finite values", s.id)));
            }
            let before = data.len();
            data.extend_from_slice(&t.static_emb);
            for l in &t.layers {
                data.extend_from_slice(&l.sa);
                data.extend_from_slice(&l.acts);
                data.extend_from_slice(&l.out);
            }
            if data.len() - before != record_len {
                return Err(Error::Validation(format!("trace {} has inconsistent dimensions", s.id)));
            }
        }
        let header = StoreHeader {
            format_version: FORMAT_VERSION,
            model_checksum: model_checksum.to_owned(),
            dataset_id: dataset_id.to_owned(),
            capture_policy: policy,
            num_layers,
            dims,
            record_len,
            payload_len: data.len() * 4,
            samples,
            skipped,
            manifest,
        };
        Ok(Self { header, data })
    }

    pub fn len(&self) -> usize {
        self.header.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.samples.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn policy(&self) -> CapturePolicy {
        self.header.capture_policy
    }

    pub fn record(&self, sample: usize) -> &[f32] {
        let n = self.header.record_len;
        &self.data[sample * n..(sample + 1) * n]
    }

    pub fn static_emb(&self, sample: usize) -> &[f32] {
        &self.record(sample)[..self.header.dims.static_emb]
    }

    /// `layer` is 1-based.
    pub fn vector(&self, sample: usize, layer: usize, sub: SubLayer) -> &[f32] {
        let d = self.header.dims;
        let per_layer = d.sa + d.acts + d.out;
        let mut off = d.static_emb + (layer - 1) * per_layer;
        off += match sub {
            SubLayer::Sa => 0,
            SubLayer::Acts => d.sa,
            SubLayer::Out => d.sa + d.acts,
        };
        &self.record(sample)[off..off + d.of(sub)]
    }

    pub fn trace(&self, sample: usize) -> TraceSet {
        let s = &self.header.samples[sample];
        TraceSet {
            sentence_id: s.id.clone(),
            span: s.piece_span(),
            policy: self.header.capture_policy,
            static_emb: self.static_emb(sample).to_vec(),
            layers: (1..=self.num_layers())
                .map(|l| LayerTrace {
                    sa: self.vector(sample, l, SubLayer::Sa).to_vec(),
                    acts: self.vector(sample, l, SubLayer::Acts).to_vec(),
                    out: self.vector(sample, l, SubLayer::Out).to_vec(),
                })
                .collect(),
        }
    }

    pub fn traces(&self) -> Vec<TraceSet> {
        (0..self.len()).map(|i| self.trace(i)).collect()
    }

    pub fn sample_index(&self, id: &str) -> Option<usize> {
        self.header.samples.iter().position(|s| s.id == id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let head = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + head.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("trace store: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let head_end = 16usize
            .checked_add(head_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: StoreHeader = serde_json::from_slice(&bytes[16..head_end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[head_end..];
        if payload.len() != header.payload_len {
            return Err(bad(&format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_len
            )));
        }
        if header.record_len != header.dims.record_len(header.num_layers)
            || header.payload_len != header.record_len * header.samples.len() * 4
        {
            return Err(bad("record length inconsistent with dims and sample count"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { header, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Read access to pooled vectors, shared by in-memory traces and stores.
pub trait TraceSource: Sync {
    fn len(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn policy(&self) -> CapturePolicy;
    fn static_emb(&self, sample: usize) -> &[f32];
    /// `layer` is 1-based.
    fn vector(&self, sample: usize, layer: usize, sub: SubLayer) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TraceSource for TraceStore {
    fn len(&self) -> usize {
        TraceStore::len(self)
    }
    fn num_layers(&self) -> usize {
        TraceStore::num_layers(self)
    }
    fn policy(&self) -> CapturePolicy {
        TraceStore::policy(self)
    }
    fn static_emb(&self, sample: usize) -> &[f32] {
        TraceStore::static_emb(self, sample)
    }
    fn vector(&self, sample: usize, layer: usize, sub: SubLayer) -> &[f32] {
        TraceStore::vector(self, sample, layer, sub)
    }
}

/// All traces must share one policy; the first one's is reported.
impl TraceSource for [TraceSet] {
    fn len(&self) -> usize {
        <[TraceSet]>::len(self)
    }
    fn num_layers(&self) -> usize {
        self.first().map_or(0, TraceSet::num_layers)
    }
    fn policy(&self) -> CapturePolicy {
        self.first().map(|t| t.policy).unwrap_or_default()
    }
    fn static_emb(&self, sample: usize) -> &[f32] {
        &self[sample].static_emb
    }
    fn vector(&self, sample: usize, layer: usize, sub: SubLayer) -> &[f32] {
        self[sample].layers[layer - 1].get(sub)
    }
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

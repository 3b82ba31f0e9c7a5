//! Instrumented encoder forward pass.
//!
//! Per layer the forward pass records four points:
//!
//! * the attention context after the output projection, before the residual
//!   add (`sa_projection`);
//! * the same after residual add and layer norm (`sa_normed`), which is also
//!   the FFN input;
//! * the FFN hidden state after the activation (`acts`, `intermediate` wide);
//! * the layer output after FFN projection, residual add and layer norm (`out`).
//!
//! A [`CapturePolicy`] selects which of these become the SA vector, which
//! static embedding is used, and how multi-piece keywords are pooled.
//! Dropout is never applied.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, add, add_row_bias, layer_norm_rows, matmul_bt, Matrix};
use crate::tokenizer::{PieceSpan, Tokenization};
use crate::weights::{Linear, ModelConfig, ModelWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaCapture {
    #[default]
    PostProjectionPreResidual,
    PostAttentionLayernorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticEmbeddingKind {
    #[default]
    WordTableRow,
    EmbeddingLayerOutput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    FirstPiece,
    MeanPieces,
    LastPiece,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Self::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}, expected one of {:?}",
                        stringify!($ty),
                        Self::NAMES
                    ))),
                }
            }
        }
    };
}

string_enum!(SaCapture {
    PostProjectionPreResidual => "post_projection_pre_residual",
    PostAttentionLayernorm => "post_attention_layernorm",
});
string_enum!(StaticEmbeddingKind {
    WordTableRow => "word_table_row",
    EmbeddingLayerOutput => "embedding_layer_output",
});
string_enum!(Pooling {
    FirstPiece => "first_piece",
    MeanPieces => "mean_pieces",
    LastPiece => "last_piece",
});

/// Where the sub-layer vectors are read and how keyword pieces are pooled.
/// Serialized verbatim into every artifact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CapturePolicy {
    pub sa_point: SaCapture,
    pub static_embedding_kind: StaticEmbeddingKind,
    pub pooling: Pooling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubLayer {
    Sa,
    Acts,
    Out,
}

impl SubLayer {
    pub const ALL: [SubLayer; 3] = [SubLayer::Sa, SubLayer::Acts, SubLayer::Out];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubLayer::Sa => "sa",
            SubLayer::Acts => "acts",
            SubLayer::Out => "out",
        }
    }
}

impl fmt::Display for SubLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub sa: Vec<f32>,
    pub acts: Vec<f32>,
    pub out: Vec<f32>,
}

impl LayerTrace {
    pub fn get(&self, sub: SubLayer) -> &[f32] {
        match sub {
            SubLayer::Sa => &self.sa,
            SubLayer::Acts => &self.acts,
            SubLayer::Out => &self.out,
        }
    }
}

/// Pooled keyword vectors for one sentence at every capture point.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub sentence_id: String,
    pub span: PieceSpan,
    pub policy: CapturePolicy,
    pub static_emb: Vec<f32>,
    /// `layers[0]` is encoder layer 1.
    pub layers: Vec<LayerTrace>,
}

impl TraceSet {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `layer` is 1-based.
    pub fn vector(&self, layer: usize, sub: SubLayer) -> Result<&[f32]> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Validation(format!(
                "layer {layer} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(self.layers[layer - 1].get(sub))
    }

    pub fn is_finite(&self) -> bool {
        self.static_emb.iter().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.sa.iter().chain(&l.acts).chain(&l.out).all(|v| v.is_finite()))
    }
}

/// Full per-token activations of one layer.
#[derive(Clone, Debug)]
pub struct LayerCapture {
    pub sa_projection: Matrix,
    pub sa_normed: Matrix,
    pub acts: Matrix,
    pub out: Matrix,
    /// One `seq x seq` row-stochastic matrix per head.
    pub attention: Vec<Matrix>,
}

impl LayerCapture {
    pub fn sa(&self, point: SaCapture) -> &Matrix {
        match point {
            SaCapture::PostProjectionPreResidual => &self.sa_projection,
            SaCapture::PostAttentionLayernorm => &self.sa_normed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCapture {
    pub embeddings: Matrix,
    pub layers: Vec<LayerCapture>,
}

/// Borrowing view over immutable weights; cheap to copy and share.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    config: &'a ModelConfig,
    weights: &'a ModelWeights,
}

fn linear(x: &Matrix, layer: &Linear) -> Result<Matrix> {
    let mut y = matmul_bt(x, &layer.weight)?;
    add_row_bias(&mut y, &layer.bias)?;
    Ok(y)
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a ModelConfig, weights: &'a ModelWeights) -> Result<Self> {
        config.validate()?;
        if weights.layers.len() != config.num_layers {
            return Err(Error::Config(format!(
                "config declares {} layers, weights have {}",
                config.num_layers,
                weights.layers.len()
            )));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Word + position + token-type(0) embeddings followed by layer norm.
    pub fn embed(&self, piece_ids: &[u32]) -> Result<Matrix> {
        let seq = piece_ids.len();
        if seq > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.config.max_positions,
            });
        }
        let emb = &self.weights.embeddings;
        let h = self.config.hidden;
        let mut out = Matrix::zeros(seq, h);
        for (pos, &id) in piece_ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            let row = out.row_mut(pos);
            for (((o, w), p), t) in row
                .iter_mut()
                .zip(emb.word.row(id as usize))
                .zip(emb.position.row(pos))
                .zip(emb.token_type.row(0))
            {
                *o = w + t + p;
            }
        }
        layer_norm_rows(&mut out, &emb.norm.gamma, &emb.norm.beta, self.config.layer_norm_eps)?;
        Ok(out)
    }

    /// Runs every layer and keeps all per-token capture points.
    pub fn forward(&self, piece_ids: &[u32]) -> Result<ForwardCapture> {
        let embeddings = self.embed(piece_ids)?;
        let mut hidden = embeddings.clone();
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for lw in &self.weights.layers {
            let cap = self.layer(&hidden, lw)?;
            hidden = cap.out.clone();
            layers.push(cap);
        }
        Ok(ForwardCapture { embeddings, layers })
    }

    fn layer(&self, x: &Matrix, lw: &crate::weights::LayerWeights) -> Result<LayerCapture> {
        let cfg = self.config;
        let (seq, dh) = (x.rows(), cfg.head_dim());
        let q = linear(x, &lw.query)?;
        let k = linear(x, &lw.key)?;
        let v = linear(x, &lw.value)?;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut context = Matrix::zeros(seq, cfg.hidden);
        let mut attention = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = q.columns(lo, hi);
            let kh = k.columns(lo, hi);
            let vh = v.columns(lo, hi);
            let mut scores = matmul_bt(&qh, &kh)?;
            for s in scores.data_mut() {
                *s *= scale;
            }
            let probs = tensor::softmax_rows(&scores);
            let ctx = tensor::matmul(&probs, &vh)?;
            for i in 0..seq {
                context.row_mut(i)[lo..hi].copy_from_slice(ctx.row(i));
            }
            attention.push(probs);
        }

        let sa_projection = linear(&context, &lw.attn_out)?;
        let mut sa_normed = add(&sa_projection, x)?;
        layer_norm_rows(&mut sa_normed, &lw.attn_norm.gamma, &lw.attn_norm.beta, cfg.layer_norm_eps)?;

        let mut acts = linear(&sa_normed, &lw.ffn_in)?;
        cfg.activation.apply_in_place(&mut acts);

        let ffn = linear(&acts, &lw.ffn_out)?;
        let mut out = add(&ffn, &sa_normed)?;
        layer_norm_rows(&mut out, &lw.ffn_norm.gamma, &lw.ffn_norm.beta, cfg.layer_norm_eps)?;

        Ok(LayerCapture {
            sa_projection,
            sa_normed,
            acts,
            out,
            attention,
        })
    }

    /// Forward pass pooled to `span` according to `policy`.
    pub fn encode(
        &self,
        tok: &Tokenization,
        span: PieceSpan,
        policy: CapturePolicy,
        sentence_id: &str,
    ) -> Result<TraceSet> {
        if span.is_empty() || span.end > tok.len() {
            return Err(Error::Validation(format!(
                "span {}..{} invalid for {} pieces",
                span.start,
                span.end,
                tok.len()
            )));
        }
        let capture = self.forward(&tok.piece_ids)?;
        Ok(self.trace_from_capture(&capture, &tok.piece_ids, span, policy, sentence_id))
    }

    /// Pools an existing forward capture; lets several policies share one pass.
    pub fn trace_from_capture(
        &self,
        capture: &ForwardCapture,
        piece_ids: &[u32],
        span: PieceSpan,
        policy: CapturePolicy,
        sentence_id: &str,
    ) -> TraceSet {
        let static_emb = match policy.static_embedding_kind {
            StaticEmbeddingKind::WordTableRow => self
                .weights
                .embeddings
                .word
                .row(piece_ids[span.start] as usize)
                .to_vec(),
            StaticEmbeddingKind::EmbeddingLayerOutput => pool(&capture.embeddings, span, policy.pooling),
        };
        let layers = capture
            .layers
            .iter()
            .map(|c| LayerTrace {
                sa: pool(c.sa(policy.sa_point), span, policy.pooling),
                acts: pool(&c.acts, span, policy.pooling),
                out: pool(&c.out, span, policy.pooling),
            })
            .collect();
        TraceSet {
            sentence_id: sentence_id.to_owned(),
            span,
            policy,
            static_emb,
            layers,
        }
    }
}

/// Pools the rows of `m` in `span`. Mean pooling sums rows in order, then
/// divides by the span length.
pub fn pool(m: &Matrix, span: PieceSpan, pooling: Pooling) -> Vec<f32> {
    match pooling {
        Pooling::FirstPiece => m.row(span.start).to_vec(),
        Pooling::LastPiece => m.row(span.end - 1).to_vec(),
        Pooling::MeanPieces => {
            let mut acc = vec![0.0f32; m.cols()];
            for i in span.start..span.end {
                for (a, v) in acc.iter_mut().zip(m.row(i)) {
                    *a += v;
                }
            }
            let n = span.len() as f32;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
    }
}

//! Uncased WordPiece tokenization with word-to-piece alignment.
//!
//! The pipeline follows the BERT-base-uncased conventions:
//!
//! 1. drop NUL, U+FFFD and control characters, map whitespace to spaces;
//! 2. surround CJK ideographs with spaces;
//! 3. split on whitespace ("words");
//! 4. per word: NFD, drop nonspacing marks, lowercase, split off punctuation
//!    ("basic tokens");
//! 5. greedy longest-match-first WordPiece with the `##` continuation prefix.
//!
//! Every piece keeps track of the word and basic token it came from, so a
//! keyword occurrence can be mapped back to a contiguous piece span.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_MAX_LEN: usize = 128;
const MAX_CHARS_PER_WORD: usize = 100;

/// Token <-> id mapping loaded from a `vocab.txt` (line number = id).
#[derive(Clone, Debug)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub cls_id: u32,
    pub sep_id: u32,
    pub unk_id: u32,
    pub pad_id: u32,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let special = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Validation(format!("vocabulary lacks {name}")))
        };
        Ok(Self {
            cls_id: special("[CLS]")?,
            sep_id: special("[SEP]")?,
            unk_id: special("[UNK]")?,
            pad_id: special("[PAD]")?,
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }
}

/// Half-open range of piece indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PieceSpan {
    pub start: usize,
    pub end: usize,
}

impl PieceSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// A normalized, punctuation-split token and the pieces it produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicToken {
    pub text: String,
    pub word: usize,
    pub span: PieceSpan,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenization {
    pub piece_ids: Vec<u32>,
    pub pieces: Vec<String>,
    /// One span per whitespace-level word; empty for words that produced no
    /// pieces or were cut by truncation.
    pub word_spans: Vec<PieceSpan>,
    pub basic_tokens: Vec<BasicToken>,
    pub truncated: bool,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    /// Maximum sequence length including `[CLS]` and `[SEP]`.
    pub max_len: usize,
    /// Reject empty (or all-whitespace) text instead of emitting `[CLS] [SEP]`.
    pub reject_empty: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            reject_empty: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WordPieceTokenizer {
    vocab: Vocab,
    config: TokenizerConfig,
}

impl WordPieceTokenizer {
    pub fn new(vocab: Vocab, config: TokenizerConfig) -> Result<Self> {
        if config.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for [CLS] and [SEP]",
                config.max_len
            )));
        }
        Ok(Self { vocab, config })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> TokenizerConfig {
        self.config
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenization> {
        let words = split_words(text);
        if words.is_empty() && self.config.reject_empty {
            return Err(Error::Validation("cannot tokenize empty text".into()));
        }

        let budget = self.config.max_len - 2;
        let mut piece_ids = vec![self.vocab.cls_id];
        let mut pieces = vec!["[CLS]".to_owned()];
        let mut word_spans = Vec::with_capacity(words.len());
        let mut basic_tokens = Vec::new();
        let mut truncated = false;
        let mut scratch = Vec::new();

        for (w, word) in words.iter().enumerate() {
            let word_start = piece_ids.len();
            for basic in split_basic(word) {
                scratch.clear();
                self.wordpiece(&basic, &mut scratch);
                let start = piece_ids.len();
                for id in scratch.iter().copied() {
                    if piece_ids.len() > budget {
                        truncated = true;
                        break;
                    }
                    piece_ids.push(id);
                    pieces.push(self.vocab.token(id).unwrap_or("[UNK]").to_owned());
                }
                basic_tokens.push(BasicToken {
                    text: basic,
                    word: w,
                    span: PieceSpan::new(start, piece_ids.len()),
                });
            }
            word_spans.push(PieceSpan::new(word_start, piece_ids.len()));
        }

        piece_ids.push(self.vocab.sep_id);
        pieces.push("[SEP]".to_owned());
        Ok(Tokenization {
            piece_ids,
            pieces,
            word_spans,
            basic_tokens,
            truncated,
        })
    }

    fn wordpiece(&self, token: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = token.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(self.vocab.unk_id);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION_PREFIX);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.vocab.unk_id);
                    return;
                }
            }
        }
    }
}

/// Returns the piece span of the `occurrence`-th (0-based) match of `keyword`.
///
/// Matching is on normalized basic tokens, so `"Newspaper"` finds
/// `"newspaper,"` and a hyphenated keyword matches its punctuation-split form.
pub fn locate_keyword(tok: &Tokenization, keyword: &str, occurrence: usize) -> Result<PieceSpan> {
    let needle = basic_tokenize(keyword);
    let not_found = || Error::KeywordNotFound {
        keyword: keyword.to_owned(),
        occurrence,
        sentence: tok.pieces.join(" "),
    };
    if needle.is_empty() {
        return Err(not_found());
    }
    let hay = &tok.basic_tokens;
    let mut seen = 0;
    for i in 0..hay.len().saturating_sub(needle.len() - 1) {
        let window = &hay[i..i + needle.len()];
        if window.iter().zip(&needle).all(|(b, n)| &b.text == n) {
            if seen == occurrence {
                let span = PieceSpan::new(window[0].span.start, window[needle.len() - 1].span.end);
                if span.is_empty() {
                    // the occurrence exists but was truncated away
                    return Err(not_found());
                }
                return Ok(span);
            }
            seen += 1;
        }
    }
    Err(not_found())
}

/// Counts word-level occurrences of `keyword` in `text`.
pub fn count_keyword(text: &str, keyword: &str) -> usize {
    let needle = basic_tokenize(keyword);
    let hay = basic_tokenize(text);
    if needle.is_empty() || hay.len() < needle.len() {
        return 0;
    }
    hay.windows(needle.len()).filter(|w| *w == needle.as_slice()).count()
}

/// Normalized basic tokens of `text` (steps 1-4 of the pipeline).
pub fn basic_tokenize(text: &str) -> Vec<String> {
    split_words(text).iter().flat_map(|w| split_basic(w)).collect()
}

fn split_words(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '\0' || c == '\u{fffd}' || is_control(c) {
            continue;
        }
        if is_whitespace(c) {
            cleaned.push(' ');
        } else if is_cjk(c) {
            cleaned.push(' ');
            cleaned.push(c);
            cleaned.push(' ');
        } else {
            cleaned.push(c);
        }
    }
    cleaned.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

fn split_basic(word: &str) -> Vec<String> {
    let normalized: String = word
        .nfd()
        .filter(|&c| get_general_category(c) != GeneralCategory::NonspacingMark)
        .collect::<String>()
        .to_lowercase();
    let mut out = Vec::new();
    let mut current = String::new();
    for c in normalized.chars() {
        if is_punctuation(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else if is_whitespace(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn is_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r') || get_general_category(c) == GeneralCategory::SpaceSeparator
}

fn is_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::Control | GeneralCategory::Format
    )
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii_punctuation() {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

//! Dataset ingestion: CPWS (short fixed-position contexts), PWC (CWI sentences
//! joined with SeCoDa sense annotations) and sPWC (one sentence per sense).
//!
//! All three converge on [`SenseSample`] JSON lines. Sense labels are
//! namespaced `keyword::sense` so they form one global label space.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{basic_tokenize, count_keyword};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cpws,
    Pwc,
    Spwc,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Cpws => "cpws",
            Source::Pwc => "pwc",
            Source::Spwc => "spwc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SenseSample {
    #[serde(default)]
    pub id: String,
    pub keyword: String,
    /// `keyword::sense`.
    pub sense_label: String,
    pub sentence: String,
    #[serde(default)]
    pub keyword_occurrence: usize,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

impl SenseSample {
    pub fn validate(&self) -> Result<()> {
        if self.sense_label.trim().is_empty() {
            return Err(Error::Validation(format!("sample {} has an empty sense label", self.id)));
        }
        if count_keyword(&self.sentence, &self.keyword) <= self.keyword_occurrence {
            return Err(Error::Validation(format!(
                "keyword {:?} (occurrence {}) missing from {:?}",
                self.keyword, self.keyword_occurrence, self.sentence
            )));
        }
        Ok(())
    }
}

/// Indices into a sample list of two samples of one keyword with different senses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub keyword: String,
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_samples: usize,
    pub unique_keywords: usize,
    /// number of senses -> number of keywords with that many senses
    pub senses_per_keyword: BTreeMap<usize, usize>,
    /// samples in a sense -> number of senses of that size
    pub samples_per_sense: BTreeMap<usize, usize>,
}

pub fn sense_label(keyword: &str, sense: &str) -> String {
    format!("{keyword}::{sense}")
}

/// Sorts by keyword then sentence and assigns stable ids `{source}-{i:05}`.
pub fn finalize(mut samples: Vec<SenseSample>, source: Source) -> Vec<SenseSample> {
    samples.sort_by(|a, b| {
        (&a.keyword, &a.sentence, &a.sense_label, a.keyword_occurrence)
            .cmp(&(&b.keyword, &b.sentence, &b.sense_label, b.keyword_occurrence))
    });
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("{}-{i:05}", source.as_str());
    }
    samples
}

/// Pairs of distinct senses per keyword, using the first sample of each sense
/// in list order. A keyword with k senses yields k(k-1)/2 pairs.
pub fn make_pairs(samples: &[SenseSample]) -> Vec<SentencePair> {
    let mut by_keyword: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let senses = by_keyword.entry(s.keyword.as_str()).or_default();
        if !senses.iter().any(|(label, _)| *label == s.sense_label) {
            senses.push((s.sense_label.as_str(), i));
        }
    }
    let mut pairs = Vec::new();
    for (keyword, senses) in by_keyword {
        for x in 0..senses.len() {
            for y in x + 1..senses.len() {
                pairs.push(SentencePair {
                    keyword: keyword.to_owned(),
                    a: senses[x].1,
                    b: senses[y].1,
                });
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpwsData {
    pub samples: Vec<SenseSample>,
    pub pairs: Vec<SentencePair>,
    /// Rows whose keyword is not the second word.
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct CpwsRow {
    keyword: String,
    sense: String,
    sentence: String,
}

/// Reads the CPWS CSV (`keyword,sense,sentence`).
pub fn load_cpws(path: impl AsRef<Path>) -> Result<CpwsData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cpws(&text, &path.display().to_string())
}

pub fn parse_cpws(text: &str, origin: &str) -> Result<CpwsData> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (i, row) in reader.deserialize::<CpwsRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            what: origin.to_owned(),
            line,
            message: e.to_string(),
        })?;
        let sample = SenseSample {
            id: String::new(),
            keyword: row.keyword.to_lowercase(),
            sense_label: sense_label(&row.keyword.to_lowercase(), &row.sense),
            sentence: row.sentence,
            keyword_occurrence: 0,
            source: Source::Cpws,
            topic: None,
        };
        if row.sense.trim().is_empty() {
            return Err(Error::Validation(format!("{origin}, line {line}: empty sense")));
        }
        sample
            .validate()
            .map_err(|e| Error::Validation(format!("{origin}, line {line}: {e}")))?;
        let words = basic_tokenize(&sample.sentence);
        if words.get(1).map(String::as_str) != basic_tokenize(&sample.keyword).first().map(String::as_str) {
            let msg = format!("{origin}, line {line}: keyword {:?} is not the second word", sample.keyword);
            warnings.push(msg);
        }
        samples.push(sample);
    }
    let samples = finalize(samples, Source::Cpws);
    let pairs = make_pairs(&samples);
    Ok(CpwsData {
        samples,
        pairs,
        warnings,
    })
}

/// One CWI row: the sentence, the target's char offsets and the target text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CwiRow {
    pub hit_id: String,
    pub sentence: String,
    pub start: usize,
    pub end: usize,
    pub target: String,
    pub topic: Option<String>,
}

/// Parses a CWI shared-task TSV: tab-separated, no header, columns
/// `hit_id, sentence, start, end, target, ...` (annotation columns ignored).
pub fn parse_cwi(text: &str, origin: &str, topic: Option<&str>) -> Result<Vec<CwiRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            what: origin.to_owned(),
            line: i + 1,
            message,
        };
        if cols.len() < 5 {
            return Err(parse_err(format!("expected at least 5 columns, found {}", cols.len())));
        }
        let offset = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad offset {s:?}: {e}")))
        };
        rows.push(CwiRow {
            hit_id: cols[0].to_owned(),
            sentence: cols[1].to_owned(),
            start: offset(cols[2])?,
            end: offset(cols[3])?,
            target: cols[4].to_owned(),
            topic: topic.map(str::to_owned),
        });
    }
    Ok(rows)
}

pub fn load_cwi(path: impl AsRef<Path>) -> Result<Vec<CwiRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let topic = path.file_stem().and_then(|s| s.to_str()).map(|s| s.split('_').next().unwrap_or(s));
    parse_cwi(&text, &path.display().to_string(), topic)
}

/// One SeCoDa sense annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecodaRow {
    pub sentence: String,
    pub target: String,
    pub sense: String,
    pub topic: Option<String>,
}

const SENTENCE_COLS: &[&str] = &["sentence", "context", "text"];
const TARGET_COLS: &[&str] = &["target", "target_word", "target word", "word", "token"];
const SENSE_COLS: &[&str] = &["sense", "sense_label", "sense_id", "wordnet_sense", "synset"];
const TOPIC_COLS: &[&str] = &["topic", "domain", "genre"];

/// Parses the SeCoDa CSV by header name. Required columns (first alias
/// found wins, case-insensitive): sentence/context/text,
/// target/target_word/word/token, sense/sense_label/sense_id/wordnet_sense/synset.
/// Optional: topic/domain/genre.
pub fn parse_secoda(text: &str, origin: &str) -> Result<Vec<SecodaRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_lowercase()).collect();
    let find = |aliases: &[&str]| aliases.iter().find_map(|a| headers.iter().position(|h| h == a));
    let missing = |what: &str| Error::Parse {
        what: origin.to_owned(),
        line: 1,
        message: format!("no {what} column among {headers:?}"),
    };
    let sentence = find(SENTENCE_COLS).ok_or_else(|| missing("sentence"))?;
    let target = find(TARGET_COLS).ok_or_else(|| missing("target"))?;
    let sense = find(SENSE_COLS).ok_or_else(|| missing("sense"))?;
    let topic = find(TOPIC_COLS);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            what: origin.to_owned(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim().to_owned();
        let row = SecodaRow {
            sentence: get(sentence),
            target: get(target),
            sense: get(sense),
            topic: topic.map(get).filter(|t| !t.is_empty()),
        };
        if row.sense.is_empty() || row.target.is_empty() {
            continue;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_secoda(path: impl AsRef<Path>) -> Result<Vec<SecodaRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_secoda(&text, &path.display().to_string())
}

/// Join bookkeeping for PWC construction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub cwi_rows: usize,
    pub secoda_rows: usize,
    pub joined: usize,
    /// CWI rows with no SeCoDa annotation for the same token and sentence.
    pub unmatched_cwi: usize,
    /// Joined rows dropped because the token has fewer than two senses.
    pub single_sense_dropped: usize,
    /// Joined rows dropped because the target could not be located in the sentence.
    pub unlocatable: usize,
    /// SeCoDa keys annotated with more than one sense; the first is used.
    pub conflicting_annotations: usize,
    pub multi_sense_tokens: usize,
}

/// Join-key normalization: uncased, accent-stripped basic tokens.
pub fn normalize_token(token: &str) -> String {
    basic_tokenize(token).join(" ")
}

fn normalize_sentence(sentence: &str) -> String {
    sentence.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Inner join of CWI rows with SeCoDa senses on (normalized token, sentence),
/// keeping only tokens that carry at least two distinct senses in SeCoDa.
pub fn build_pwc(cwi: &[CwiRow], secoda: &[SecodaRow]) -> Result<(Vec<SenseSample>, JoinReport)> {
    let mut report = JoinReport {
        cwi_rows: cwi.len(),
        secoda_rows: secoda.len(),
        ..JoinReport::default()
    };
    let mut senses_of: HashMap<String, BTreeSet<&str>> = HashMap::new();
    let mut annotation: HashMap<(String, String), &SecodaRow> = HashMap::new();
    for row in secoda {
        let token = normalize_token(&row.target);
        senses_of.entry(token.clone()).or_default().insert(row.sense.as_str());
        let key = (token, normalize_sentence(&row.sentence));
        match annotation.get(&key) {
            Some(prev) if prev.sense != row.sense => report.conflicting_annotations += 1,
            Some(_) => {}
            None => {
                annotation.insert(key, row);
            }
        }
    }
    report.multi_sense_tokens = senses_of.values().filter(|s| s.len() >= 2).count();

    let mut samples = Vec::new();
    for row in cwi {
        let token = normalize_token(&row.target);
        let Some(ann) = annotation.get(&(token.clone(), normalize_sentence(&row.sentence))) else {
            report.unmatched_cwi += 1;
            continue;
        };
        report.joined += 1;
        if senses_of.get(&token).map_or(0, BTreeSet::len) < 2 {
            report.single_sense_dropped += 1;
            continue;
        }
        let prefix = row.sentence.get(..row.start).unwrap_or("");
        let occurrence = count_keyword(prefix, &row.target);
        let sample = SenseSample {
            id: String::new(),
            keyword: token.clone(),
            sense_label: sense_label(&token, &ann.sense),
            sentence: row.sentence.clone(),
            keyword_occurrence: occurrence,
            source: Source::Pwc,
            topic: ann.topic.clone().or_else(|| row.topic.clone()),
        };
        if sample.validate().is_err() {
            report.unlocatable += 1;
            continue;
        }
        samples.push(sample);
    }
    if report.joined == 0 {
        return Err(Error::EmptyJoin {
            left: "CWI".into(),
            right: "SeCoDa".into(),
        });
    }
    Ok((finalize(samples, Source::Pwc), report))
}

/// Picks one sample per (keyword, sense) with a seeded generator, then drops
/// keywords left with fewer than two senses.
pub fn subset_spwc(pwc: &[SenseSample], seed: u64) -> Vec<SenseSample> {
    let mut groups: BTreeMap<(&str, &str), Vec<&SenseSample>> = BTreeMap::new();
    for s in pwc {
        groups.entry((s.keyword.as_str(), s.sense_label.as_str())).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<SenseSample> = Vec::with_capacity(groups.len());
    for members in groups.values_mut() {
        members.sort();
        let pick = rng.gen_range(0..members.len());
        chosen.push(members[pick].clone());
    }
    let mut sense_count: HashMap<String, usize> = HashMap::new();
    for s in &chosen {
        *sense_count.entry(s.keyword.clone()).or_default() += 1;
    }
    chosen.retain(|s| sense_count[&s.keyword] >= 2);
    for s in &mut chosen {
        s.source = Source::Spwc;
    }
    finalize(chosen, Source::Spwc)
}

pub fn stats(samples: &[SenseSample]) -> DatasetStats {
    let mut per_sense: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for s in samples {
        *per_sense.entry((s.keyword.as_str(), s.sense_label.as_str())).or_default() += 1;
    }
    let mut senses_per_kw: BTreeMap<&str, usize> = BTreeMap::new();
    for (kw, _) in per_sense.keys() {
        *senses_per_kw.entry(kw).or_default() += 1;
    }
    let mut out = DatasetStats {
        total_samples: samples.len(),
        unique_keywords: senses_per_kw.len(),
        ..DatasetStats::default()
    };
    for n in senses_per_kw.values() {
        *out.senses_per_keyword.entry(*n).or_default() += 1;
    }
    for n in per_sense.values() {
        *out.samples_per_sense.entry(*n).or_default() += 1;
    }
    out
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<SenseSample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SenseSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn to_jsonl(samples: &[SenseSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Loads a dataset file: `.csv` is read as CPWS, anything else as JSON lines.
pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<SenseSample>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(load_cpws(path)?.samples)
    } else {
        read_jsonl(path)
    }
}

//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::datasets::{self, SenseSample};
use crate::encoder::{CapturePolicy, Encoder, Pooling, SaCapture, StaticEmbeddingKind};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::metrics::{average_curves, pca_distances};
use crate::probes::{probe_grid, ProbeConfig, ProbeKind};
use crate::report::{manifest_from_csv, sidecar_path, Artifact, ArtifactMeta, PcaSummary, Report, SidecarManifest, SCHEMA_VERSION};
use crate::store::{write_atomic, SkippedSample, StoreSample, TraceStore, MAGIC};
use crate::tokenizer::{locate_keyword, TokenizerConfig, WordPieceTokenizer};
use crate::weights::{load_model, sha256_file, CONFIG_FILE, VOCAB_FILE, WEIGHTS_FILE};

pub const MODEL_DIR_ENV: &str = "CTXPROBE_MODEL_DIR";

/// Flags that only name outputs or the clock; they are left out of recorded
/// arguments so a replay into another path reproduces the same bytes.
const UNRECORDED: &[&str] = &["--out", "--json-out", "--timestamp"];

#[derive(Debug, Parser)]
#[command(name = "ctxprobe", version, about = "Sub-layer contextualization analysis for BERT-base encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every dataset sample and write a trace store.
    Extract(ExtractArgs),
    /// Per-layer SubLayerSim and WESim curves.
    Similarity(AnalysisArgs),
    /// Averaged similarities and PCA squared-L2 distances per sub-layer.
    Pca(AnalysisArgs),
    /// 12 x 3 grid of linear sense probes.
    Probe(ProbeArgs),
    /// Merge JSON artifacts into a markdown report and a combined JSON file.
    Report(ReportArgs),
    /// Build or inspect sense datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Re-run the command recorded in an artifact's manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long)]
    pub sa_capture: Option<SaCapture>,
    #[arg(long)]
    pub static_kind: Option<StaticEmbeddingKind>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
}

impl PolicyArgs {
    fn resolve(&self) -> CapturePolicy {
        CapturePolicy {
            sa_point: self.sa_capture.unwrap_or_default(),
            static_embedding_kind: self.static_kind.unwrap_or_default(),
            pooling: self.pooling.unwrap_or_default(),
        }
    }

    /// Errors when an explicitly given flag disagrees with `stored`.
    fn check(&self, stored: CapturePolicy) -> Result<()> {
        let mut diffs = Vec::new();
        if self.sa_capture.is_some_and(|v| v != stored.sa_point) {
            diffs.push(format!("sa_point is {}", stored.sa_point));
        }
        if self.static_kind.is_some_and(|v| v != stored.static_embedding_kind) {
            diffs.push(format!("static_embedding_kind is {}", stored.static_embedding_kind));
        }
        if self.pooling.is_some_and(|v| v != stored.pooling) {
            diffs.push(format!("pooling is {}", stored.pooling));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::PolicyMismatch(format!("store was captured with {}", diffs.join(", "))))
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, env = MODEL_DIR_ENV)]
    pub model_dir: PathBuf,
    /// JSON lines of samples, or a CPWS CSV.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Form pairs from this dataset instead of the store's own samples.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "lr")]
    pub kind: ProbeKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inverse regularization strength.
    #[arg(long = "c", default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value_t = 12)]
    pub expected_layers: usize,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON artifacts from similarity, pca or probe.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Markdown output.
    #[arg(long)]
    pub out: PathBuf,
    /// Combined JSON output.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Normalize a CPWS CSV (keyword,sense,sentence).
    Cpws {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Join CWI sentences with SeCoDa senses.
    Pwc {
        #[arg(long, required = true)]
        cwi: Vec<PathBuf>,
        #[arg(long)]
        secoda: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// One sample per (keyword, sense) of a PWC file.
    Spwc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Sample and keyword counts with sense histograms.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timestamp: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Artifact, sidecar manifest or trace store to replay.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

/// Parses `argv` (without the program name) and runs the command.
pub fn run(argv: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(std::iter::once("ctxprobe".to_owned()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let recorded = recorded_args(&argv);
    execute(cli.command, recorded)
}

/// `argv` minus output-path and timestamp flags.
pub fn recorded_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if UNRECORDED.contains(&a.as_str()) {
            it.next();
        } else if !UNRECORDED.iter().any(|f| a.starts_with(&format!("{f}="))) {
            out.push(a.clone());
        }
    }
    out
}

fn command_name(recorded: &[String]) -> String {
    match recorded.first().map(String::as_str) {
        Some("dataset") => format!("dataset {}", recorded.get(1).map_or("", String::as_str)),
        Some(c) => c.to_owned(),
        None => String::new(),
    }
}

fn execute(command: Command, recorded: Vec<String>) -> Result<()> {
    let name = command_name(&recorded);
    match command {
        Command::Extract(a) => cmd_extract(a, &name, recorded),
        Command::Similarity(a) => cmd_analysis(a, false, &name, recorded),
        Command::Pca(a) => cmd_analysis(a, true, &name, recorded),
        Command::Probe(a) => cmd_probe(a, &name, recorded),
        Command::Report(a) => cmd_report(a, &name, recorded),
        Command::Dataset(d) => cmd_dataset(d, &name, recorded),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn path_key(p: &Path) -> String {
    p.display().to_string()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_owned()
}

fn write_sidecar(out: &Path, sidecar: &SidecarManifest) -> Result<()> {
    write_atomic(sidecar_path(out), (serde_json::to_string_pretty(sidecar)? + "\n").as_bytes())
}

fn cmd_extract(a: ExtractArgs, name: &str, mut recorded: Vec<String>) -> Result<()> {
    if !recorded.iter().any(|r| r == "--model-dir" || r.starts_with("--model-dir=")) {
        recorded.push("--model-dir".into());
        recorded.push(path_key(&a.model_dir));
    }
    let samples = datasets::load_samples(&a.dataset)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no samples", a.dataset.display())));
    }
    let model = load_model(&a.model_dir)?;
    let tokenizer = WordPieceTokenizer::new(
        model.vocab.clone(),
        TokenizerConfig {
            max_len: a.max_len,
            ..TokenizerConfig::default()
        },
    )?;
    let encoder = Encoder::new(&model.config, &model.weights)?;
    let policy = a.policy.resolve();

    let results: Vec<Result<_>> = samples
        .par_iter()
        .map(|s| {
            let tok = tokenizer.tokenize(&s.sentence)?;
            let span = locate_keyword(&tok, &s.keyword, s.keyword_occurrence)?;
            let trace = encoder.encode(&tok, span, policy, &s.id)?;
            Ok((tok.piece_ids, span, trace))
        })
        .collect();

    let mut store_samples = Vec::new();
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok((piece_ids, span, trace)) => {
                store_samples.push(StoreSample {
                    index: store_samples.len(),
                    id: s.id.clone(),
                    keyword: s.keyword.clone(),
                    sense_label: s.sense_label.clone(),
                    sentence: s.sentence.clone(),
                    keyword_occurrence: s.keyword_occurrence,
                    source: s.source.as_str().to_owned(),
                    topic: s.topic.clone(),
                    span: [span.start, span.end],
                    piece_ids,
                });
                traces.push(trace);
            }
            Err(e) => skipped.push(SkippedSample {
                id: s.id.clone(),
                keyword: s.keyword.clone(),
                sentence: s.sentence.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if traces.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "none of the {} samples could be encoded; first failure: {}",
            samples.len(),
            skipped.first().map_or("", |s| s.reason.as_str())
        )));
    }

    let manifest = RunManifest::new(name, recorded, a.timestamp)
        .with_input(path_key(&a.dataset), sha256_file(&a.dataset)?)
        .with_input(path_key(&a.model_dir.join(CONFIG_FILE)), sha256_file(a.model_dir.join(CONFIG_FILE))?)
        .with_input(path_key(&a.model_dir.join(WEIGHTS_FILE)), model.checksum.clone())
        .with_input(path_key(&a.model_dir.join(VOCAB_FILE)), sha256_file(a.model_dir.join(VOCAB_FILE))?);
    let dataset_id = a.dataset_id.unwrap_or_else(|| file_stem(&a.dataset));
    let n_skipped = skipped.len();
    let warnings: Vec<String> = skipped.iter().map(|s| format!("skipped {}: {}", s.id, s.reason)).collect();
    let store = TraceStore::from_traces(
        &model.checksum,
        &dataset_id,
        policy,
        store_samples,
        &traces,
        skipped,
        Some(manifest.clone()),
    )?;
    store.write(&a.out)?;
    write_sidecar(
        &a.out,
        &SidecarManifest {
            schema_version: SCHEMA_VERSION,
            kind: "extract".into(),
            manifest,
            stats: None,
            join_report: None,
            num_pairs: None,
            warnings: warnings.clone(),
        },
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "wrote {} ({} traces, {} skipped)",
        a.out.display(),
        store.len(),
        n_skipped
    );
    Ok(())
}

fn store_as_samples(store: &TraceStore) -> Vec<SenseSample> {
    store
        .header
        .samples
        .iter()
        .map(|s| SenseSample {
            id: s.id.clone(),
            keyword: s.keyword.clone(),
            sense_label: s.sense_label.clone(),
            sentence: s.sentence.clone(),
            keyword_occurrence: s.keyword_occurrence,
            source: datasets::Source::Cpws,
            topic: s.topic.clone(),
        })
        .collect()
}

/// Pairs as store indices, formed from `dataset` when given.
pub fn store_pairs(store: &TraceStore, dataset: Option<&Path>) -> Result<Vec<(usize, usize)>> {
    match dataset {
        None => Ok(datasets::make_pairs(&store_as_samples(store))
            .into_iter()
            .map(|p| (p.a, p.b))
            .collect()),
        Some(path) => {
            let samples = datasets::load_samples(path)?;
            let mut missing = Vec::new();
            let mut pairs = Vec::new();
            for p in datasets::make_pairs(&samples) {
                let lookup = |i: usize| {
                    let id = &samples[i].id;
                    store.sample_index(id).ok_or_else(|| id.clone())
                };
                match (lookup(p.a), lookup(p.b)) {
                    (Ok(x), Ok(y)) => pairs.push((x, y)),
                    (ra, rb) => missing.extend(ra.err().into_iter().chain(rb.err())),
                }
            }
            if !missing.is_empty() {
                missing.sort();
                missing.dedup();
                return Err(Error::Coverage(
                    missing.into_iter().map(|id| format!("pair member {id} missing from store")).collect(),
                ));
            }
            Ok(pairs)
        }
    }
}

fn analysis_meta(store: &TraceStore, store_path: &Path, name: &str, recorded: Vec<String>, ts: Option<u64>) -> Result<ArtifactMeta> {
    Ok(ArtifactMeta {
        manifest: RunManifest::new(name, recorded, ts).with_input(path_key(store_path), sha256_file(store_path)?),
        dataset_id: store.header.dataset_id.clone(),
        model_checksum: store.header.model_checksum.clone(),
        capture_policy: store.policy(),
    })
}

fn emit(artifact: &Artifact, format: Format, out: &Path) -> Result<()> {
    let text = match format {
        Format::Json => artifact.to_json()?,
        Format::Csv => artifact.to_csv()?,
    };
    write_atomic(out, text.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_analysis(a: AnalysisArgs, with_pca: bool, name: &str, mut recorded: Vec<String>) -> Result<()> {
    let store = TraceStore::read(&a.store)?;
    a.policy.check(store.policy())?;
    let pairs = store_pairs(&store, a.dataset.as_deref())?;
    let curves = average_curves(&store, &pairs)?;
    let mut meta = analysis_meta(&store, &a.store, name, std::mem::take(&mut recorded), a.timestamp)?;
    if let Some(d) = &a.dataset {
        meta.manifest = meta.manifest.with_input(path_key(d), sha256_file(d)?);
    }
    let artifact = if with_pca {
        let pca = pca_distances(&store, &pairs)?;
        Artifact::pca(meta, PcaSummary::new(&curves, &pca))
    } else {
        Artifact::similarity(meta, curves)
    };
    emit(&artifact, a.format, &a.out)
}

fn cmd_probe(a: ProbeArgs, name: &str, recorded: Vec<String>) -> Result<()> {
    let store = TraceStore::read(&a.store)?;
    a.policy.check(store.policy())?;
    let cfg = ProbeConfig {
        c: a.c,
        max_iter: a.max_iter,
        tol: a.tol,
        epochs: a.epochs,
        standardize: !a.no_standardize,
        train_ratio: a.train_ratio,
    };
    let labels: Vec<String> = store.header.samples.iter().map(|s| s.sense_label.clone()).collect();
    let grid = probe_grid(&store, &labels, a.expected_layers, a.kind, a.seed, &cfg, &store.header.dataset_id)?;
    for w in &grid.warnings {
        eprintln!("warning: {w}");
    }
    let mut meta = analysis_meta(&store, &a.store, name, recorded, a.timestamp)?;
    meta.manifest = meta.manifest.with_seed(a.seed);
    emit(&Artifact::probe(meta, grid), a.format, &a.out)
}

fn cmd_report(a: ReportArgs, name: &str, recorded: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new(name, recorded, a.timestamp);
    let mut inputs = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let sum = sha256_file(p)?;
        manifest = manifest.with_input(path_key(p), sum.clone());
        inputs.push((path_key(p), sum, Artifact::read(p)?));
    }
    let report = Report::merge(manifest, inputs)?;
    write_atomic(&a.out, report.to_markdown().as_bytes())?;
    if let Some(j) = &a.json_out {
        write_atomic(j, report.to_json()?.as_bytes())?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn write_dataset(out: &Path, samples: &[SenseSample], sidecar: SidecarManifest) -> Result<()> {
    write_atomic(out, datasets::to_jsonl(samples)?.as_bytes())?;
    write_sidecar(out, &sidecar)?;
    for w in &sidecar.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} ({} samples)", out.display(), samples.len());
    Ok(())
}

fn dataset_sidecar(manifest: RunManifest, samples: &[SenseSample]) -> SidecarManifest {
    SidecarManifest {
        schema_version: SCHEMA_VERSION,
        kind: "dataset".into(),
        manifest,
        stats: Some(datasets::stats(samples)),
        join_report: None,
        num_pairs: Some(datasets::make_pairs(samples).len()),
        warnings: Vec::new(),
    }
}

fn cmd_dataset(d: DatasetCommand, name: &str, recorded: Vec<String>) -> Result<()> {
    match d {
        DatasetCommand::Cpws { input, out, timestamp } => {
            let data = datasets::load_cpws(&input)?;
            let manifest = RunManifest::new(name, recorded, timestamp).with_input(path_key(&input), sha256_file(&input)?);
            let mut sidecar = dataset_sidecar(manifest, &data.samples);
            sidecar.warnings = data.warnings;
            write_dataset(&out, &data.samples, sidecar)
        }
        DatasetCommand::Pwc {
            cwi,
            secoda,
            out,
            timestamp,
        } => {
            let mut manifest = RunManifest::new(name, recorded, timestamp);
            let mut rows = Vec::new();
            for p in &cwi {
                rows.extend(datasets::load_cwi(p)?);
                manifest = manifest.with_input(path_key(p), sha256_file(p)?);
            }
            let senses = datasets::load_secoda(&secoda)?;
            manifest = manifest.with_input(path_key(&secoda), sha256_file(&secoda)?);
            let (samples, report) = datasets::build_pwc(&rows, &senses)?;
            let mut sidecar = dataset_sidecar(manifest, &samples);
            sidecar.join_report = Some(report);
            write_dataset(&out, &samples, sidecar)
        }
        DatasetCommand::Spwc {
            input,
            seed,
            out,
            timestamp,
        } => {
            let pwc = datasets::load_samples(&input)?;
            if pwc.is_empty() {
                return Err(Error::EmptyDataset(format!("{} has no samples", input.display())));
            }
            let samples = datasets::subset_spwc(&pwc, seed);
            let manifest = RunManifest::new(name, recorded, timestamp)
                .with_seed(seed)
                .with_input(path_key(&input), sha256_file(&input)?);
            write_dataset(&out, &samples, dataset_sidecar(manifest, &samples))
        }
        DatasetCommand::Stats { input, out, timestamp } => {
            let samples = datasets::load_samples(&input)?;
            let manifest = RunManifest::new(name, recorded, timestamp).with_input(path_key(&input), sha256_file(&input)?);
            let sidecar = dataset_sidecar(manifest, &samples);
            write_atomic(&out, (serde_json::to_string_pretty(&sidecar)? + "\n").as_bytes())?;
            let st = sidecar.stats.expect("set");
            println!("{} samples, {} unique keywords", st.total_samples, st.unique_keywords);
            Ok(())
        }
    }
}

/// Reads the run manifest embedded in any artifact this tool writes.
pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        return TraceStore::from_bytes(&bytes)?
            .header
            .manifest
            .ok_or_else(|| Error::Provenance(format!("{} carries no manifest", path.display())));
    }
    let text = String::from_utf8_lossy(&bytes);
    if text.starts_with('#') {
        return manifest_from_csv(&text)
            .ok_or_else(|| Error::Provenance(format!("{} has no manifest comment line", path.display())));
    }
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let m = value
        .pointer("/meta/manifest")
        .or_else(|| value.get("manifest"))
        .ok_or_else(|| Error::Provenance(format!("{} carries no manifest", path.display())))?;
    Ok(serde_json::from_value(m.clone())?)
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let manifest = read_manifest(&a.from)?;
    for (path, expected) in &manifest.input_checksums {
        let found = sha256_file(path)?;
        if &found != expected {
            return Err(Error::Provenance(format!(
                "input {path} changed since the run (recorded {expected}, now {found})"
            )));
        }
    }
    let mut argv = manifest.args.clone();
    argv.extend(["--out".to_owned(), path_key(&a.out)]);
    if let Some(j) = &a.json_out {
        argv.extend(["--json-out".to_owned(), path_key(j)]);
    }
    argv.extend(["--timestamp".to_owned(), manifest.timestamp.to_string()]);
    if argv.first().map(String::as_str) == Some("replay") {
        return Err(Error::Config("refusing to replay a replay".into()));
    }
    run(argv)
}

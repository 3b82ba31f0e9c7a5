//! Output artifacts of the CLI and their CSV, JSON and markdown renderings.
//!
//! JSON artifacts validate against the schemas in `schemas/`. CSV artifacts
//! start with `#` comment lines carrying the schema id and the run manifest as
//! one JSON line, followed by a header row and data rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetStats, JoinReport};
use crate::encoder::{CapturePolicy, SubLayer};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::metrics::{PcaDistances, SimilarityCurves};
use crate::probes::ProbeGridResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Similarity,
    Pca,
    Probe,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Similarity => "similarity",
            ArtifactKind::Pca => "pca",
            ArtifactKind::Probe => "probe",
        }
    }
}

/// Values keyed by sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSub<T> {
    pub sa: T,
    pub acts: T,
    pub out: T,
}

impl<T: Copy> PerSub<T> {
    pub fn from_fn(mut f: impl FnMut(SubLayer) -> T) -> Self {
        Self {
            sa: f(SubLayer::Sa),
            acts: f(SubLayer::Acts),
            out: f(SubLayer::Out),
        }
    }

    pub fn get(&self, sub: SubLayer) -> T {
        match sub {
            SubLayer::Sa => self.sa,
            SubLayer::Acts => self.acts,
            SubLayer::Out => self.out,
        }
    }
}

/// Averages over pairs then layers; WESim has no Acts value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub avg_sublayer_sim: PerSub<f64>,
    pub avg_we_sim: PerSub<Option<f64>>,
    pub avg_pca_l2: PerSub<f64>,
    /// One entry per layer, layer 1 first.
    pub pca_l2_per_layer: Vec<PerSub<f64>>,
    pub num_pairs: usize,
    pub num_samples: usize,
}

impl PcaSummary {
    pub fn new(curves: &SimilarityCurves, pca: &PcaDistances) -> Self {
        let layers = pca.per_layer.first().map_or(0, Vec::len);
        Self {
            avg_sublayer_sim: PerSub::from_fn(|s| curves.sublayer(s).mean()),
            avg_we_sim: PerSub::from_fn(|s| curves.we(s).map(|c| c.mean())),
            avg_pca_l2: PerSub::from_fn(|s| pca.average[s.index()]),
            pca_l2_per_layer: (0..layers)
                .map(|l| PerSub::from_fn(|s| pca.per_layer[s.index()][l]))
                .collect(),
            num_pairs: curves.num_pairs,
            num_samples: curves.num_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub manifest: RunManifest,
    pub dataset_id: String,
    pub model_checksum: String,
    pub capture_policy: CapturePolicy,
}

/// Output of `similarity`, `pca` or `probe`; exactly one body is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub schema_version: u32,
    pub kind: ArtifactKind,
    pub meta: ArtifactMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityCurves>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeGridResult>,
}

impl Artifact {
    pub fn similarity(meta: ArtifactMeta, curves: SimilarityCurves) -> Self {
        Self::with(ArtifactKind::Similarity, meta, Some(curves), None, None)
    }

    pub fn pca(meta: ArtifactMeta, summary: PcaSummary) -> Self {
        Self::with(ArtifactKind::Pca, meta, None, Some(summary), None)
    }

    pub fn probe(meta: ArtifactMeta, grid: ProbeGridResult) -> Self {
        Self::with(ArtifactKind::Probe, meta, None, None, Some(grid))
    }

    fn with(
        kind: ArtifactKind,
        meta: ArtifactMeta,
        similarity: Option<SimilarityCurves>,
        pca: Option<PcaSummary>,
        probe: Option<ProbeGridResult>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            meta,
            similarity,
            pca,
            probe,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let artifact: Artifact = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            line: e.line(),
            message: format!("not a JSON analysis artifact: {e}"),
        })?;
        artifact.check()?;
        Ok(artifact)
    }

    fn check(&self) -> Result<()> {
        let present = match self.kind {
            ArtifactKind::Similarity => self.similarity.is_some(),
            ArtifactKind::Pca => self.pca.is_some(),
            ArtifactKind::Probe => self.probe.is_some(),
        };
        if !present {
            return Err(Error::Validation(format!("{} artifact without its body", self.kind.as_str())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv_preamble(&format!("ctxprobe.{}/{SCHEMA_VERSION}", self.kind.as_str()), &self.meta)?;
        match self.kind {
            ArtifactKind::Similarity => {
                let c = self.similarity.as_ref().expect("checked");
                out.push_str("layer,slsim_sa,slsim_acts,slsim_out,wesim_sa,wesim_out\n");
                let layers = c.sublayer(SubLayer::Sa).values.len();
                for l in 0..layers {
                    let we = |s| c.we(s).map_or(String::new(), |cv| num(cv.values[l]));
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        l + 1,
                        num(c.sublayer(SubLayer::Sa).values[l]),
                        num(c.sublayer(SubLayer::Acts).values[l]),
                        num(c.sublayer(SubLayer::Out).values[l]),
                        we(SubLayer::Sa),
                        we(SubLayer::Out),
                    );
                }
            }
            ArtifactKind::Pca => {
                let p = self.pca.as_ref().expect("checked");
                out.push_str("scope,metric,sa,acts,out\n");
                let row = |out: &mut String, scope: &str, metric: &str, v: PerSub<f64>| {
                    let _ = writeln!(out, "{scope},{metric},{},{},{}", num(v.sa), num(v.acts), num(v.out));
                };
                row(&mut out, "average", "slsim", p.avg_sublayer_sim);
                let _ = writeln!(
                    out,
                    "average,wesim,{},-,{}",
                    p.avg_we_sim.sa.map_or("-".into(), num),
                    p.avg_we_sim.out.map_or("-".into(), num)
                );
                row(&mut out, "average", "pca_l2", p.avg_pca_l2);
                for (l, v) in p.pca_l2_per_layer.iter().enumerate() {
                    row(&mut out, &format!("layer_{}", l + 1), "pca_l2", *v);
                }
            }
            ArtifactKind::Probe => {
                let g = self.probe.as_ref().expect("checked");
                out.push_str("layer,sa,acts,out\n");
                for (l, row) in g.accuracies.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{}", l + 1, num(row[0]), num(row[1]), num(row[2]));
                }
            }
        }
        Ok(out)
    }

    /// Headline numbers shown in reports.
    pub fn totals(&self) -> BTreeMap<String, f64> {
        let mut t = BTreeMap::new();
        match self.kind {
            ArtifactKind::Similarity => {
                let c = self.similarity.as_ref().expect("checked");
                for s in SubLayer::ALL {
                    t.insert(format!("slsim_{s}_mean"), c.sublayer(s).mean());
                    if let Some(we) = c.we(s) {
                        t.insert(format!("wesim_{s}_mean"), we.mean());
                    }
                }
            }
            ArtifactKind::Pca => {
                let p = self.pca.as_ref().expect("checked");
                for s in SubLayer::ALL {
                    t.insert(format!("slsim_{s}"), p.avg_sublayer_sim.get(s));
                    if let Some(v) = p.avg_we_sim.get(s) {
                        t.insert(format!("wesim_{s}"), v);
                    }
                    t.insert(format!("pca_l2_{s}"), p.avg_pca_l2.get(s));
                }
            }
            ArtifactKind::Probe => {
                let g = self.probe.as_ref().expect("checked");
                for s in SubLayer::ALL {
                    let mean = g.accuracies.iter().map(|r| r[s.index()]).sum::<f64>() / g.accuracies.len().max(1) as f64;
                    t.insert(format!("accuracy_{s}_mean"), mean);
                }
                let (l, s) = g.best_cell();
                t.insert("accuracy_best".into(), g.accuracy(l, s));
            }
        }
        t
    }
}

/// Shortest round-trip decimal form.
fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_preamble(schema: &str, meta: &ArtifactMeta) -> Result<String> {
    #[derive(Serialize)]
    struct Head<'a> {
        dataset_id: &'a str,
        model_checksum: &'a str,
        capture_policy: CapturePolicy,
    }
    let head = Head {
        dataset_id: &meta.dataset_id,
        model_checksum: &meta.model_checksum,
        capture_policy: meta.capture_policy,
    };
    Ok(format!(
        "# schema: {schema}\n# meta: {}\n# manifest: {}\n",
        serde_json::to_string(&head)?,
        serde_json::to_string(&meta.manifest)?
    ))
}

/// Manifest from the `# manifest:` line of a CSV artifact.
pub fn manifest_from_csv(text: &str) -> Option<RunManifest> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# manifest: "))
        .and_then(|j| serde_json::from_str(j).ok())
}

/// Sidecar written next to dataset and trace outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub schema_version: u32,
    pub kind: String,
    pub manifest: RunManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<DatasetStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_report: Option<JoinReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_pairs: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    p.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub path: String,
    pub sha256: String,
    pub totals: BTreeMap<String, f64>,
    pub artifact: Artifact,
}

/// Merged view over several analysis artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: String,
    pub manifest: RunManifest,
    pub inputs: Vec<ReportInput>,
}

impl Report {
    /// Merges artifacts. Inputs must share the tool version and model, and two
    /// inputs for the same (kind, dataset, classifier) must be identical.
    pub fn merge(manifest: RunManifest, inputs: Vec<(String, String, Artifact)>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset("report needs at least one input".into()));
        }
        let first = &inputs[0].2.meta;
        for (path, _, a) in &inputs[1..] {
            if a.meta.manifest.version != first.manifest.version {
                return Err(Error::Provenance(format!(
                    "{path} was produced by version {}, {} by {}",
                    a.meta.manifest.version, inputs[0].0, first.manifest.version
                )));
            }
            if a.meta.model_checksum != first.model_checksum {
                return Err(Error::Provenance(format!(
                    "{path} used model {}, {} used {}",
                    a.meta.model_checksum, inputs[0].0, first.model_checksum
                )));
            }
        }
        let mut seen: BTreeMap<(ArtifactKind, String, Option<&'static str>), (&str, &Artifact)> = BTreeMap::new();
        for (path, _, a) in &inputs {
            let key = (a.kind, a.meta.dataset_id.clone(), a.probe.as_ref().map(|g| g.kind.as_str()));
            if let Some((other, prev)) = seen.insert(key, (path, a)) {
                if prev != a {
                    return Err(Error::Provenance(format!(
                        "{other} and {path} are different {} runs on dataset {}",
                        a.kind.as_str(),
                        a.meta.dataset_id
                    )));
                }
            }
        }
        let inputs = inputs
            .into_iter()
            .map(|(path, sha256, artifact)| ReportInput {
                path,
                sha256,
                totals: artifact.totals(),
                artifact,
            })
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind: "report".into(),
            manifest,
            inputs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Contextualization report\n\n");
        let _ = writeln!(
            md,
            "Generated by {} {} from {} input(s).\n",
            self.manifest.tool,
            self.manifest.version,
            self.inputs.len()
        );
        for input in &self.inputs {
            let a = &input.artifact;
            let p = a.meta.capture_policy;
            let _ = writeln!(md, "## {} on `{}`\n", a.kind.as_str(), a.meta.dataset_id);
            let _ = writeln!(md, "- source: `{}` (sha256 `{}`)", input.path, input.sha256);
            let _ = writeln!(md, "- model: `{}`", a.meta.model_checksum);
            let _ = writeln!(
                md,
                "- capture policy: sa_point={}, static_embedding_kind={}, pooling={}",
                p.sa_point, p.static_embedding_kind, p.pooling
            );
            let _ = writeln!(md, "- command: `{} {}`\n", a.meta.manifest.tool, a.meta.manifest.args.join(" "));
            match a.kind {
                ArtifactKind::Similarity => render_similarity(&mut md, a.similarity.as_ref().expect("checked")),
                ArtifactKind::Pca => render_pca(&mut md, a.pca.as_ref().expect("checked")),
                ArtifactKind::Probe => render_probe(&mut md, a.probe.as_ref().expect("checked")),
            }
            md.push_str("| total | value |\n|---|---|\n");
            for (k, v) in &input.totals {
                let _ = writeln!(md, "| {k} | {v:.4} |");
            }
            md.push('\n');
        }
        md
    }
}

fn render_similarity(md: &mut String, c: &SimilarityCurves) {
    let _ = writeln!(md, "{} pairs, {} samples.\n", c.num_pairs, c.num_samples);
    md.push_str("| layer | SLSim SA | SLSim Acts | SLSim Out | WESim SA | WESim Out |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for l in 0..c.sublayer(SubLayer::Sa).values.len() {
        let we = |s| c.we(s).map_or("-".to_owned(), |cv| format!("{:.4}", cv.values[l]));
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {:.4} | {} | {} |",
            l + 1,
            c.sublayer(SubLayer::Sa).values[l],
            c.sublayer(SubLayer::Acts).values[l],
            c.sublayer(SubLayer::Out).values[l],
            we(SubLayer::Sa),
            we(SubLayer::Out)
        );
    }
    md.push('\n');
}

fn render_pca(md: &mut String, p: &PcaSummary) {
    let _ = writeln!(md, "{} pairs, {} samples.\n", p.num_pairs, p.num_samples);
    md.push_str("| | SA | Acts | Out |\n|---|---|---|---|\n");
    let s = p.avg_sublayer_sim;
    let _ = writeln!(md, "| Avg SLSim | {:.4} | {:.4} | {:.4} |", s.sa, s.acts, s.out);
    let w = p.avg_we_sim;
    let f = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.4}"));
    let _ = writeln!(md, "| Avg WESim | {} | {} | {} |", f(w.sa), f(w.acts), f(w.out));
    let l = p.avg_pca_l2;
    let _ = writeln!(md, "| PCA L2 | {:.4} | {:.4} | {:.4} |\n", l.sa, l.acts, l.out);
}

fn render_probe(md: &mut String, g: &ProbeGridResult) {
    let _ = writeln!(
        md,
        "{} probes, split seed {}, {} train / {} test, {} classes{}.\n",
        g.kind.as_str().to_uppercase(),
        g.split_seed,
        g.num_train,
        g.num_test,
        g.num_classes,
        if g.stratified { ", stratified" } else { ", unstratified" }
    );
    for w in &g.warnings {
        let _ = writeln!(md, "> warning: {w}\n");
    }
    md.push_str("| layer | SA | Acts | Out |\n|---|---|---|---|\n");
    for (l, row) in g.accuracies.iter().enumerate() {
        let _ = writeln!(md, "| {} | {:.4} | {:.4} | {:.4} |", l + 1, row[0], row[1], row[2]);
    }
    md.push('\n');
}

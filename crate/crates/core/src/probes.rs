//! One-vs-rest linear sense probes over sub-layer representations.
//!
//! Both classifiers minimize `(1/n) * (0.5 * |w|^2 + C * sum_i loss_i)` per
//! class. Logistic regression uses accelerated gradient descent with
//! backtracking and an unregularized bias. The SVM runs full-batch subgradient
//! descent on the hinge loss with step `1 / (lambda * t)`, a constant feature
//! standing in for the bias, and returns the best iterate seen.
//!
//! When there are fewer training samples than features, weights are kept as
//! `w = X^T alpha` and every product goes through the Gram matrix; the
//! iterates are the same as in the primal.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{CapturePolicy, SubLayer};
use crate::error::{Error, Result};
use crate::store::TraceSource;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Lr,
    Svm,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Lr => "lr",
            ProbeKind::Svm => "svm",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ProbeKind::Lr),
            "svm" => Ok(ProbeKind::Svm),
            _ => Err(Error::Config(format!("unknown probe kind {s:?} (expected lr or svm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Inverse regularization strength.
    pub c: f64,
    /// LR iteration cap.
    pub max_iter: usize,
    /// LR stops once the gradient norm falls below this.
    pub tol: f64,
    /// SVM epoch budget.
    pub epochs: usize,
    pub standardize: bool,
    pub train_ratio: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 1000,
            tol: 1e-4,
            epochs: 1000,
            standardize: true,
            train_ratio: 0.8,
        }
    }
}

/// Sorted unique label names and each input's id into them.
pub fn label_space(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let names: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let ids = labels
        .iter()
        .map(|l| names.binary_search(l).expect("label present"))
        .collect();
    (names, ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub layer: usize,
    pub sublayer: SubLayer,
}

impl ProbeDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        label_names: Vec<String>,
        layer: usize,
        sublayer: SubLayer,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return Err(Error::Validation(format!(
                "label id {bad} outside {} classes",
                label_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            label_names,
            layer,
            sublayer,
        })
    }

    /// Features of the given samples at `(layer, sub)` of a trace source.
    pub fn from_source<S: TraceSource + ?Sized>(
        src: &S,
        samples: &[usize],
        labels: &[usize],
        label_names: &[String],
        layer: usize,
        sub: SubLayer,
    ) -> Result<Self> {
        let rows: Vec<Vec<f32>> = samples.iter().map(|&i| src.vector(i, layer, sub).to_vec()).collect();
        let features = if rows.is_empty() {
            Matrix::zeros(0, src.vector(0, layer, sub).len())
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(
            features,
            samples.iter().map(|&i| labels[i]).collect(),
            label_names.to_vec(),
            layer,
            sub,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
            layer: self.layer,
            sublayer: self.sublayer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Seeded train/test split of sample indices. Stratified (largest-remainder
/// allocation of test slots per class) when every class has at least two
/// samples, otherwise a plain shuffle with a warning.
pub fn split(labels: &[usize], ratio: f64, seed: u64) -> Result<Split> {
    let n = labels.len();
    if n < 5 {
        return Err(Error::InsufficientData { needed: 5, found: n });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} outside (0, 1)")));
    }
    let n_train = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let n_test = n - n_train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let singletons = by_class.values().filter(|m| m.len() < 2).count();
    if singletons > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        return Ok(Split {
            train,
            test,
            seed,
            stratified: false,
            warning: Some(format!(
                "{singletons} of {} classes have a single sample; stratification disabled, \
                 those classes cannot be both trained and tested",
                by_class.len()
            )),
        });
    }

    let mut quota: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&class, members)| {
            let exact = members.len() as f64 * n_test as f64 / n as f64;
            (class, exact.floor() as usize, exact.fract())
        })
        .collect();
    let mut remaining = n_test - quota.iter().map(|q| q.1).sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[i].1 + 1 < by_class[&quota[i].0].len() {
            quota[i].1 += 1;
            remaining -= 1;
        }
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n_test));
    for (class, take, _) in quota {
        let mut members = by_class[&class].clone();
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        test,
        seed,
        stratified: true,
        warning: None,
    })
}

/// Per-feature train mean and standard deviation (1 where a feature is constant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = (x.rows().max(1) as f64, x.cols());
        let mut mean = vec![0f64; d];
        for r in 0..x.rows() {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; d];
        for r in 0..x.rows() {
            for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (f64::from(v) - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (f64::from(v) - m) / s)
            .collect()
    }
}

/// One binary model per class seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: ProbeKind,
    pub config: ProbeConfig,
    /// Global label ids, ascending; row `k` of `weights` belongs to `classes[k]`.
    pub classes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
    /// Iterations (LR) or epochs (SVM) used per class.
    pub iterations: Vec<usize>,
    /// Per class: objective per iteration (LR) or best-so-far objective per
    /// epoch (SVM).
    pub objective_history: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn scores(&self, row: &[f32]) -> Vec<f64> {
        let x = self.standardizer.apply(row);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &x) + b)
            .collect()
    }

    /// Global label id with the highest score; ties go to the lowest id.
    pub fn predict(&self, row: &[f32]) -> usize {
        self.classes[argmax(&self.scores(row))]
    }
}

/// First index of the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear map `p -> X p` over either primal weights or sample coefficients.
struct Design {
    n: usize,
    d: usize,
    /// Standardized features, row-major n x d.
    x: Vec<f64>,
    /// Gram matrix when running in sample space.
    gram: Option<Vec<f64>>,
    /// Append a constant 1 feature.
    augment: bool,
}

impl Design {
    fn new(x: Vec<f64>, n: usize, d: usize, augment: bool) -> Self {
        let gram = (n < d).then(|| {
            let mut k = vec![0f64; n * n];
            for i in 0..n {
                for j in i..n {
                    let mut v = dot(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                    if augment {
                        v += 1.0;
                    }
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            k
        });
        Self { n, d, x, gram, augment }
    }

    fn param_len(&self) -> usize {
        match self.gram {
            Some(_) => self.n,
            None => self.d + usize::from(self.augment),
        }
    }

    fn scores(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        match &self.gram {
            Some(k) => (0..n).map(|i| dot(&k[i * n..(i + 1) * n], p)).collect(),
            None => (0..n)
                .map(|i| {
                    let s = dot(&self.x[i * self.d..(i + 1) * self.d], &p[..self.d]);
                    if self.augment {
                        s + p[self.d]
                    } else {
                        s
                    }
                })
                .collect(),
        }
    }

    /// Coordinates of `X^T r`.
    fn xt(&self, r: &[f64]) -> Vec<f64> {
        match self.gram {
            Some(_) => r.to_vec(),
            None => {
                let mut out = vec![0f64; self.param_len()];
                for (i, &ri) in r.iter().enumerate() {
                    if ri != 0.0 {
                        let row = &self.x[i * self.d..(i + 1) * self.d];
                        out[..self.d].iter_mut().zip(row).for_each(|(o, v)| *o += ri * v);
                        if self.augment {
                            out[self.d] += ri;
                        }
                    }
                }
                out
            }
        }
    }

    /// `|w|^2` given `p` and its scores `X p`.
    fn sqnorm(&self, p: &[f64], xp: &[f64]) -> f64 {
        match self.gram {
            Some(_) => dot(p, xp).max(0.0),
            None => dot(p, p),
        }
    }

    /// Primal weights and the augmented bias (0 without augmentation).
    fn to_primal(&self, p: &[f64]) -> (Vec<f64>, f64) {
        match self.gram {
            Some(_) => {
                let mut w = vec![0f64; self.d];
                for (i, &a) in p.iter().enumerate() {
                    let row = &self.x[i * self.d..(i + 1) * self.d];
                    w.iter_mut().zip(row).for_each(|(o, v)| *o += a * v);
                }
                let b = if self.augment { p.iter().sum() } else { 0.0 };
                (w, b)
            }
            None => {
                let b = if self.augment { p[self.d] } else { 0.0 };
                (p[..self.d].to_vec(), b)
            }
        }
    }
}

fn axpby(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(u, v)| a * u + b * v).collect()
}

/// `log(1 + exp(-m))` without overflow.
fn log_loss(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// `1 / (1 + exp(m))`.
fn sigmoid_neg(m: f64) -> f64 {
    if m > 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

struct LrEval {
    obj: f64,
    grad_p: Vec<f64>,
    grad_b: f64,
    grad_sq: f64,
}

fn lr_objective(design: &Design, y: &[f64], c: f64, p: &[f64], b: f64) -> (f64, Vec<f64>) {
    let xp = design.scores(p);
    let loss: f64 = xp.iter().zip(y).map(|(s, yi)| log_loss(yi * (s + b))).sum();
    let obj = (0.5 * design.sqnorm(p, &xp) + c * loss) / design.n as f64;
    (obj, xp)
}

fn lr_eval(design: &Design, y: &[f64], c: f64, p: &[f64], b: f64) -> LrEval {
    let n = design.n as f64;
    let (obj, xp) = lr_objective(design, y, c, p, b);
    let r: Vec<f64> = xp
        .iter()
        .zip(y)
        .map(|(s, yi)| -c * yi * sigmoid_neg(yi * (s + b)))
        .collect();
    let grad_b = r.iter().sum::<f64>() / n;
    let grad_p: Vec<f64> = axpby(1.0 / n, p, 1.0 / n, &design.xt(&r));
    let grad_sq = design.sqnorm(&grad_p, &design.scores(&grad_p)) + grad_b * grad_b;
    LrEval {
        obj,
        grad_p,
        grad_b,
        grad_sq,
    }
}

struct BinaryFit {
    p: Vec<f64>,
    b: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn fit_lr_binary(design: &Design, y: &[f64], cfg: &ProbeConfig) -> BinaryFit {
    let dim = design.param_len();
    let (mut x, mut xb) = (vec![0f64; dim], 0f64);
    let (mut z, mut zb) = (x.clone(), xb);
    let mut t = 1f64;
    let mut lip = 1e-2;
    let mut f_x = lr_objective(design, y, cfg.c, &x, xb).0;
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let g = lr_eval(design, y, cfg.c, &z, zb);
        if g.grad_sq.sqrt() <= cfg.tol {
            x = z;
            xb = zb;
            f_x = g.obj;
            break;
        }
        iterations += 1;
        let (next, next_b, f_next) = loop {
            let step = 1.0 / lip;
            let cand = axpby(1.0, &z, -step, &g.grad_p);
            let cand_b = zb - step * g.grad_b;
            let f = lr_objective(design, y, cfg.c, &cand, cand_b).0;
            if f <= g.obj - 0.5 * step * g.grad_sq + 1e-15 * g.obj.abs() || lip > 1e15 {
                break (cand, cand_b, f);
            }
            lip *= 2.0;
        };
        if f_next > f_x {
            // restart momentum
            t = 1.0;
            z = next.clone();
            zb = next_b;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mom = (t - 1.0) / t_next;
            z = axpby(1.0 + mom, &next, -mom, &x);
            zb = (1.0 + mom) * next_b - mom * xb;
            t = t_next;
        }
        x = next;
        xb = next_b;
        f_x = f_next;
        history.push(f_x);
    }
    if history.is_empty() {
        history.push(f_x);
    }
    BinaryFit {
        p: x,
        b: xb,
        iterations,
        history,
    }
}

fn fit_svm_binary(design: &Design, y: &[f64], cfg: &ProbeConfig) -> BinaryFit {
    let n = design.n as f64;
    let lambda = 1.0 / (cfg.c * n);
    let objective = |p: &[f64]| -> (f64, Vec<f64>) {
        let s = design.scores(p);
        let hinge: f64 = s.iter().zip(y).map(|(si, yi)| (1.0 - yi * si).max(0.0)).sum();
        ((0.5 * design.sqnorm(p, &s) + cfg.c * hinge) / n, s)
    };
    let mut p = vec![0f64; design.param_len()];
    let (mut best_obj, mut scores) = objective(&p);
    let mut best = p.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for t in 1..=cfg.epochs {
        let eta = 1.0 / (lambda * t as f64);
        let r: Vec<f64> = scores
            .iter()
            .zip(y)
            .map(|(si, yi)| if yi * si < 1.0 { *yi } else { 0.0 })
            .collect();
        p = axpby(1.0 - eta * lambda, &p, eta / n, &design.xt(&r));
        let (obj, s) = objective(&p);
        scores = s;
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&p);
        }
        history.push(best_obj);
    }
    BinaryFit {
        p: best,
        b: 0.0,
        iterations: cfg.epochs,
        history,
    }
}

fn train(kind: ProbeKind, data: &ProbeDataset, cfg: &ProbeConfig) -> Result<LinearModel> {
    let mut classes: Vec<usize> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateSplit(format!(
            "training split for layer {} {} holds {} class(es)",
            data.layer,
            data.sublayer,
            classes.len()
        )));
    }
    let standardizer = if cfg.standardize {
        Standardizer::fit(&data.features)
    } else {
        Standardizer::identity(data.dim())
    };
    let (n, d) = (data.len(), data.dim());
    let mut x = Vec::with_capacity(n * d);
    for r in 0..n {
        x.extend(standardizer.apply(data.features.row(r)));
    }
    let design = Design::new(x, n, d, kind == ProbeKind::Svm);
    let mut model = LinearModel {
        kind,
        config: *cfg,
        classes: classes.clone(),
        weights: Vec::with_capacity(classes.len()),
        bias: Vec::with_capacity(classes.len()),
        standardizer,
        iterations: Vec::with_capacity(classes.len()),
        objective_history: Vec::with_capacity(classes.len()),
    };
    for &class in &classes {
        let y: Vec<f64> = data
            .labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let fit = match kind {
            ProbeKind::Lr => fit_lr_binary(&design, &y, cfg),
            ProbeKind::Svm => fit_svm_binary(&design, &y, cfg),
        };
        let (w, aug_b) = design.to_primal(&fit.p);
        model.weights.push(w);
        model.bias.push(fit.b + aug_b);
        model.iterations.push(fit.iterations);
        model.objective_history.push(fit.history);
    }
    Ok(model)
}

pub fn train_lr(data: &ProbeDataset, cfg: &ProbeConfig) -> Result<LinearModel> {
    train(ProbeKind::Lr, data, cfg)
}

pub fn train_svm(data: &ProbeDataset, cfg: &ProbeConfig) -> Result<LinearModel> {
    train(ProbeKind::Svm, data, cfg)
}

pub fn evaluate(model: &LinearModel, test: &ProbeDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    if test.dim() != model.dim() {
        return Err(Error::Shape {
            op: "evaluate",
            left: (1, model.dim()),
            right: (test.len(), test.dim()),
        });
    }
    let correct = (0..test.len())
        .filter(|&i| model.predict(test.features.row(i)) == test.labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGridResult {
    pub dataset_id: String,
    pub kind: ProbeKind,
    pub split_seed: u64,
    pub capture_policy: CapturePolicy,
    pub config: ProbeConfig,
    /// `accuracies[layer - 1][sub.index()]`.
    pub accuracies: Vec<[f64; 3]>,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub stratified: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ProbeGridResult {
    pub fn accuracy(&self, layer: usize, sub: SubLayer) -> f64 {
        self.accuracies[layer - 1][sub.index()]
    }

    /// `(layer, sub)` of the best cell; ties go to the earliest layer, then SA < Acts < Out.
    pub fn best_cell(&self) -> (usize, SubLayer) {
        let mut best = (1, SubLayer::Sa);
        for (l, row) in self.accuracies.iter().enumerate() {
            for sub in SubLayer::ALL {
                if row[sub.index()] > self.accuracy(best.0, best.1) {
                    best = (l + 1, sub);
                }
            }
        }
        best
    }
}

/// Trains and tests one probe per (layer, sub-layer) on a single shared split.
/// `labels` holds one sense label per sample of `src`.
pub fn probe_grid<S: TraceSource + ?Sized>(
    src: &S,
    labels: &[String],
    expected_layers: usize,
    kind: ProbeKind,
    seed: u64,
    cfg: &ProbeConfig,
    dataset_id: &str,
) -> Result<ProbeGridResult> {
    let mut missing = Vec::new();
    if labels.len() != src.len() {
        missing.push(format!("labels for {} samples, store has {}", labels.len(), src.len()));
    }
    for layer in 1..=expected_layers {
        for sub in SubLayer::ALL {
            if layer > src.num_layers() || (!src.is_empty() && src.vector(0, layer, sub).is_empty()) {
                missing.push(format!("layer {layer} {sub}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let (names, ids) = label_space(labels);
    let sp = split(&ids, cfg.train_ratio, seed)?;
    let cells: Vec<(usize, SubLayer)> = (1..=expected_layers)
        .flat_map(|l| SubLayer::ALL.map(|s| (l, s)))
        .collect();
    let acc = cells
        .par_iter()
        .map(|&(layer, sub)| {
            let train_set = ProbeDataset::from_source(src, &sp.train, &ids, &names, layer, sub)?;
            let test_set = ProbeDataset::from_source(src, &sp.test, &ids, &names, layer, sub)?;
            let model = train(kind, &train_set, cfg)?;
            evaluate(&model, &test_set)
        })
        .collect::<Result<Vec<f64>>>()?;
    let accuracies = acc.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(ProbeGridResult {
        dataset_id: dataset_id.to_owned(),
        kind,
        split_seed: seed,
        capture_policy: src.policy(),
        config: *cfg,
        accuracies,
        num_train: sp.train.len(),
        num_test: sp.test.len(),
        num_classes: names.len(),
        stratified: sp.stratified,
        warnings: sp.warning.into_iter().collect(),
    })
}

//! Contextualization metrics: pairwise sub-layer cosine similarity, similarity
//! to the static embedding, per-layer dataset averages and PCA distances.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{SubLayer, TraceSet};
use crate::error::{Error, Result};
use crate::store::TraceSource;

/// Cosine similarity accumulated in f64, clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine between the two sentences' vectors at `(layer, sub)`.
pub fn sublayer_sim(a: &TraceSet, b: &TraceSet, layer: usize, sub: SubLayer) -> Result<f64> {
    if a.policy != b.policy {
        return Err(Error::PolicyMismatch(format!(
            "{} and {} were captured under different policies",
            a.sentence_id, b.sentence_id
        )));
    }
    cosine(a.vector(layer, sub)?, b.vector(layer, sub)?)
}

/// Cosine between the vector at `(layer, sub)` and the static embedding.
/// Undefined for the Acts sub-layer, whose width differs from the embedding.
pub fn we_sim(trace: &TraceSet, layer: usize, sub: SubLayer) -> Result<f64> {
    let v = trace.vector(layer, sub)?;
    we_sim_vectors(v, &trace.static_emb, sub)
}

fn we_sim_vectors(v: &[f32], static_emb: &[f32], sub: SubLayer) -> Result<f64> {
    if sub == SubLayer::Acts || v.len() != static_emb.len() {
        return Err(Error::DimensionUndefined(format!(
            "WESim undefined for {sub}: {} dims vs {}-dim static embedding",
            v.len(),
            static_emb.len()
        )));
    }
    cosine(v, static_emb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub sublayer: SubLayer,
    /// One value per layer, layer 1 first.
    pub values: Vec<f64>,
}

impl SimilarityCurve {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurves {
    /// SA, Acts, Out; mean over pairs.
    pub sublayer_sim: Vec<SimilarityCurve>,
    /// SA, Out; mean over samples.
    pub we_sim: Vec<SimilarityCurve>,
    pub num_pairs: usize,
    pub num_samples: usize,
}

impl SimilarityCurves {
    pub fn sublayer(&self, sub: SubLayer) -> &SimilarityCurve {
        &self.sublayer_sim[sub.index()]
    }

    pub fn we(&self, sub: SubLayer) -> Option<&SimilarityCurve> {
        self.we_sim.iter().find(|c| c.sublayer == sub)
    }
}

pub const WE_SUBLAYERS: [SubLayer; 2] = [SubLayer::Sa, SubLayer::Out];

fn check_pairs<S: TraceSource + ?Sized>(src: &S, pairs: &[(usize, usize)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no sentence pairs".into()));
    }
    let missing: Vec<String> = pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .filter(|&i| i >= src.len())
        .map(|i| format!("sample {i}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    Ok(())
}

/// Dataset-average SubLayerSim (over `pairs`) and WESim (over every sample)
/// curves. Pairs index into `src`.
pub fn average_curves<S: TraceSource + ?Sized>(src: &S, pairs: &[(usize, usize)]) -> Result<SimilarityCurves> {
    check_pairs(src, pairs)?;
    let layers = src.num_layers();
    let mut sublayer_sim = Vec::with_capacity(3);
    for sub in SubLayer::ALL {
        let mut values = Vec::with_capacity(layers);
        for layer in 1..=layers {
            let mut sum = 0.0;
            for &(a, b) in pairs {
                sum += cosine(src.vector(a, layer, sub), src.vector(b, layer, sub))?;
            }
            values.push(sum / pairs.len() as f64);
        }
        sublayer_sim.push(SimilarityCurve { sublayer: sub, values });
    }
    let mut we = Vec::with_capacity(2);
    for sub in WE_SUBLAYERS {
        let mut values = Vec::with_capacity(layers);
        for layer in 1..=layers {
            let mut sum = 0.0;
            for i in 0..src.len() {
                sum += we_sim_vectors(src.vector(i, layer, sub), src.static_emb(i), sub)?;
            }
            values.push(sum / src.len() as f64);
        }
        we.push(SimilarityCurve { sublayer: sub, values });
    }
    Ok(SimilarityCurves {
        sublayer_sim,
        we_sim: we,
        num_pairs: pairs.len(),
        num_samples: src.len(),
    })
}

/// Top-k principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal, largest-magnitude component of each axis positive.
    pub axes: Vec<Vec<f64>>,
    /// Sample variance along each axis, descending.
    pub explained_variance: Vec<f64>,
    /// Sum of per-feature sample variances.
    pub total_variance: f64,
}

impl Pca {
    /// Fits on `rows` (n x d) using the smaller of the n x n Gram matrix and
    /// the d x d covariance. Variances use the n - 1 denominator.
    pub fn fit(rows: &[&[f32]], k: usize) -> Result<Self> {
        let n = rows.len();
        if n < 3 {
            return Err(Error::InsufficientData { needed: 3, found: n });
        }
        let d = rows[0].len();
        if d < 2 || k == 0 || k > d {
            return Err(Error::Validation(format!("cannot fit {k} components in {d} dimensions")));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape {
                op: "pca_fit",
                left: (n, d),
                right: (1, bad.len()),
            });
        }
        let mut mean = vec![0f64; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let x = DMatrix::from_fn(n, d, |i, j| f64::from(rows[i][j]) - mean[j]);
        let denom = (n - 1) as f64;
        let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;

        let (values, vectors, via_gram) = if n <= d {
            let eig = SymmetricEigen::new(&x * x.transpose() / denom);
            (eig.eigenvalues, eig.eigenvectors, true)
        } else {
            let eig = SymmetricEigen::new(x.transpose() * &x / denom);
            (eig.eigenvalues, eig.eigenvectors, false)
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &idx in order.iter().take(k) {
            let col = vectors.column(idx);
            let mut axis: Vec<f64> = if via_gram {
                (x.transpose() * col).iter().copied().collect()
            } else {
                col.iter().copied().collect()
            };
            orthogonalize(&mut axis, &axes);
            if normalize(&mut axis).is_none() {
                axis = complement_axis(&axes, d);
            }
            fix_sign(&mut axis);
            axes.push(axis);
            explained_variance.push(values[idx].max(0.0));
        }
        // the complement fallback can only appear at zero variance, so the
        // order stays descending
        Ok(Self {
            mean,
            axes,
            explained_variance,
            total_variance,
        })
    }

    pub fn project(&self, v: &[f32]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::Shape {
                op: "pca_project",
                left: (1, self.mean.len()),
                right: (1, v.len()),
            });
        }
        Ok(self
            .axes
            .iter()
            .map(|axis| {
                axis.iter()
                    .zip(v)
                    .zip(&self.mean)
                    .map(|((a, &x), m)| a * (f64::from(x) - m))
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (axis, c) in self.axes.iter().zip(coords) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += c * a;
            }
        }
        out
    }

    /// Squared Euclidean distance between the projections of `a` and `b`.
    pub fn squared_l2(&self, a: &[f32], b: &[f32]) -> Result<f64> {
        let (pa, pb) = (self.project(a)?, self.project(b)?);
        Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = dot(v, v).sqrt();
    if norm <= 1e-12 * (v.len() as f64).sqrt() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}

/// First standard basis vector that survives orthogonalization.
fn complement_axis(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    (0..d)
        .find_map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            orthogonalize(&mut e, basis);
            normalize(&mut e).map(|()| e)
        })
        .expect("k <= d leaves a complement")
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn stack<S: TraceSource + ?Sized>(src: &S, layer: usize, sub: SubLayer) -> Vec<&[f32]> {
    (0..src.len()).map(|i| src.vector(i, layer, sub)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaDistances {
    /// `per_layer[sub][layer - 1]`: mean squared L2 over pairs.
    pub per_layer: Vec<Vec<f64>>,
    /// Mean over layers of `per_layer`, one per sub-layer.
    pub average: Vec<f64>,
}

/// Fits one 2-component PCA per (layer, sub-layer) on all samples of `src`
/// and averages the squared projected distance over `pairs`.
pub fn pca_distances<S: TraceSource + ?Sized>(src: &S, pairs: &[(usize, usize)]) -> Result<PcaDistances> {
    check_pairs(src, pairs)?;
    let layers = src.num_layers();
    let cells: Vec<(SubLayer, usize)> = SubLayer::ALL
        .iter()
        .flat_map(|&s| (1..=layers).map(move |l| (s, l)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(sub, layer)| {
            let pca = Pca::fit(&stack(src, layer, sub), 2)?;
            let mut sum = 0.0;
            for &(a, b) in pairs {
                sum += pca.squared_l2(src.vector(a, layer, sub), src.vector(b, layer, sub))?;
            }
            Ok(sum / pairs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_layer: Vec<Vec<f64>> = values.chunks(layers).map(<[f64]>::to_vec).collect();
    let average = per_layer.iter().map(|v| v.iter().sum::<f64>() / layers as f64).collect();
    Ok(PcaDistances { per_layer, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{CapturePolicy, LayerTrace, Pooling};
    use crate::tokenizer::PieceSpan;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(id: &str, seed: u64, layers: usize) -> TraceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        TraceSet {
            sentence_id: id.into(),
            span: PieceSpan::new(1, 2),
            policy: CapturePolicy::default(),
            static_emb: v(6),
            layers: (0..layers)
                .map(|_| LayerTrace {
                    sa: v(6),
                    acts: v(24),
                    out: v(6),
                })
                .collect(),
        }
    }

    fn cos_oracle(a: &[f32], b: &[f32]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn cosine_fixed_cases() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v3: Vec<f32> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine(&v, &v3).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedSimilarity)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::Shape { .. })));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(
            a in prop::collection::vec(-10.0f32..10.0, 8),
            b in prop::collection::vec(-10.0f32..10.0, 8),
            s in 0.1f32..50.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let sa: Vec<f32> = a.iter().map(|x| x * s).collect();
            prop_assert!((ab - cosine(&sa, &b).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn sublayer_sim_identity_and_oracle() {
        let a = trace("a", 1, 3);
        let b = trace("b", 2, 3);
        for l in 1..=3 {
            for sub in SubLayer::ALL {
                assert!((sublayer_sim(&a, &a, l, sub).unwrap() - 1.0).abs() < 1e-12);
                let want = cos_oracle(a.vector(l, sub).unwrap(), b.vector(l, sub).unwrap());
                assert!((sublayer_sim(&a, &b, l, sub).unwrap() - want).abs() < 1e-6);
            }
        }
        let mut c = b.clone();
        c.policy.pooling = Pooling::MeanPieces;
        assert!(matches!(sublayer_sim(&a, &c, 1, SubLayer::Sa), Err(Error::PolicyMismatch(_))));
    }

    #[test]
    fn we_sim_cases() {
        let mut t = trace("a", 3, 2);
        t.layers[1].out = t.static_emb.clone();
        assert!((we_sim(&t, 2, SubLayer::Out).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(we_sim(&t, 1, SubLayer::Acts), Err(Error::DimensionUndefined(_))));
    }

    #[test]
    fn curves_match_brute_force() {
        let traces: Vec<TraceSet> = (0..6).map(|i| trace(&i.to_string(), i, 4)).collect();
        let pairs = [(0, 1), (2, 3), (4, 5)];
        let curves = average_curves(traces.as_slice(), &pairs).unwrap();
        for sub in SubLayer::ALL {
            for l in 1..=4 {
                let want = pairs
                    .iter()
                    .map(|&(a, b)| cos_oracle(traces[a].vector(l, sub).unwrap(), traces[b].vector(l, sub).unwrap()))
                    .sum::<f64>()
                    / 3.0;
                assert!((curves.sublayer(sub).values[l - 1] - want).abs() < 1e-6);
            }
        }
        for sub in WE_SUBLAYERS {
            for l in 1..=4 {
                let want = traces
                    .iter()
                    .map(|t| cos_oracle(t.vector(l, sub).unwrap(), &t.static_emb))
                    .sum::<f64>()
                    / 6.0;
                assert!((curves.we(sub).unwrap().values[l - 1] - want).abs() < 1e-6);
            }
        }
        let doubled = [pairs, pairs].concat();
        let again = average_curves(traces.as_slice(), &doubled).unwrap();
        for (a, b) in again.sublayer_sim.iter().zip(&curves.sublayer_sim) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn one_pair_curves_equal_pair_values() {
        let traces = vec![trace("a", 7, 2), trace("b", 8, 2)];
        let curves = average_curves(traces.as_slice(), &[(0, 1)]).unwrap();
        for sub in SubLayer::ALL {
            for l in 1..=2 {
                assert_eq!(
                    curves.sublayer(sub).values[l - 1],
                    sublayer_sim(&traces[0], &traces[1], l, sub).unwrap()
                );
            }
        }
        assert!(matches!(average_curves(traces.as_slice(), &[]), Err(Error::EmptyDataset(_))));
        assert!(matches!(average_curves(traces.as_slice(), &[(0, 5)]), Err(Error::Coverage(_))));
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
    }

    fn refs(rows: &[Vec<f32>]) -> Vec<&[f32]> {
        rows.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn pca_axes_orthonormal_both_paths() {
        for (n, d) in [(10, 40), (50, 6)] {
            let rows = random_rows(n, d, 11);
            let pca = Pca::fit(&refs(&rows), 2).unwrap();
            let (a, b) = (&pca.axes[0], &pca.axes[1]);
            assert!((dot(a, a) - 1.0).abs() < 1e-6);
            assert!((dot(b, b) - 1.0).abs() < 1e-6);
            assert!(dot(a, b).abs() < 1e-6);
            assert!(pca.explained_variance[0] >= pca.explained_variance[1]);
            assert!(pca.explained_variance.iter().sum::<f64>() <= pca.total_variance + 1e-9);
            for axis in &pca.axes {
                let big = axis.iter().copied().fold(0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(big > 0.0);
            }
        }
    }

    #[test]
    fn pca_rejects_small_n() {
        let rows = random_rows(2, 5, 1);
        assert!(matches!(Pca::fit(&refs(&rows), 2), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn pca_self_distance_zero() {
        let rows = random_rows(8, 5, 2);
        let pca = Pca::fit(&refs(&rows), 2).unwrap();
        assert_eq!(pca.squared_l2(&rows[3], &rows[3]).unwrap(), 0.0);
    }

    #[test]
    fn pca_gram_and_covariance_paths_agree() {
        let rows = random_rows(12, 12, 5);
        let r = refs(&rows);
        let pca = Pca::fit(&r, 2).unwrap();
        // covariance route on the same data, forced by duplicating every row
        // (duplicates leave the axes unchanged)
        let dup: Vec<&[f32]> = r.iter().chain(r.iter()).copied().collect();
        let cov = Pca::fit(&dup, 2).unwrap();
        for (a, b) in pca.axes.iter().zip(&cov.axes) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-8));
        }
    }
}

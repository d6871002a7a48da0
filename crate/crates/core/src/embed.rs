//! Transport-plan pooling of embedded features against trainable references.
//!
//! For a single reference `z ∈ R^{p×k}` and Nyström features `Ψ ∈ R^{n×k}`:
//!
//! ```text
//! K = Ψ zᵀ,   P = sinkhorn(K, ε),   Φ_z = √p · Pᵀ Ψ
//! ```
//!
//! With `q` references the blocks are stacked and scaled by `1/√q`. An
//! optional positional matrix `S` multiplies `P` elementwise; the result is
//! used as is, without re-normalizing.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::kernel::NystromMap;
use crate::ot::{sinkhorn, CostContext, SinkhornMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Ot,
    /// Column softmax of `K/ε` scaled by `1/p` in place of the transport plan.
    DotProduct,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot" => Ok(Self::Ot),
            "dot" | "dot_product" | "dot-product" => Ok(Self::DotProduct),
            other => Err(Error::InvalidParameter(format!("unknown pooling {other:?}"))),
        }
    }
}

/// `q` references of shape `p × k` plus the pooling hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    refs: Vec<Array2<f64>>,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sigma_pos: Option<f64>,
    pub pooling: Pooling,
    pub mode: SinkhornMode,
}

impl ReferenceBank {
    pub fn new(refs: Vec<Array2<f64>>, epsilon: f64, sinkhorn_iters: usize) -> Result<Self> {
        let Some(first) = refs.first() else {
            return Err(Error::InvalidParameter("reference bank needs at least one reference".into()));
        };
        let shape = first.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::DimensionMismatch("empty reference".into()));
        }
        if let Some(bad) = refs.iter().find(|r| r.dim() != shape) {
            return Err(Error::DimensionMismatch(format!("references have shapes {:?} and {:?}", shape, bad.dim())));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if sinkhorn_iters == 0 {
            return Err(Error::InvalidParameter("sinkhorn_iters must be at least 1".into()));
        }
        Ok(Self { refs, epsilon, sinkhorn_iters, sigma_pos: None, pooling: Pooling::Ot, mode: SinkhornMode::LogDomain })
    }

    pub fn with_positional(mut self, sigma_pos: Option<f64>) -> Result<Self> {
        if let Some(s) = sigma_pos {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("sigma_pos must be positive, got {s}")));
            }
        }
        self.sigma_pos = sigma_pos;
        Ok(self)
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_mode(mut self, mode: SinkhornMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn refs(&self) -> &[Array2<f64>] {
        &self.refs
    }

    /// Replaces the references, keeping shape.
    pub fn set_refs(&mut self, refs: Vec<Array2<f64>>) -> Result<()> {
        if refs.len() != self.refs.len() || refs.iter().any(|r| r.dim() != self.refs[0].dim()) {
            return Err(Error::DimensionMismatch("replacement references change the bank shape".into()));
        }
        self.refs = refs;
        Ok(())
    }

    /// Number of references `q`.
    pub fn q(&self) -> usize {
        self.refs.len()
    }

    /// Supports per reference `p`.
    pub fn p(&self) -> usize {
        self.refs[0].nrows()
    }

    /// Feature width `k`.
    pub fn k(&self) -> usize {
        self.refs[0].ncols()
    }

    /// Length of a flattened embedding, `q·p·k`.
    pub fn output_dim(&self) -> usize {
        self.q() * self.p() * self.k()
    }
}

/// `q × p × k` block; [`SetEmbedding::flatten`] gives the classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEmbedding {
    pub values: Array3<f64>,
}

impl SetEmbedding {
    pub fn flatten(&self) -> Array1<f64> {
        Array1::from_iter(self.values.iter().copied())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &SetEmbedding) -> f64 {
        self.values.iter().zip(other.values.iter()).map(|(a, b)| a * b).sum()
    }
}

/// `S_ij = exp(-(i/n − j/p)² / σ²)` with 1-based `i`, `j`.
pub fn position_matrix(n: usize, p: usize, sigma_pos: f64) -> Array2<f64> {
    let inv = 1.0 / (sigma_pos * sigma_pos);
    Array2::from_shape_fn((n, p), |(i, j)| {
        let d = (i + 1) as f64 / n as f64 - (j + 1) as f64 / p as f64;
        (-d * d * inv).exp()
    })
}

fn check_features(features: ArrayView2<'_, f64>, bank: &ReferenceBank) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if features.ncols() != bank.k() {
        return Err(Error::DimensionMismatch(format!(
            "features have width {} but references have width {}",
            features.ncols(),
            bank.k()
        )));
    }
    Ok(())
}

/// Column softmax of `K/ε` over the inputs, scaled by `1/p`.
pub fn dot_product_weights(k: ArrayView2<'_, f64>, epsilon: f64) -> Array2<f64> {
    let (n, p) = k.dim();
    let mut out = Array2::zeros((n, p));
    for j in 0..p {
        let col = k.column(j);
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| ((v - m) / epsilon).exp()).collect();
        let total: f64 = exps.iter().sum();
        for i in 0..n {
            out[[i, j]] = exps[i] / total / p as f64;
        }
    }
    out
}

/// Pooling weights `n × p` for one reference (plan or surrogate, with the
/// positional factor applied when configured).
pub fn pooling_weights(
    features: ArrayView2<'_, f64>,
    reference: ArrayView2<'_, f64>,
    bank: &ReferenceBank,
    pooling: Pooling,
) -> Result<Array2<f64>> {
    let sim = features.dot(&reference.t());
    let mut weights = match pooling {
        Pooling::Ot => {
            let ctx = CostContext::uniform(sim.view(), bank.epsilon)?;
            sinkhorn(&ctx, bank.sinkhorn_iters, bank.mode)?.plan
        }
        Pooling::DotProduct => dot_product_weights(sim.view(), bank.epsilon),
    };
    if let Some(sigma) = bank.sigma_pos {
        weights *= &position_matrix(features.nrows(), reference.nrows(), sigma);
    }
    Ok(weights)
}

fn pool(features: ArrayView2<'_, f64>, bank: &ReferenceBank, pooling: Pooling) -> Result<SetEmbedding> {
    check_features(features, bank)?;
    let (q, p, k) = (bank.q(), bank.p(), bank.k());
    let scale = (p as f64).sqrt() / (q as f64).sqrt();
    let mut values = Array3::zeros((q, p, k));
    for (j, z) in bank.refs.iter().enumerate() {
        let w = pooling_weights(features, z.view(), bank, pooling)?;
        let block = w.t().dot(&features) * scale;
        values.slice_mut(s![j, .., ..]).assign(&block);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("set embedding"));
    }
    Ok(SetEmbedding { values })
}

/// `Φ_{z¹..z^q}(x)` for ψ-embedded features, using the bank's pooling.
pub fn embed_set(features: ArrayView2<'_, f64>, bank: &ReferenceBank) -> Result<SetEmbedding> {
    pool(features, bank, bank.pooling)
}

/// Same pipeline with the dot-product surrogate in place of the plan.
pub fn dot_product_pool(features: ArrayView2<'_, f64>, bank: &ReferenceBank) -> Result<SetEmbedding> {
    pool(features, bank, Pooling::DotProduct)
}

/// Raw features → Nyström → pooling, one embedding per batch sample.
pub fn embed_batch(batch: &PaddedBatch, nystrom: &NystromMap, bank: &ReferenceBank) -> Result<Vec<SetEmbedding>> {
    (0..batch.len())
        .into_par_iter()
        .map(|s| {
            let psi = nystrom.embed(batch.trimmed(s))?;
            embed_set(psi.view(), bank)
        })
        .collect()
}

/// `P Pᵀ` for each reference: self-attention-like `n × n` weights.
pub fn attention_scores(features: ArrayView2<'_, f64>, bank: &ReferenceBank) -> Result<Vec<Array2<f64>>> {
    check_features(features, bank)?;
    bank.refs
        .iter()
        .map(|z| {
            let w = pooling_weights(features, z.view(), bank, bank.pooling)?;
            Ok(w.dot(&w.t()))
        })
        .collect()
}

/// Mean of the rows: the `p = 1` special case of the pooling.
pub fn mean_pool(features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    features.mean_axis(Axis(0)).ok_or(Error::EmptySet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact;
    use crate::kernel::KernelSpec;
    use crate::linalg::min_eigenvalue;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(rng))
    }

    fn bank(rng: &mut ChaCha8Rng, q: usize, p: usize, k: usize, eps: f64) -> ReferenceBank {
        ReferenceBank::new((0..q).map(|_| random(rng, p, k)).collect(), eps, 100).unwrap()
    }

    #[test]
    fn position_matrix_examples() {
        let s = position_matrix(4, 4, 0.3);
        for i in 0..4 {
            assert_eq!(s[[i, i]], 1.0);
        }
        assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
        let wide = position_matrix(7, 3, 1e6);
        assert!(wide.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let s = position_matrix(2, 1, 0.5);
        assert!((s[[0, 0]] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(s[[1, 0]], 1.0);
    }

    #[test]
    fn singleton_set_spreads_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bank(&mut rng, 1, 4, 3, 0.5);
        let x = random(&mut rng, 1, 3);
        let e = embed_set(x.view(), &b).unwrap();
        for slot in 0..4 {
            for c in 0..3 {
                assert!((e.values[[0, slot, c]] - x[[0, c]] / 2.0).abs() < 1e-14);
            }
        }
        assert!((e.norm_sq() - x.row(0).dot(&x.row(0))).abs() < 1e-12);
        let d = dot_product_pool(x.view(), &b).unwrap();
        for (a, c) in d.values.iter().zip(e.values.iter()) {
            assert!((a - c).abs() < 1e-14);
        }
        let att = attention_scores(x.view(), &b).unwrap();
        assert!((att[0][[0, 0]] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn embedding_inner_product_is_kz() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = bank(&mut rng, 1, 3, 4, 0.5);
        let x = random(&mut rng, 5, 4);
        let y = random(&mut rng, 7, 4);
        let ex = embed_set(x.view(), &b).unwrap();
        let ey = embed_set(y.view(), &b).unwrap();
        let kz = exact::k_z(x.view(), y.view(), &b, &KernelSpec::Linear).unwrap();
        assert!((ex.dot(&ey) - kz).abs() <= 1e-10 * kz.abs().max(1.0));
    }

    #[test]
    fn multi_reference_energy_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = bank(&mut rng, 3, 4, 5, 0.5);
        let x = random(&mut rng, 9, 5);
        let full = embed_set(x.view(), &b).unwrap();
        let singles: f64 = b
            .refs()
            .iter()
            .map(|z| {
                let one = ReferenceBank::new(vec![z.clone()], b.epsilon, b.sinkhorn_iters).unwrap();
                embed_set(x.view(), &one).unwrap().norm_sq()
            })
            .sum();
        assert!((full.norm_sq() - singles / 3.0).abs() < 1e-12);

        let perm = [3usize, 0, 8, 1, 7, 2, 6, 5, 4];
        let xp = x.select(Axis(0), &perm);
        let permuted = embed_set(xp.view(), &b).unwrap();
        for (a, c) in full.values.iter().zip(permuted.values.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_positional_bandwidth_is_a_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = bank(&mut rng, 2, 3, 4, 0.5);
        let x = random(&mut rng, 6, 4);
        let off = embed_set(x.view(), &b).unwrap();
        let on = embed_set(x.view(), &b.clone().with_positional(Some(1e6)).unwrap()).unwrap();
        for (a, c) in off.values.iter().zip(on.values.iter()) {
            assert!((a - c).abs() <= 1e-8);
        }
    }

    #[test]
    fn pooled_mass_matches_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = bank(&mut rng, 1, 5, 3, 1.0);
        let x = random(&mut rng, 8, 3);
        let e = embed_set(x.view(), &b).unwrap();
        let summed = e.values.index_axis(Axis(0), 0).sum_axis(Axis(0));
        let expected = x.sum_axis(Axis(0)) * 5f64.sqrt() / 8.0;
        for (a, c) in summed.iter().zip(expected.iter()) {
            assert!((a - c).abs() < 1e-9, "{a} vs {c}");
        }
    }

    #[test]
    fn sample_equal_to_reference_recovers_it() {
        let z = array![[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0], [1.5, 1.5, 0.0]];
        let b = ReferenceBank::new(vec![z.clone()], 0.01, 200).unwrap();
        let w = pooling_weights(z.view(), z.view(), &b, Pooling::Ot).unwrap();
        for ((i, j), v) in w.indexed_iter() {
            let target = if i == j { 0.25 } else { 0.0 };
            assert!((v - target).abs() < 1e-2);
        }
        let e = embed_set(z.view(), &b).unwrap();
        let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..4 {
            for c in 0..3 {
                assert!((e.values[[0, r, c]] - z[[r, c]] / 2.0).abs() < 2e-2 * znorm);
            }
        }
    }

    #[test]
    fn dot_product_surrogate_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random(&mut rng, 6, 3);
        let w = dot_product_weights(k.view(), 0.5);
        for col in w.columns() {
            assert!((col.sum() - 1.0 / 3.0).abs() < 1e-14);
        }
        let constant = dot_product_weights(Array2::from_elem((4, 2), 0.3).view(), 0.5);
        assert!(constant.iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-15));
    }

    #[test]
    fn attention_scores_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = bank(&mut rng, 2, 3, 4, 0.5);
        let mut x = random(&mut rng, 5, 4);
        let dup = x.row(1).to_owned();
        x.row_mut(3).assign(&dup);
        for a in attention_scores(x.view(), &b).unwrap() {
            assert!(min_eigenvalue(a.view()) >= -1e-12);
            for c in 0..5 {
                assert!((a[[1, c]] - a[[3, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = bank(&mut rng, 1, 3, 4, 0.5);
        assert!(matches!(embed_set(Array2::zeros((0, 4)).view(), &b), Err(Error::EmptySet)));
        assert!(matches!(embed_set(Array2::zeros((2, 3)).view(), &b), Err(Error::DimensionMismatch(_))));
        assert!(ReferenceBank::new(vec![Array2::zeros((2, 2)), Array2::zeros((3, 2))], 0.5, 10).is_err());
        assert!(ReferenceBank::new(vec![], 0.5, 10).is_err());
        assert!(ReferenceBank::new(vec![Array2::zeros((2, 2))], 0.0, 10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn permutation_invariant_without_positions(seed in 0u64..10_000, n in 1usize..12, q in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = bank(&mut rng, q, 3, 4, 0.5);
                let x = random(&mut rng, n, 4);
                let perm: Vec<usize> = (0..n).rev().collect();
                let a = embed_set(x.view(), &b).unwrap();
                let c = embed_set(x.select(Axis(0), &perm).view(), &b).unwrap();
                for (u, v) in a.values.iter().zip(c.values.iter()) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }

            #[test]
            fn energy_is_mean_over_references(seed in 0u64..10_000, n in 1usize..10, q in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = bank(&mut rng, q, 3, 4, 0.7);
                let x = random(&mut rng, n, 4);
                let full = embed_set(x.view(), &b).unwrap().norm_sq();
                let mean: f64 = b
                    .refs()
                    .iter()
                    .map(|z| embed_set(x.view(), &ReferenceBank::new(vec![z.clone()], 0.7, 100).unwrap()).unwrap().norm_sq())
                    .sum::<f64>()
                    / q as f64;
                prop_assert!((full - mean).abs() <= 1e-12 * full.max(1.0));
            }
        }
    }
}

//! Elementwise kernels and the Nyström feature map
//! `ψ(x) = κ(w, w)^{-1/2} κ(w, x)`.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster;
use crate::error::{Error, Result};
use crate::linalg::{spectral_apply, sym_eig, SymEig};

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `exp(-‖x − y‖² / (2σ²))`
    Gaussian { sigma: f64 },
    /// `xᵀ y`
    Linear,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("gaussian bandwidth must be positive, got {sigma}")));
        }
        Ok(Self::Gaussian { sigma })
    }

    /// `κ(x, x)` when it does not depend on `x`.
    pub fn unit_diagonal(&self) -> bool {
        matches!(self, Self::Gaussian { .. })
    }
}

/// `n × m` matrix of `κ(x_i, y_j)`.
pub fn kernel_eval(spec: &KernelSpec, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!("kernel inputs have widths {} and {}", x.ncols(), y.ncols())));
    }
    let gram = x.dot(&y.t());
    Ok(match *spec {
        KernelSpec::Linear => gram,
        KernelSpec::Gaussian { sigma } => {
            let xn: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
            let yn: Vec<f64> = y.outer_iter().map(|r| r.dot(&r)).collect();
            let scale = 1.0 / (2.0 * sigma * sigma);
            Array2::from_shape_fn(gram.dim(), |(i, j)| {
                let d2 = (xn[i] + yn[j] - 2.0 * gram[[i, j]]).max(0.0);
                (-d2 * scale).exp()
            })
        }
    })
}

/// Anchor selection for [`fit_nystrom`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMethod {
    Random,
    KMeans,
}

/// Fitted Nyström map. Immutable once built; [`NystromMap::with_anchors`]
/// recomputes the whitener for new anchors.
#[derive(Debug, Clone)]
pub struct NystromMap {
    anchors: Array2<f64>,
    spec: KernelSpec,
    ridge: f64,
    whitener: Array2<f64>,
}

/// `κ(w,w)` eigenvalues are clamped below at `ridge` before `λ^{-1/2}`.
pub(crate) fn clamped_inv_sqrt(lambda: f64, ridge: f64) -> f64 {
    lambda.max(ridge).powf(-0.5)
}

impl NystromMap {
    pub fn with_anchors(anchors: Array2<f64>, spec: KernelSpec, ridge: f64) -> Result<Self> {
        if anchors.nrows() == 0 {
            return Err(Error::InsufficientData("no anchors".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be nonnegative, got {ridge}")));
        }
        let gram = kernel_eval(&spec, anchors.view(), anchors.view())?;
        let eig = sym_eig(gram.view());
        let whitener = whitener_from_eig(&eig, ridge);
        if whitener.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nystrom whitener (anchors degenerate with zero ridge)"));
        }
        Ok(Self { anchors, spec, ridge, whitener })
    }

    pub fn anchors(&self) -> &Array2<f64> {
        &self.anchors
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn whitener(&self) -> &Array2<f64> {
        &self.whitener
    }

    /// Number of anchors `k` (output width).
    pub fn dim(&self) -> usize {
        self.anchors.nrows()
    }

    /// Input feature width `d`.
    pub fn input_dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Rows `ψ(x_i) = whitener · κ(w, x_i)`.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        embed_features(self, x)
    }
}

pub(crate) fn whitener_from_eig(eig: &SymEig, ridge: f64) -> Array2<f64> {
    spectral_apply(eig, |l| clamped_inv_sqrt(l, ridge))
}

/// Picks `k` anchors from `features` and builds the map.
pub fn fit_nystrom(
    features: ArrayView2<'_, f64>,
    k: usize,
    method: AnchorMethod,
    spec: KernelSpec,
    ridge: f64,
    seed: u64,
) -> Result<NystromMap> {
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one anchor".into()));
    }
    let distinct = count_distinct_rows(features, k);
    if distinct < k {
        return Err(Error::InsufficientData(format!(
            "{k} anchors requested but only {distinct} distinct feature vectors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = match method {
        AnchorMethod::Random => {
            let idx = sample(&mut rng, features.nrows(), k).into_vec();
            features.select(Axis(0), &idx)
        }
        AnchorMethod::KMeans => cluster::kmeans(features, k, cluster::DEFAULT_MAX_ITERS, &mut rng)?.centroids,
    };
    NystromMap::with_anchors(anchors, spec, ridge)
}

/// Distinct rows, counting stops at `limit`.
fn count_distinct_rows(x: ArrayView2<'_, f64>, limit: usize) -> usize {
    let mut seen = HashSet::new();
    for row in x.outer_iter() {
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        seen.insert(key);
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

pub fn embed_features(map: &NystromMap, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != map.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have width {} but anchors have width {}",
            x.ncols(),
            map.input_dim()
        )));
    }
    let kwx = kernel_eval(&map.spec, map.anchors.view(), x)?;
    Ok(map.whitener.dot(&kwx).reversed_axes())
}

/// Token alphabet for k-mer features; one single-character token per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<char>,
}

impl Alphabet {
    pub fn new(tokens: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut out = Vec::new();
        for t in tokens {
            if out.contains(&t) {
                return Err(Error::InvalidParameter(format!("duplicate alphabet token {t:?}")));
            }
            out.push(t);
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("empty alphabet".into()));
        }
        Ok(Self { tokens: out })
    }

    /// Parses a file body with one token per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut toks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let mut chars = t.chars();
            let c = chars.next().unwrap();
            if chars.next().is_some() {
                return Err(Error::Parse { line: lineno + 1, msg: format!("token {t:?} is not a single character") });
            }
            toks.push(c);
        }
        Self::new(toks)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.tokens.iter().position(|&t| t == c)
    }
}

/// Sliding-window one-hot encoding of a sequence; each row is the
/// concatenation of `kmer_size` one-hot vectors, scaled to unit L2 norm.
pub fn kmer_features(sequence: &str, alphabet: &Alphabet, kmer_size: usize) -> Result<Array2<f64>> {
    if kmer_size == 0 {
        return Err(Error::InvalidParameter("k-mer size must be at least 1".into()));
    }
    let idx = sequence
        .chars()
        .enumerate()
        .map(|(pos, c)| alphabet.index_of(c).ok_or(Error::UnknownToken { token: c.to_string(), position: pos }))
        .collect::<Result<Vec<_>>>()?;
    if idx.len() < kmer_size {
        return Err(Error::SequenceTooShort { index: 0, len: idx.len(), kmer: kmer_size });
    }
    let a = alphabet.len();
    let rows = idx.len() - kmer_size + 1;
    let value = 1.0 / (kmer_size as f64).sqrt();
    let mut out = Array2::zeros((rows, a * kmer_size));
    for r in 0..rows {
        for (offset, &t) in idx[r..r + kmer_size].iter().enumerate() {
            out[[r, offset * a + t]] = value;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(rng))
    }

    #[test]
    fn kernel_values() {
        let x = array![[1.0, 2.0], [0.0, 1.0]];
        let g = kernel_eval(&KernelSpec::gaussian(0.7).unwrap(), x.view(), x.view()).unwrap();
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[1, 1]], 1.0);
        let orth = array![[1.0, 0.0], [0.0, 3.0]];
        let l = kernel_eval(&KernelSpec::Linear, orth.view(), orth.view()).unwrap();
        assert_eq!(l[[0, 1]], 0.0);
        let a = array![[0.0, 0.0]];
        let b = array![[0.6, 0.8]];
        let v = kernel_eval(&KernelSpec::gaussian(0.5).unwrap(), a.view(), b.view()).unwrap()[[0, 0]];
        assert!((v - (-2f64).exp()).abs() < 1e-15);
        assert!((v - 0.135335).abs() < 1e-6);
        assert!(kernel_eval(&KernelSpec::Linear, a.view(), array![[1.0]].view()).is_err());
        assert!(KernelSpec::gaussian(0.0).is_err());
    }

    #[test]
    fn nystrom_exact_on_anchor_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 6, 3);
        let spec = KernelSpec::gaussian(1.2).unwrap();
        let map = fit_nystrom(x.view(), 6, AnchorMethod::Random, spec, DEFAULT_RIDGE, 0).unwrap();
        let psi = map.embed(x.view()).unwrap();
        let approx = psi.dot(&psi.t());
        let exact = kernel_eval(&spec, x.view(), x.view()).unwrap();
        for (a, b) in approx.iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn single_gaussian_anchor() {
        let w = array![[0.3, -0.2]];
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let map = NystromMap::with_anchors(w.clone(), spec, DEFAULT_RIDGE).unwrap();
        let x = array![[1.0, 1.0], [0.3, -0.2]];
        let psi = map.embed(x.view()).unwrap();
        let k = kernel_eval(&spec, x.view(), w.view()).unwrap();
        assert!((psi[[0, 0]] - k[[0, 0]]).abs() < 1e-14);
        assert!((psi[[1, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthonormal_linear_anchors_whiten_to_identity() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let map = NystromMap::with_anchors(w.clone(), KernelSpec::Linear, DEFAULT_RIDGE).unwrap();
        for ((i, j), v) in map.whitener().indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
        let psi = map.embed(w.view()).unwrap();
        let gram = psi.dot(&psi.t());
        let k = kernel_eval(&KernelSpec::Linear, w.view(), w.view()).unwrap();
        for (a, b) in gram.iter().zip(k.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let zero = map.embed(Array2::zeros((1, 3)).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_full_rank_anchor_gram_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&mut rng, 3, 3);
        let map = NystromMap::with_anchors(w.clone(), KernelSpec::Linear, DEFAULT_RIDGE).unwrap();
        let psi = map.embed(w.view()).unwrap();
        let gram = psi.dot(&psi.t());
        let k = w.dot(&w.t());
        for (a, b) in gram.iter().zip(k.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        // Whitening invariant on the (full) eigenspace.
        let wt = map.whitener();
        let ident = wt.dot(&k).dot(wt);
        for ((i, j), v) in ident.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_features_have_bounded_norm_and_psd_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pool = random(&mut rng, 200, 4);
        let spec = KernelSpec::gaussian(1.5).unwrap();
        let map = fit_nystrom(pool.view(), 12, AnchorMethod::KMeans, spec, DEFAULT_RIDGE, 3).unwrap();
        let x = random(&mut rng, 40, 4);
        let psi = map.embed(x.view()).unwrap();
        for row in psi.outer_iter() {
            assert!(row.dot(&row).sqrt() <= 1.0 + 1e-6);
        }
        let gram = psi.dot(&psi.t());
        assert!(crate::linalg::min_eigenvalue(gram.view()) >= -1e-8);
    }

    #[test]
    fn approximation_improves_with_more_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pool = random(&mut rng, 30, 2);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let exact = kernel_eval(&spec, pool.view(), pool.view()).unwrap();
        let err = |k: usize| {
            let map = fit_nystrom(pool.view(), k, AnchorMethod::Random, spec, DEFAULT_RIDGE, 5).unwrap();
            let psi = map.embed(pool.view()).unwrap();
            (&psi.dot(&psi.t()) - &exact).iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let (e5, e30) = (err(5), err(30));
        assert!(e30 < 1e-6 && e30 < e5);
    }

    #[test]
    fn linear_embedding_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(&mut rng, 3, 4);
        let map = NystromMap::with_anchors(w, KernelSpec::Linear, DEFAULT_RIDGE).unwrap();
        let x = random(&mut rng, 5, 4);
        let alpha = rng.random_range(0.1..4.0);
        let a = map.embed((&x * alpha).view()).unwrap();
        let b = map.embed(x.view()).unwrap() * alpha;
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn nystrom_errors() {
        let x = Array2::from_elem((5, 2), 1.0);
        let err = fit_nystrom(x.view(), 2, AnchorMethod::KMeans, KernelSpec::Linear, DEFAULT_RIDGE, 0);
        assert!(matches!(err, Err(Error::InsufficientData(_))));
        let map = NystromMap::with_anchors(array![[1.0, 0.0]], KernelSpec::Linear, DEFAULT_RIDGE).unwrap();
        assert!(matches!(map.embed(array![[1.0]].view()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn kmer_examples() {
        let ab = Alphabet::new(['A', 'B']).unwrap();
        let f = kmer_features("AB", &ab, 1).unwrap();
        assert_eq!(f, array![[1.0, 0.0], [0.0, 1.0]]);
        let f = kmer_features("AAA", &ab, 2).unwrap();
        assert_eq!(f.nrows(), 2);
        assert_eq!(f.row(0), f.row(1));
        let f = kmer_features("ABAB", &ab, 2).unwrap();
        assert_eq!(f.dim(), (3, 4));
        let s = 1.0 / 2f64.sqrt();
        for row in f.outer_iter() {
            let nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz, vec![s, s]);
            assert!((row.dot(&row) - 1.0).abs() < 1e-15);
        }
        assert!(matches!(kmer_features("AxB", &ab, 1), Err(Error::UnknownToken { position: 1, .. })));
        assert!(matches!(kmer_features("A", &ab, 2), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn alphabet_parsing() {
        let a = Alphabet::parse("A\nC\n\nG\nT\n").unwrap();
        assert_eq!(a.len(), 4);
        assert!(Alphabet::parse("AC\n").is_err());
        assert!(Alphabet::parse("A\nA\n").is_err());
    }
}

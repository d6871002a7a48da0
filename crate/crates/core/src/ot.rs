//! Entropic optimal transport between an input set and a reference.
//!
//! The cost is the negated similarity `C = -K`, so the plan solves
//!
//! ```text
//! max_P  ⟨P, K⟩ + ε H(P)   s.t.  P 1 = a,  Pᵀ 1 = b
//! ```
//!
//! by alternating scalings of `E = exp(K / ε)`:
//! `u ← a / (E v)`, then `v ← b / (Eᵀ u)`, starting from `v = 1`. The number of
//! iterations is fixed by the caller; there is no convergence test, so the
//! whole solve is a fixed unrolled map that can be differentiated.

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on `Σ a = 1` and `Σ b = 1`.
const SIMPLEX_TOL: f64 = 1e-12;

/// Largest `n` accepted by [`exact_ot_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 8;

/// Arithmetic used by the Sinkhorn iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornMode {
    /// Multiplicative scalings of `exp(K/ε)`. Underflows for small ε.
    Standard,
    /// Dual potentials `f = ε log u`, `g = ε log v` with log-sum-exp updates.
    #[default]
    LogDomain,
}

impl std::str::FromStr for SinkhornMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "log" | "log_domain" | "log-domain" => Ok(Self::LogDomain),
            other => Err(Error::InvalidParameter(format!("unknown sinkhorn mode {other:?}"))),
        }
    }
}

/// Similarity matrix, regularization and marginals of one OT problem.
#[derive(Debug, Clone)]
pub struct CostContext<'a> {
    similarity: ArrayView2<'a, f64>,
    epsilon: f64,
    a: Array1<f64>,
    b: Array1<f64>,
}

impl<'a> CostContext<'a> {
    pub fn new(similarity: ArrayView2<'a, f64>, epsilon: f64, a: Array1<f64>, b: Array1<f64>) -> Result<Self> {
        let (n, p) = similarity.dim();
        if a.len() != n || b.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "similarity is {n}x{p} but marginals have lengths {} and {}",
                a.len(),
                b.len()
            )));
        }
        if n == 0 || p == 0 {
            return Err(Error::DimensionMismatch("empty similarity matrix".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if similarity.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        check_simplex(&a, "a")?;
        check_simplex(&b, "b")?;
        Ok(Self { similarity, epsilon, a, b })
    }

    /// Uniform marginals `a = 1/n`, `b = 1/p`.
    pub fn uniform(similarity: ArrayView2<'a, f64>, epsilon: f64) -> Result<Self> {
        let (n, p) = similarity.dim();
        if n == 0 || p == 0 {
            return Err(Error::DimensionMismatch("empty similarity matrix".into()));
        }
        Self::new(similarity, epsilon, Array1::from_elem(n, 1.0 / n as f64), Array1::from_elem(p, 1.0 / p as f64))
    }

    pub fn similarity(&self) -> ArrayView2<'a, f64> {
        self.similarity
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn a(&self) -> ArrayView1<'_, f64> {
        self.a.view()
    }

    pub fn b(&self) -> ArrayView1<'_, f64> {
        self.b.view()
    }
}

fn check_simplex(w: &Array1<f64>, name: &str) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("marginal {name} has a negative or non-finite entry")));
    }
    let s = w.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!("marginal {name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Scalings after the last iteration, in log form: `f = ε log u`, `g = ε log v`.
///
/// Rows or columns with zero marginal carry `-inf`.
#[derive(Debug, Clone)]
pub struct ScalingState {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

/// Output of a Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub epsilon: f64,
    pub iterations_run: usize,
}

impl TransportPlan {
    /// `‖P 1 − a‖_∞`.
    pub fn row_residual(&self, a: ArrayView1<'_, f64>) -> f64 {
        max_abs_diff(self.plan.sum_axis(Axis(1)).view(), a)
    }

    /// `‖Pᵀ 1 − b‖_∞`.
    pub fn col_residual(&self, b: ArrayView1<'_, f64>) -> f64 {
        max_abs_diff(self.plan.sum_axis(Axis(0)).view(), b)
    }
}

fn max_abs_diff(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Runs `iters` alternating scaling updates and returns the plan
/// `diag(u) E diag(v)`.
pub fn sinkhorn(ctx: &CostContext<'_>, iters: usize, mode: SinkhornMode) -> Result<TransportPlan> {
    let plan = match mode {
        SinkhornMode::Standard => standard_plan(ctx, iters)?,
        SinkhornMode::LogDomain => {
            let state = log_scalings(ctx, iters)?;
            plan_from_potentials(ctx, &state)
        }
    };
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn plan"));
    }
    Ok(TransportPlan { plan, epsilon: ctx.epsilon, iterations_run: iters })
}

/// Log-domain potentials after `iters` updates.
pub fn sinkhorn_potentials(ctx: &CostContext<'_>, iters: usize) -> Result<ScalingState> {
    log_scalings(ctx, iters)
}

fn check_iters(iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::InvalidParameter("sinkhorn needs at least one iteration".into()));
    }
    Ok(())
}

fn standard_plan(ctx: &CostContext<'_>, iters: usize) -> Result<Array2<f64>> {
    check_iters(iters)?;
    let eps = ctx.epsilon;
    let e = ctx.similarity.mapv(|k| (k / eps).exp());
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("exp(K/epsilon)"));
    }
    let mut v = Array1::<f64>::ones(ctx.b.len());
    let mut u = Array1::<f64>::zeros(ctx.a.len());
    for _ in 0..iters {
        let ev = e.dot(&v);
        u = &ctx.a / &ev;
        let etu = e.t().dot(&u);
        v = &ctx.b / &etu;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sinkhorn scalings (try log-domain mode)"));
        }
    }
    let mut plan = e;
    for ((i, j), pij) in plan.indexed_iter_mut() {
        *pij *= u[i] * v[j];
    }
    Ok(plan)
}

fn log_scalings(ctx: &CostContext<'_>, iters: usize) -> Result<ScalingState> {
    check_iters(iters)?;
    let eps = ctx.epsilon;
    let k = ctx.similarity;
    let (n, p) = k.dim();
    let log_a = ctx.a.mapv(f64::ln);
    let log_b = ctx.b.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(p);
    let mut buf = Vec::with_capacity(n.max(p));
    for _ in 0..iters {
        for i in 0..n {
            if ctx.a[i] == 0.0 {
                f[i] = f64::NEG_INFINITY;
                continue;
            }
            buf.clear();
            buf.extend((0..p).filter(|&j| ctx.b[j] > 0.0).map(|j| (k[[i, j]] + g[j]) / eps));
            f[i] = eps * (log_a[i] - logsumexp(&buf));
        }
        for j in 0..p {
            if ctx.b[j] == 0.0 {
                g[j] = f64::NEG_INFINITY;
                continue;
            }
            buf.clear();
            buf.extend((0..n).filter(|&i| ctx.a[i] > 0.0).map(|i| (k[[i, j]] + f[i]) / eps));
            g[j] = eps * (log_b[j] - logsumexp(&buf));
        }
    }
    if f.iter().chain(g.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("log-domain potentials"));
    }
    Ok(ScalingState { f, g })
}

fn plan_from_potentials(ctx: &CostContext<'_>, state: &ScalingState) -> Array2<f64> {
    let eps = ctx.epsilon;
    Array2::from_shape_fn(ctx.similarity.dim(), |(i, j)| {
        let (fi, gj) = (state.f[i], state.g[j]);
        if fi == f64::NEG_INFINITY || gj == f64::NEG_INFINITY {
            0.0
        } else {
            ((ctx.similarity[[i, j]] + fi + gj) / eps).exp()
        }
    })
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Uniform weights over the first `len` of `n_max` rows, exactly zero after.
pub fn masked_uniform(n_max: usize, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(n_max, |i| if i < len { 1.0 / len as f64 } else { 0.0 })
}

/// Solves a padded batch `[B × n_max × p]` of problems. Sample `s` uses the
/// uniform marginal over its first `lengths[s]` rows and zero weight on the
/// padding, so padded rows of its plan are exactly zero.
pub fn sinkhorn_batched(
    batch_k: ArrayView3<'_, f64>,
    lengths: &[usize],
    epsilon: f64,
    iters: usize,
    mode: SinkhornMode,
) -> Result<Vec<TransportPlan>> {
    let (bsz, n_max, p) = batch_k.dim();
    if lengths.len() != bsz {
        return Err(Error::DimensionMismatch(format!("{} lengths for a batch of {bsz}", lengths.len())));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > n_max) {
        return Err(Error::DimensionMismatch(format!("sample length {bad} outside 1..={n_max}")));
    }
    if p == 0 {
        return Err(Error::DimensionMismatch("reference has no supports".into()));
    }
    (0..bsz)
        .into_par_iter()
        .map(|s| {
            let k = batch_k.index_axis(Axis(0), s);
            let ctx =
                CostContext::new(k, epsilon, masked_uniform(n_max, lengths[s]), Array1::from_elem(p, 1.0 / p as f64))?;
            sinkhorn(&ctx, iters, mode)
        })
        .collect()
}

/// Exact ε = 0 transport between two uniform measures of equal size `n ≤ 8`.
///
/// With uniform square marginals an optimal plan is `(1/n) Π` for a
/// permutation matrix `Π`, so all `n!` permutations are enumerated. Among
/// minimizers the lexicographically smallest permutation is returned.
pub fn exact_ot_bruteforce(cost: ArrayView2<'_, f64>) -> Result<(Array2<f64>, f64)> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::DimensionMismatch(format!("cost must be square, got {n}x{m}")));
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if n > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge { n, limit: BRUTEFORCE_LIMIT });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.expect("at least one permutation");
    let w = 1.0 / n as f64;
    let mut plan = Array2::zeros((n, n));
    for (i, &j) in perm.iter().enumerate() {
        plan[[i, j]] = w;
    }
    Ok((plan, total * w))
}

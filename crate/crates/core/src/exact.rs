//! Exact small-scale kernel and distance computations.
//!
//! Two cost conventions coexist here and are kept apart by name:
//!
//! * embedding-style plans use the negated similarity `C = -κ`
//!   ([`k_ot`], [`k_z`], [`reference_plan`]);
//! * Wasserstein plans use the squared ground metric
//!   `d_κ²(x, y) = κ(x,x) + κ(y,y) − 2κ(x,y)` ([`w2_entropic`], [`w2_exact`],
//!   [`w2_surrogate`], [`verify_bounds`]).
//!
//! With uniform marginals the two give the same ε = 0 plans whenever
//! `κ(x, x)` is constant over each set's elements, but they differ for ε > 0.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::embed::{embed_set, position_matrix, ReferenceBank};
use crate::error::{Error, Result};
use crate::kernel::{kernel_eval, KernelSpec};
use crate::linalg::min_eigenvalue;
use crate::ot::{exact_ot_bruteforce, sinkhorn, CostContext, SinkhornMode};

/// Largest Gram matrix assembled by [`gram`].
pub const GRAM_LIMIT: usize = 2000;

/// Default Sinkhorn iterations for exact-kernel evaluations.
pub const DEFAULT_EXACT_ITERS: usize = 1000;

/// Slack allowed on every bound check.
pub const BOUND_SLACK: f64 = 1e-9;

/// Ground metric `d_κ` induced by a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundMetric {
    pub spec: KernelSpec,
}

impl GroundMetric {
    pub fn from_kernel(spec: KernelSpec) -> Self {
        Self { spec }
    }

    /// `d_κ²(x_i, y_j)`, clamped at zero.
    pub fn sq_dist(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let kxy = kernel_eval(&self.spec, x, y)?;
        let kxx: Vec<f64> = x.outer_iter().map(|r| self_kernel(&self.spec, r.dot(&r))).collect();
        let kyy: Vec<f64> = y.outer_iter().map(|r| self_kernel(&self.spec, r.dot(&r))).collect();
        Ok(Array2::from_shape_fn(kxy.dim(), |(i, j)| (kxx[i] + kyy[j] - 2.0 * kxy[[i, j]]).max(0.0)))
    }
}

fn self_kernel(spec: &KernelSpec, norm_sq: f64) -> f64 {
    match spec {
        KernelSpec::Gaussian { .. } => 1.0,
        KernelSpec::Linear => norm_sq,
    }
}

fn nonempty(x: ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    Ok(())
}

/// `K_OT(x, y) = Σ P_{ii'} κ(x_i, y_{i'})` with `P` the entropic plan for cost `−κ`.
pub fn k_ot(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &KernelSpec,
    epsilon: f64,
    iters: usize,
) -> Result<f64> {
    nonempty(x)?;
    nonempty(y)?;
    let k = kernel_eval(spec, x, y)?;
    let plan = sinkhorn(&CostContext::uniform(k.view(), epsilon)?, iters, SinkhornMode::LogDomain)?.plan;
    Ok((&plan * &k).sum())
}

/// Plan `P(x, z)` for cost `−κ(x, z)` using the bank's ε, iterations and
/// mode, with the positional factor applied when the bank carries one.
pub fn reference_plan(
    x: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    bank: &ReferenceBank,
    spec: &KernelSpec,
) -> Result<Array2<f64>> {
    nonempty(x)?;
    let k = kernel_eval(spec, x, z)?;
    let mut plan = sinkhorn(&CostContext::uniform(k.view(), bank.epsilon)?, bank.sinkhorn_iters, bank.mode)?.plan;
    if let Some(sigma) = bank.sigma_pos {
        plan *= &position_matrix(x.nrows(), z.nrows(), sigma);
    }
    Ok(plan)
}

/// `Σ_{ii'} (p · P_x P_yᵀ)_{ii'} κ(x_i, y_{i'})` for precomputed reference plans.
fn kz_from_plans(px: &Array2<f64>, py: &Array2<f64>, kxy: &Array2<f64>) -> f64 {
    let p = px.ncols() as f64;
    let glued = px.dot(&py.t()) * p;
    (&glued * kxy).sum()
}

/// `K_z(x, y)`; with `q > 1` references the mean over references.
pub fn k_z(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, bank: &ReferenceBank, spec: &KernelSpec) -> Result<f64> {
    nonempty(y)?;
    let kxy = kernel_eval(spec, x, y)?;
    let mut total = 0.0;
    for z in bank.refs() {
        let px = reference_plan(x, z.view(), bank, spec)?;
        let py = reference_plan(y, z.view(), bank, spec)?;
        total += kz_from_plans(&px, &py, &kxy);
    }
    Ok(total / bank.q() as f64)
}

fn w2_plan_entropic(cost: &Array2<f64>, epsilon: f64, iters: usize) -> Result<Array2<f64>> {
    let sim = -cost;
    Ok(sinkhorn(&CostContext::uniform(sim.view(), epsilon)?, iters, SinkhornMode::LogDomain)?.plan)
}

/// `⟨P, d_κ²⟩^{1/2}` with `P` the entropic plan for cost `d_κ²`.
pub fn w2_entropic(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    metric: &GroundMetric,
    epsilon: f64,
    iters: usize,
) -> Result<f64> {
    nonempty(x)?;
    nonempty(y)?;
    let cost = metric.sq_dist(x, y)?;
    let plan = w2_plan_entropic(&cost, epsilon, iters)?;
    Ok((&plan * &cost).sum().max(0.0).sqrt())
}

/// Exact W2 by permutation enumeration (`n = n' ≤ 8`).
pub fn w2_exact(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, metric: &GroundMetric) -> Result<f64> {
    nonempty(x)?;
    let cost = metric.sq_dist(x, y)?;
    let (_, obj) = exact_ot_bruteforce(cost.view())?;
    Ok(obj.max(0.0).sqrt())
}

/// How plans to the reference are obtained for [`w2_surrogate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanSource {
    /// ε = 0 by enumeration; needs `n = p ≤ 8`.
    Exact,
    Entropic {
        epsilon: f64,
        iters: usize,
    },
}

/// W2-convention plan between `x` and `z` (cost `d_κ²`).
pub fn w2_plan(
    x: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    metric: &GroundMetric,
    source: PlanSource,
) -> Result<Array2<f64>> {
    nonempty(x)?;
    let cost = metric.sq_dist(x, z)?;
    match source {
        PlanSource::Exact => Ok(exact_ot_bruteforce(cost.view())?.0),
        PlanSource::Entropic { epsilon, iters } => w2_plan_entropic(&cost, epsilon, iters),
    }
}

/// `W2^z(x, y) = ⟨p · P(x,z) P(y,z)ᵀ, d_κ²(x, y)⟩^{1/2}`.
pub fn w2_surrogate(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    metric: &GroundMetric,
    source: PlanSource,
) -> Result<f64> {
    let px = w2_plan(x, z, metric, source)?;
    let py = w2_plan(y, z, metric, source)?;
    let cost = metric.sq_dist(x, y)?;
    Ok(kz_from_plans(&px, &py, &cost).max(0.0).sqrt())
}

/// Outcome of the bound checks on one or more trials. Slack values are
/// `lhs − rhs`; a check fails when its slack exceeds [`BOUND_SLACK`].
#[derive(Debug, Clone, Default)]
pub struct BoundReport {
    pub trials: usize,
    pub pair_checks: usize,
    pub pair_violations: usize,
    pub pair_max_slack: f64,
    pub single_ref_checks: usize,
    pub single_ref_violations: usize,
    pub single_ref_max_slack: f64,
    pub multi_ref_checks: usize,
    pub multi_ref_violations: usize,
    pub multi_ref_max_slack: f64,
    /// Mean `‖P_z(x, x') − P(x, x')‖_F` over the pair checks (diagnostic only).
    pub mean_plan_gap: f64,
}

impl BoundReport {
    fn empty() -> Self {
        Self {
            pair_max_slack: f64::NEG_INFINITY,
            single_ref_max_slack: f64::NEG_INFINITY,
            multi_ref_max_slack: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> usize {
        self.pair_violations + self.single_ref_violations + self.multi_ref_violations
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    fn merge(&mut self, o: &BoundReport) {
        let total_pairs = self.pair_checks + o.pair_checks;
        if total_pairs > 0 {
            self.mean_plan_gap = (self.mean_plan_gap * self.pair_checks as f64
                + o.mean_plan_gap * o.pair_checks as f64)
                / total_pairs as f64;
        }
        self.trials += o.trials;
        self.pair_checks = total_pairs;
        self.pair_violations += o.pair_violations;
        self.pair_max_slack = self.pair_max_slack.max(o.pair_max_slack);
        self.single_ref_checks += o.single_ref_checks;
        self.single_ref_violations += o.single_ref_violations;
        self.single_ref_max_slack = self.single_ref_max_slack.max(o.single_ref_max_slack);
        self.multi_ref_checks += o.multi_ref_checks;
        self.multi_ref_violations += o.multi_ref_violations;
        self.multi_ref_max_slack = self.multi_ref_max_slack.max(o.multi_ref_max_slack);
    }
}

/// Checks, with ε = 0 plans, on `m` samples and `q` references:
///
/// * per pair and reference: `|W2 − W2^z| ≤ 2 min(W2(x,z), W2(x',z))`;
/// * per reference: `E² ≤ (4/m) Σ_i W2²(x^i, z)`;
/// * all references: `E² ≤ (4/(mq)) Σ_{i,j} W2²(x^i, z^j)` where the
///   multi-reference surrogate averages the squared single-reference ones.
pub fn verify_bounds(samples: &[Array2<f64>], refs: &[Array2<f64>], metric: &GroundMetric) -> Result<BoundReport> {
    let m = samples.len();
    let q = refs.len();
    if m == 0 || q == 0 {
        return Err(Error::InsufficientData("bound check needs samples and references".into()));
    }
    let n = samples[0].nrows();
    if n > crate::ot::BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge { n, limit: crate::ot::BRUTEFORCE_LIMIT });
    }
    if samples.iter().chain(refs).any(|s| s.nrows() != n) {
        return Err(Error::DimensionMismatch("oracle bound checks need n = n' = p for every set".into()));
    }
    let src = PlanSource::Exact;
    // plans[i][j] = P(x^i, z^j), w2_ref[i][j] = W2(x^i, z^j)
    let mut plans = vec![Vec::with_capacity(q); m];
    let mut w2_ref = vec![vec![0.0; q]; m];
    for i in 0..m {
        for (j, z) in refs.iter().enumerate() {
            let cost = metric.sq_dist(samples[i].view(), z.view())?;
            let plan = w2_plan(samples[i].view(), z.view(), metric, src)?;
            w2_ref[i][j] = (&plan * &cost).sum().max(0.0).sqrt();
            plans[i].push(plan);
        }
    }
    let mut report = BoundReport::empty();
    report.trials = 1;
    let mut single_err = vec![0.0; q];
    let mut multi_err = 0.0;
    let mut gap_total = 0.0;
    for a in 0..m {
        for b in 0..m {
            let cost = metric.sq_dist(samples[a].view(), samples[b].view())?;
            let (direct, obj) = exact_ot_bruteforce(cost.view())?;
            let w2 = obj.max(0.0).sqrt();
            let mut mean_sq = 0.0;
            for j in 0..q {
                let glued = plans[a][j].dot(&plans[b][j].t()) * n as f64;
                let wz = (&glued * &cost).sum().max(0.0).sqrt();
                let slack = (w2 - wz).abs() - 2.0 * w2_ref[a][j].min(w2_ref[b][j]);
                report.pair_checks += 1;
                report.pair_max_slack = report.pair_max_slack.max(slack);
                if slack > BOUND_SLACK {
                    report.pair_violations += 1;
                }
                gap_total += (&glued - &direct).iter().map(|v| v * v).sum::<f64>().sqrt();
                single_err[j] += (w2 - wz).powi(2);
                mean_sq += wz * wz;
            }
            let wmulti = (mean_sq / q as f64).sqrt();
            multi_err += (w2 - wmulti).powi(2);
        }
    }
    report.mean_plan_gap = gap_total / report.pair_checks as f64;
    let mf = m as f64;
    for (j, err) in single_err.iter().enumerate() {
        let lhs = err / (mf * mf);
        let rhs = 4.0 / mf * (0..m).map(|i| w2_ref[i][j].powi(2)).sum::<f64>();
        let slack = lhs - rhs;
        report.single_ref_checks += 1;
        report.single_ref_max_slack = report.single_ref_max_slack.max(slack);
        if slack > BOUND_SLACK {
            report.single_ref_violations += 1;
        }
    }
    let lhs = multi_err / (mf * mf);
    let rhs = 4.0 / (mf * q as f64) * w2_ref.iter().flatten().map(|w| w * w).sum::<f64>();
    let slack = lhs - rhs;
    report.multi_ref_checks = 1;
    report.multi_ref_max_slack = slack;
    if slack > BOUND_SLACK {
        report.multi_ref_violations = 1;
    }
    Ok(report)
}

/// Parameters for a randomized [`bound_sweep`].
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub trials: usize,
    pub m: usize,
    pub q: usize,
    /// Set size; also the number of supports per reference.
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

/// Runs [`verify_bounds`] on `trials` random instances with Gaussian points.
pub fn bound_sweep(cfg: SweepConfig, metric: &GroundMetric) -> Result<BoundReport> {
    let per_trial: Vec<BoundReport> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut draw = || Array2::from_shape_fn((cfg.n, cfg.d), |_| normal.sample(&mut rng));
            let samples: Vec<_> = (0..cfg.m).map(|_| draw()).collect();
            let refs: Vec<_> = (0..cfg.q).map(|_| draw()).collect();
            verify_bounds(&samples, &refs, metric)
        })
        .collect::<Result<_>>()?;
    let mut out = BoundReport::empty();
    for r in &per_trial {
        out.merge(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramKind {
    KOt,
    KZ,
    MeanPool,
    /// Linear kernel on row-major flattened sets (equal lengths only).
    Flatten,
}

impl GramKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::KOt => "k_ot",
            Self::KZ => "k_z",
            Self::MeanPool => "mean_pool",
            Self::Flatten => "flatten",
        }
    }
}

impl std::str::FromStr for GramKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_ot" => Ok(Self::KOt),
            "k_z" => Ok(Self::KZ),
            "mean_pool" => Ok(Self::MeanPool),
            "flatten" => Ok(Self::Flatten),
            other => Err(Error::InvalidParameter(format!("unknown gram kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GramParams {
    pub spec: KernelSpec,
    pub epsilon: f64,
    pub iters: usize,
    /// References for [`GramKind::KZ`].
    pub bank: Option<ReferenceBank>,
}

#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: Array2<f64>,
    pub kind: GramKind,
    /// Sinkhorn solves between two distinct input sets.
    pub cross_solves: usize,
    /// All Sinkhorn solves performed.
    pub total_solves: usize,
}

impl GramMatrix {
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self.values.view())
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }

    /// Plain-text CSV preceded by `# kind=<..> m=<..> epsilon=<..>`.
    pub fn write_csv<W: Write>(&self, epsilon: f64, mut w: W) -> Result<()> {
        let m = self.values.nrows();
        writeln!(w, "# kind={} m={} epsilon={}", self.kind.name(), m, epsilon)?;
        for row in self.values.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairwise kernel values over `sets`. For `K_z` the plans to the
/// references are computed once per set, so the number of solves is linear
/// in `m`; `K_OT` needs one solve per pair.
pub fn gram(sets: &[ArrayView2<'_, f64>], kind: GramKind, params: &GramParams) -> Result<GramMatrix> {
    let m = sets.len();
    if m > GRAM_LIMIT {
        return Err(Error::TooLarge { n: m, limit: GRAM_LIMIT });
    }
    for s in sets {
        nonempty(*s)?;
    }
    let solves = AtomicUsize::new(0);
    let cross = AtomicUsize::new(0);
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
    let spec = params.spec;
    let values: Vec<f64> = match kind {
        GramKind::KOt => pairs
            .par_iter()
            .map(|&(i, j)| {
                solves.fetch_add(1, Ordering::Relaxed);
                if i != j {
                    cross.fetch_add(1, Ordering::Relaxed);
                }
                k_ot(sets[i], sets[j], &spec, params.epsilon, params.iters)
            })
            .collect::<Result<_>>()?,
        GramKind::KZ => {
            let bank = params
                .bank
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("k_z gram needs a reference bank".into()))?;
            if spec == KernelSpec::Linear {
                let embs: Vec<_> = sets
                    .par_iter()
                    .map(|s| {
                        solves.fetch_add(bank.q(), Ordering::Relaxed);
                        embed_set(*s, bank)
                    })
                    .collect::<Result<_>>()?;
                pairs.iter().map(|&(i, j)| embs[i].dot(&embs[j])).collect()
            } else {
                let plans: Vec<Vec<Array2<f64>>> = sets
                    .par_iter()
                    .map(|s| {
                        bank.refs()
                            .iter()
                            .map(|z| {
                                solves.fetch_add(1, Ordering::Relaxed);
                                reference_plan(*s, z.view(), bank, &spec)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                pairs
                    .par_iter()
                    .map(|&(i, j)| {
                        let kxy = kernel_eval(&spec, sets[i], sets[j])?;
                        let total: f64 = (0..bank.q()).map(|r| kz_from_plans(&plans[i][r], &plans[j][r], &kxy)).sum();
                        Ok(total / bank.q() as f64)
                    })
                    .collect::<Result<_>>()?
            }
        }
        GramKind::MeanPool => pairs
            .par_iter()
            .map(|&(i, j)| Ok(kernel_eval(&spec, sets[i], sets[j])?.mean().unwrap_or(0.0)))
            .collect::<Result<_>>()?,
        GramKind::Flatten => {
            let n = sets[0].nrows();
            if sets.iter().any(|s| s.nrows() != n) {
                return Err(Error::DimensionMismatch("flatten gram needs equal set lengths".into()));
            }
            pairs.iter().map(|&(i, j)| sets[i].iter().zip(sets[j].iter()).map(|(a, b)| a * b).sum()).collect()
        }
    };
    let mut out = Array2::zeros((m, m));
    for (&(i, j), v) in pairs.iter().zip(values) {
        out[[i, j]] = v;
        out[[j, i]] = v;
    }
    Ok(GramMatrix { values: out, kind, cross_solves: cross.into_inner(), total_solves: solves.into_inner() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(rng))
    }

    fn gaussian() -> KernelSpec {
        KernelSpec::gaussian(1.0).unwrap()
    }

    #[test]
    fn k_ot_examples() {
        let x = array![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
        let v = k_ot(x.view(), x.view(), &gaussian(), 0.01, 500).unwrap();
        assert!((v - 1.0).abs() < 1e-2);
        let a = array![[0.2, 0.1]];
        let b = array![[-0.5, 1.0]];
        let v = k_ot(a.view(), b.view(), &gaussian(), 0.5, 10).unwrap();
        assert_eq!(v, kernel_eval(&gaussian(), a.view(), b.view()).unwrap()[[0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (random(&mut rng, 4, 2), random(&mut rng, 5, 2));
        let mean = kernel_eval(&gaussian(), x.view(), y.view()).unwrap().mean().unwrap();
        let v = k_ot(x.view(), y.view(), &gaussian(), 100.0, 100).unwrap();
        assert!((v - mean).abs() < 1e-3);
    }

    #[test]
    fn k_z_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (random(&mut rng, 4, 3), random(&mut rng, 6, 3));
        let bank = ReferenceBank::new(vec![random(&mut rng, 3, 3)], 0.5, 100).unwrap();
        let kxx = k_z(x.view(), x.view(), &bank, &gaussian()).unwrap();
        assert!(kxx >= 0.0);
        let lin = k_z(x.view(), y.view(), &bank, &KernelSpec::Linear).unwrap();
        let phi = embed_set(x.view(), &bank).unwrap().dot(&embed_set(y.view(), &bank).unwrap());
        assert!((lin - phi).abs() <= 1e-10 * phi.abs().max(1.0));
        let single = ReferenceBank::new(vec![random(&mut rng, 1, 3)], 0.5, 10).unwrap();
        let v = k_z(x.view(), y.view(), &single, &gaussian()).unwrap();
        let mean = kernel_eval(&gaussian(), x.view(), y.view()).unwrap().mean().unwrap();
        assert!((v - mean).abs() < 1e-14);
    }

    #[test]
    fn w2_examples() {
        let metric = GroundMetric::from_kernel(KernelSpec::Linear);
        let x = array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let w = w2_entropic(x.view(), x.view(), &metric, 0.01, 500).unwrap();
        assert!(w <= 0.05 * 8f64.sqrt());
        assert_eq!(w2_exact(x.view(), x.view(), &metric).unwrap(), 0.0);
        let a = array![[1.0, 2.0]];
        let b = array![[4.0, 6.0]];
        assert!((w2_entropic(a.view(), b.view(), &metric, 0.1, 5).unwrap() - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (random(&mut rng, 4, 2), random(&mut rng, 6, 2));
        let g = GroundMetric::from_kernel(gaussian());
        let xy = w2_entropic(x.view(), y.view(), &g, 0.1, 200).unwrap();
        let yx = w2_entropic(y.view(), x.view(), &g, 0.1, 200).unwrap();
        assert!((xy - yx).abs() < 1e-12);
    }

    #[test]
    fn surrogate_examples() {
        let metric = GroundMetric::from_kernel(gaussian());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 2);
        let y = random(&mut rng, 4, 2);
        let wz = w2_surrogate(x.view(), y.view(), x.view(), &metric, PlanSource::Exact).unwrap();
        let w = w2_exact(x.view(), y.view(), &metric).unwrap();
        assert!((wz - w).abs() < 1e-12);
        let z = random(&mut rng, 4, 2);
        let wzz = w2_surrogate(x.view(), x.view(), z.view(), &metric, PlanSource::Exact).unwrap();
        assert!(wzz >= 0.0);
        assert!(wzz <= 2.0 * w2_exact(x.view(), z.view(), &metric).unwrap() + 1e-12);
    }

    #[test]
    fn lemma_bound_on_random_instances() {
        let metric = GroundMetric::from_kernel(gaussian());
        let cfg = SweepConfig { trials: 10, m: 3, q: 2, n: 4, d: 2, seed: 7 };
        let r = bound_sweep(cfg, &metric).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.pair_checks, 10 * 9 * 2);
    }

    #[test]
    fn bound_special_cases() {
        let metric = GroundMetric::from_kernel(KernelSpec::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..3).map(|_| random(&mut rng, 3, 2)).collect();
        let r = verify_bounds(&samples, &[samples[0].clone()], &metric).unwrap();
        assert!(r.passed());
        let same = vec![samples[1].clone(); 3];
        let r = verify_bounds(&same, &[samples[2].clone()], &metric).unwrap();
        assert!(r.passed());
        assert!(r.single_ref_max_slack <= 0.0);
        let big: Vec<_> = (0..2).map(|_| random(&mut rng, 9, 2)).collect();
        assert!(matches!(verify_bounds(&big, &big, &metric), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn gram_shapes_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let owned: Vec<_> = (0..6).map(|i| random(&mut rng, 3 + i % 3, 3)).collect();
        let sets: Vec<_> = owned.iter().map(|s| s.view()).collect();
        let bank = ReferenceBank::new(vec![random(&mut rng, 4, 3)], 0.5, 50).unwrap();
        let params = GramParams { spec: KernelSpec::Linear, epsilon: 0.5, iters: 50, bank: Some(bank) };
        let kz = gram(&sets, GramKind::KZ, &params).unwrap();
        assert_eq!(kz.total_solves, 6);
        assert!(kz.min_eigenvalue() >= -1e-8 * kz.trace() / 6.0);
        let kot = gram(&sets, GramKind::KOt, &params).unwrap();
        assert_eq!(kot.cross_solves, 15);
        assert_eq!(kot.total_solves, 21);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(kot.values[[i, j]], kot.values[[j, i]]);
            }
        }
        let one = gram(&sets[..1], GramKind::MeanPool, &params).unwrap();
        assert_eq!(one.values.dim(), (1, 1));
        let dup = vec![sets[0], sets[1], sets[0]];
        let g = gram(&dup, GramKind::KZ, &params).unwrap();
        assert_eq!(g.values.row(0), g.values.row(2));
        assert!(gram(&sets, GramKind::Flatten, &params).is_err());
        let mut csv = Vec::new();
        one.write_csv(0.5, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# kind=mean_pool m=1 epsilon=0.5\n"));
    }

    #[test]
    fn gaussian_kz_gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let owned: Vec<_> = (0..12).map(|i| random(&mut rng, 2 + i % 4, 2)).collect();
        let sets: Vec<_> = owned.iter().map(|s| s.view()).collect();
        let bank = ReferenceBank::new(vec![random(&mut rng, 3, 2)], 0.3, 100).unwrap();
        let params = GramParams { spec: gaussian(), epsilon: 0.3, iters: 100, bank: Some(bank) };
        let g = gram(&sets, GramKind::KZ, &params).unwrap();
        assert_eq!(g.total_solves, 12);
        assert!(g.min_eigenvalue() >= -1e-8 * g.trace() / 12.0);
    }
}

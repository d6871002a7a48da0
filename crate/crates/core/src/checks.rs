//! Self-check suites shared by `otke check` and the acceptance tests.
//!
//! Each suite draws its own seeded random instances and reports one
//! `key=value` summary line.

use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{grad_check, toy_problem, Block};
use crate::embed::{embed_set, ReferenceBank};
use crate::error::{Error, Result};
use crate::exact::{bound_sweep, gram, k_z, GramKind, GramParams, GroundMetric, SweepConfig};
use crate::kernel::KernelSpec;
use crate::ot::{sinkhorn, CostContext, SinkhornMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Marginals,
    Kernel,
    /// Distance bound through a reference; `lemma1` on the command line.
    Bound,
    GradCheck,
    Psd,
    MultiRef,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Marginals, Suite::Kernel, Suite::Bound, Suite::GradCheck, Suite::Psd, Suite::MultiRef];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Marginals => "marginals",
            Suite::Kernel => "kernel",
            Suite::Bound => "lemma1",
            Suite::GradCheck => "gradcheck",
            Suite::Psd => "psd",
            Suite::MultiRef => "multiref",
        }
    }

    /// Trial count used when none is given.
    pub fn default_trials(&self) -> usize {
        match self {
            Suite::Marginals => 200,
            Suite::Kernel => 100,
            Suite::Bound => 100,
            Suite::GradCheck => 50,
            Suite::Psd => 50,
            Suite::MultiRef => 50,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    /// `key=value` pairs describing what was measured.
    pub detail: Vec<(String, String)>,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} suite={}", if self.passed { "PASS" } else { "FAIL" }, self.suite.name())?;
        for (k, v) in &self.detail {
            write!(f, " {k}={v}")?;
        }
        write!(f, " seconds={:.2}", self.seconds)
    }
}

fn kv(k: &str, v: impl fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, sd: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    Array2::from_shape_fn((r, c), |_| normal.sample(rng))
}

fn trial_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(t as u64))
}

/// Runs one suite with `trials` random instances (the grad-check suite reads
/// it as coordinates per parameter block).
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let (passed, detail) = match suite {
        Suite::Marginals => marginals(trials, seed)?,
        Suite::Kernel => kernel_identity(trials, seed)?,
        Suite::Bound => reference_bound(trials, seed)?,
        Suite::GradCheck => gradcheck(trials, seed)?,
        Suite::Psd => psd(trials, seed)?,
        Suite::MultiRef => multiref(trials, seed)?,
    };
    Ok(SuiteReport { suite, passed, detail, seconds: start.elapsed().as_secs_f64() })
}

type Outcome = Result<(bool, Vec<(String, String)>)>;

/// Random Sinkhorn instances with similarities in `[0, 1]`: marginal residuals after 100 iterations and
/// agreement of the two arithmetic modes.
fn marginals(trials: usize, seed: u64) -> Outcome {
    const EPS: [f64; 3] = [0.1, 0.5, 1.0];
    let results: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let n = rng.random_range(1..=50);
            let p = rng.random_range(1..=20);
            let eps = EPS[t % EPS.len()];
            let k = Array2::from_shape_simple_fn((n, p), || rng.random::<f64>());
            let ctx = CostContext::uniform(k.view(), eps)?;
            let log = sinkhorn(&ctx, 100, SinkhornMode::LogDomain)?;
            let std = sinkhorn(&ctx, 100, SinkhornMode::Standard)?;
            let resid = log.row_residual(ctx.a()).max(log.col_residual(ctx.b()));
            let diff = (&log.plan - &std.plan).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok((resid, diff))
        })
        .collect::<Result<_>>()?;
    let max_resid = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let max_diff = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok((
        max_resid <= 1e-6 && max_diff <= 1e-10,
        vec![kv("instances", trials), kv("max_residual", sci(max_resid)), kv("max_mode_gap", sci(max_diff))],
    ))
}

/// `⟨Φ_z(x), Φ_z(x')⟩` against the directly computed `K_z(x, x')` (linear
/// kernel on ψ-features), relative error.
fn kernel_identity(trials: usize, seed: u64) -> Outcome {
    let errs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let k = rng.random_range(2..=8);
            let p = rng.random_range(1..=6);
            let (nx, ny) = (rng.random_range(1..=12), rng.random_range(1..=12));
            let x = gaussian_matrix(&mut rng, nx, k, 1.0);
            let y = gaussian_matrix(&mut rng, ny, k, 1.0);
            let z = gaussian_matrix(&mut rng, p, k, 1.0);
            let bank = ReferenceBank::new(vec![z], 0.5, 50)?;
            let lhs = embed_set(x.view(), &bank)?.dot(&embed_set(y.view(), &bank)?);
            let rhs = k_z(x.view(), y.view(), &bank, &KernelSpec::Linear)?;
            Ok((lhs - rhs).abs() / rhs.abs().max(1e-300).max(lhs.abs()))
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok((worst <= 1e-10, vec![kv("triples", trials), kv("max_rel_error", sci(worst))]))
}

/// Oracle-mode bound checks with ε = 0 plans: `trials` pair instances with
/// `n = n' = p` cycling over 2..=6, then 20 instances each with `m = 4` for
/// `q = 1` and `q = 2`.
fn reference_bound(trials: usize, seed: u64) -> Outcome {
    let metric = GroundMetric::from_kernel(KernelSpec::gaussian(1.0)?);
    let mut pair_violations = 0;
    let mut pair_slack = f64::NEG_INFINITY;
    let sizes = [2usize, 3, 4, 5, 6];
    for (i, &n) in sizes.iter().enumerate() {
        let count = trials / sizes.len() + usize::from(i < trials % sizes.len());
        if count == 0 {
            continue;
        }
        let r = bound_sweep(SweepConfig { trials: count, m: 2, q: 1, n, d: 3, seed: seed + n as u64 }, &metric)?;
        pair_violations += r.violations();
        pair_slack = pair_slack.max(r.pair_max_slack);
    }
    let mut set_violations = 0;
    let mut set_slack = f64::NEG_INFINITY;
    for q in [1, 2] {
        let r = bound_sweep(SweepConfig { trials: 20, m: 4, q, n: 4, d: 3, seed: seed + 100 + q as u64 }, &metric)?;
        set_violations += r.violations();
        set_slack = set_slack.max(r.single_ref_max_slack).max(r.multi_ref_max_slack).max(r.pair_max_slack);
    }
    Ok((
        pair_violations == 0 && set_violations == 0,
        vec![
            kv("pair_trials", trials),
            kv("pair_violations", pair_violations),
            kv("pair_max_slack", sci(pair_slack)),
            kv("set_trials", 40),
            kv("set_violations", set_violations),
            kv("set_max_slack", sci(set_slack)),
        ],
    ))
}

/// Seed-42 toy graph, ε = 1, 10 unrolled iterations, central differences
/// with `h = 1e-5` on `coords` coordinates per block.
fn gradcheck(coords: usize, seed: u64) -> Outcome {
    let (batch, nys, bank, cls) = toy_problem(1.0, 10, SinkhornMode::LogDomain)?;
    let report = grad_check(&batch, &nys, &bank, &cls, &Block::ALL, 1e-5, coords, seed)?;
    let (_, _, std_bank, _) = toy_problem(1.0, 10, SinkhornMode::Standard)?;
    let std_report = grad_check(&batch, &nys, &std_bank, &cls, &Block::ALL, 1e-5, coords, seed)?;
    let worst = report.max_rel_error().max(std_report.max_rel_error());
    let mut detail = vec![kv("coords_per_block", coords), kv("max_rel_error", sci(worst))];
    for (block, err, _) in &report.per_block {
        detail.push(kv(block.name(), sci(*err)));
    }
    Ok((worst <= 1e-4, detail))
}

/// `K_z` Gram matrix on `m` random sets: PSD up to `1e-8 · trace / m`, and
/// the number of transport solves (`m` for `K_z`, `m(m−1)/2` cross-set
/// solves for `K_OT`).
fn psd(m: usize, seed: u64) -> Outcome {
    let mut rng = trial_rng(seed, 0);
    let d = 4;
    let sets: Vec<Array2<f64>> = (0..m)
        .map(|_| {
            let n = rng.random_range(3..=10);
            gaussian_matrix(&mut rng, n, d, 1.0)
        })
        .collect();
    let views: Vec<ArrayView2<'_, f64>> = sets.iter().map(|s| s.view()).collect();
    let spec = KernelSpec::gaussian(1.0)?;
    let bank = ReferenceBank::new(vec![gaussian_matrix(&mut rng, 5, d, 1.0)], 0.5, 100)?;
    let params = GramParams { spec, epsilon: 0.5, iters: 100, bank: Some(bank) };
    let kz = gram(&views, GramKind::KZ, &params)?;
    let kot = gram(&views, GramKind::KOt, &params)?;
    let min_eig = kz.min_eigenvalue();
    let floor = -1e-8 * kz.trace() / m as f64;
    let counts_ok = kz.total_solves == m && kot.cross_solves == m * m.saturating_sub(1) / 2;
    Ok((
        min_eig >= floor && counts_ok,
        vec![
            kv("m", m),
            kv("kz_min_eig", sci(min_eig)),
            kv("floor", sci(floor)),
            kv("kz_solves", kz.total_solves),
            kv("kot_cross_solves", kot.cross_solves),
            kv("kot_min_eig", sci(kot.min_eigenvalue())),
        ],
    ))
}

/// Multi-reference energy split, permutation invariance without positional
/// encoding, and the `σ_pos → ∞` limit.
fn multiref(trials: usize, seed: u64) -> Outcome {
    let results: Vec<(f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let k = rng.random_range(2..=6);
            let p = rng.random_range(2..=6);
            let q = rng.random_range(2..=4);
            let n = rng.random_range(2..=15);
            let x = gaussian_matrix(&mut rng, n, k, 1.0);
            let refs: Vec<Array2<f64>> = (0..q).map(|_| gaussian_matrix(&mut rng, p, k, 1.0)).collect();
            let bank = ReferenceBank::new(refs.clone(), 0.5, 100)?;
            let whole = embed_set(x.view(), &bank)?.norm_sq();
            let parts: f64 = refs
                .iter()
                .map(|z| Ok(embed_set(x.view(), &ReferenceBank::new(vec![z.clone()], 0.5, 100)?)?.norm_sq()))
                .sum::<Result<f64>>()?;
            let energy = (whole - parts / q as f64).abs() / whole.max(1e-300);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(rng.random_range(0..n));
            let xp = x.select(Axis(0), &perm);
            let a = embed_set(x.view(), &bank)?.values;
            let b = embed_set(xp.view(), &bank)?.values;
            let perm_gap = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));

            let far = bank.clone().with_positional(Some(1e6))?;
            let c = embed_set(x.view(), &far)?.values;
            let pe_gap = (&a - &c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok((energy, perm_gap, pe_gap))
        })
        .collect::<Result<_>>()?;
    let energy = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let perm = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pe = results.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok((
        energy <= 1e-12 && perm <= 1e-12 && pe <= 1e-8,
        vec![kv("trials", trials), kv("energy_gap", sci(energy)), kv("perm_gap", sci(perm)), kv("pe_gap", sci(pe))],
    ))
}

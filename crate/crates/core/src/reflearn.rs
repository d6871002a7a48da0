//! Unsupervised learning of the reference bank.
//!
//! All distances here are squared Euclidean between ψ-features and
//! reference supports, `‖ψ(x_i) − z_j‖²`; transport plans for them use that
//! cost. The embedding path uses the negated inner product instead.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{self, canonical_order};
use crate::embed::ReferenceBank;
use crate::error::{Error, Result};
use crate::ot::{sinkhorn, CostContext, SinkhornMode};

/// Inner Sinkhorn iterations for barycenter and assignment plans.
pub const DEFAULT_INNER_ITERS: usize = 100;
pub const DEFAULT_OUTER_ITERS: usize = 10;
/// Feature rows used for K-means; larger pools are subsampled.
pub const DEFAULT_POOL_LIMIT: usize = 50_000;

fn sq_euclid(x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Array2<f64> {
    let xn: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let zn: Vec<f64> = z.outer_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&z.t());
    Array2::from_shape_fn(g.dim(), |(i, j)| (xn[i] + zn[j] - 2.0 * g[[i, j]]).max(0.0))
}

/// Entropic plan between a set and a centroid for cost `‖x_i − z_j‖²`.
fn w2_plan(
    x: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    epsilon: f64,
    iters: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let cost = sq_euclid(x, z);
    let sim = -&cost;
    let plan = sinkhorn(&CostContext::uniform(sim.view(), epsilon)?, iters, SinkhornMode::LogDomain)?.plan;
    Ok((plan, cost))
}

/// `⟨P, C⟩ + ε Σ P (log P − 1)`: the quantity Sinkhorn minimizes.
fn entropic_value(plan: &Array2<f64>, cost: &Array2<f64>, epsilon: f64) -> f64 {
    plan.iter().zip(cost.iter()).map(|(&p, &c)| if p > 0.0 { p * c + epsilon * p * (p.ln() - 1.0) } else { 0.0 }).sum()
}

#[derive(Debug, Clone)]
pub struct BarycenterProblem<'a> {
    pub member_sets: Vec<ArrayView2<'a, f64>>,
    pub p: usize,
    pub epsilon: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
}

impl BarycenterProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        let Some(first) = self.member_sets.first() else {
            return Err(Error::InsufficientData("no member sets".into()));
        };
        let k = first.ncols();
        if self.member_sets.iter().any(|s| s.nrows() == 0) {
            return Err(Error::EmptySet);
        }
        if self.member_sets.iter().any(|s| s.ncols() != k) {
            return Err(Error::DimensionMismatch("member sets differ in width".into()));
        }
        Ok(())
    }
}

/// Settings shared by the two fitting routines.
#[derive(Debug, Clone, Copy)]
pub struct RefFitConfig {
    pub p: usize,
    pub q: usize,
    /// ε and iterations stored in the returned bank.
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    /// ε and iterations for the W2 assignment plans.
    pub assign_epsilon: f64,
    pub assign_iters: usize,
    pub pool_limit: usize,
    pub seed: u64,
}

impl RefFitConfig {
    pub fn new(p: usize, q: usize, epsilon: f64, sinkhorn_iters: usize, seed: u64) -> Self {
        Self {
            p,
            q,
            epsilon,
            sinkhorn_iters,
            assign_epsilon: epsilon,
            assign_iters: DEFAULT_INNER_ITERS,
            pool_limit: DEFAULT_POOL_LIMIT,
            seed,
        }
    }
}

fn stack(sets: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    let total: usize = sets.iter().map(|s| s.nrows()).sum();
    let k = sets.first().map_or(0, |s| s.ncols());
    let mut out = Array2::zeros((total, k));
    let mut r = 0;
    for s in sets {
        out.slice_mut(s![r..r + s.nrows(), ..]).assign(s);
        r += s.nrows();
    }
    out
}

fn subsample<R: Rng>(pool: Array2<f64>, limit: usize, rng: &mut R) -> Array2<f64> {
    if pool.nrows() <= limit {
        return pool;
    }
    let mut idx = sample(rng, pool.nrows(), limit).into_vec();
    idx.sort_unstable();
    pool.select(Axis(0), &idx)
}

fn kmeans_centroids<R: Rng>(points: ArrayView2<'_, f64>, p: usize, rng: &mut R) -> Result<Array2<f64>> {
    Ok(canonical_order(&cluster::kmeans(points, p, cluster::DEFAULT_MAX_ITERS, rng)?.centroids))
}

/// Initial centroid from one member set: its own K-means if it has at
/// least `p` rows, otherwise K-means on the shared pool.
fn centroid_from_member<R: Rng>(
    member: ArrayView2<'_, f64>,
    pool: &Array2<f64>,
    p: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if member.nrows() >= p {
        kmeans_centroids(member, p, rng)
    } else {
        kmeans_centroids(pool.view(), p, rng)
    }
}

/// Entropic value of one solve and its plan.
type ValuePlan = (f64, Array2<f64>);

/// Entropic values and plans of every set against every centroid.
fn all_plans(
    sets: &[ArrayView2<'_, f64>],
    centroids: &[Array2<f64>],
    epsilon: f64,
    iters: usize,
) -> Result<Vec<Vec<ValuePlan>>> {
    sets.par_iter()
        .map(|x| {
            centroids
                .iter()
                .map(|z| {
                    let (plan, cost) = w2_plan(*x, z.view(), epsilon, iters)?;
                    Ok((entropic_value(&plan, &cost, epsilon), plan))
                })
                .collect()
        })
        .collect()
}

/// k-means++ over sets: the first centroid comes from a uniformly chosen
/// set, later ones from sets drawn proportionally to their entropic W2² to
/// the nearest existing centroid.
fn seed_centroids<R: Rng>(
    sets: &[ArrayView2<'_, f64>],
    pool: &Array2<f64>,
    p: usize,
    q: usize,
    epsilon: f64,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let m = sets.len();
    let mut centroids = vec![centroid_from_member(sets[rng.random_range(0..m)], pool, p, rng)?];
    while centroids.len() < q {
        let last = centroids.last().expect("nonempty").clone();
        let d: Vec<f64> = all_plans(sets, std::slice::from_ref(&last), epsilon, iters)?
            .into_iter()
            .map(|v| v[0].0.max(0.0))
            .collect();
        let nearest: Vec<f64> = if centroids.len() == 1 {
            d
        } else {
            let prev = all_plans(sets, &centroids[..centroids.len() - 1], epsilon, iters)?;
            d.iter().zip(prev).map(|(&dl, row)| row.iter().map(|(v, _)| v.max(0.0)).fold(dl, f64::min)).collect()
        };
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            nearest
                .iter()
                .position(|&w| {
                    if t < w {
                        true
                    } else {
                        t -= w;
                        false
                    }
                })
                .unwrap_or(m - 1)
        } else {
            rng.random_range(0..m)
        };
        centroids.push(centroid_from_member(sets[pick], pool, p, rng)?);
    }
    Ok(centroids)
}

fn assign(values: &[Vec<(f64, Array2<f64>)>]) -> Vec<usize> {
    values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (c, (v, _))| if *v < best.1 { (c, *v) } else { best })
                .0
        })
        .collect()
}

/// K-means references over pooled ψ-features.
///
/// With `q = 1` the `p` centroids of the whole pool form the reference. With
/// `q > 1` the sets are first split into `q` groups by one round of
/// nearest-centroid W2 assignment, then each group gets its own K-means.
pub fn fit_refs_kmeans(sets: &[ArrayView2<'_, f64>], cfg: &RefFitConfig) -> Result<ReferenceBank> {
    if cfg.p == 0 || cfg.q == 0 {
        return Err(Error::InvalidParameter("p and q must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = stack(sets);
    if pool.nrows() < cfg.p * cfg.q {
        return Err(Error::InsufficientData(format!(
            "{} feature vectors for {} x {} reference supports",
            pool.nrows(),
            cfg.q,
            cfg.p
        )));
    }
    let pool = subsample(pool, cfg.pool_limit, &mut rng);
    let refs = if cfg.q == 1 {
        vec![kmeans_centroids(pool.view(), cfg.p, &mut rng)?]
    } else {
        let centroids = seed_centroids(sets, &pool, cfg.p, cfg.q, cfg.assign_epsilon, cfg.assign_iters, &mut rng)?;
        let labels = assign(&all_plans(sets, &centroids, cfg.assign_epsilon, cfg.assign_iters)?);
        (0..cfg.q)
            .map(|c| {
                let members: Vec<ArrayView2<'_, f64>> =
                    sets.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(s, _)| *s).collect();
                let group = stack(&members);
                if group.nrows() >= cfg.p {
                    let group = subsample(group, cfg.pool_limit, &mut rng);
                    kmeans_centroids(group.view(), cfg.p, &mut rng)
                } else {
                    kmeans_centroids(pool.view(), cfg.p, &mut rng)
                }
            })
            .collect::<Result<Vec<_>>>()?
    };
    ReferenceBank::new(refs, cfg.epsilon, cfg.sinkhorn_iters)
}

/// Result of 2-Wasserstein K-means.
#[derive(Debug, Clone)]
pub struct WassersteinKMeans {
    pub refs: Vec<Array2<f64>>,
    pub assignments: Vec<usize>,
    /// Σ_i entropic W2²(x^i, z_{c(i)}) at the start of every round and after the last.
    pub objective_trace: Vec<f64>,
}

impl WassersteinKMeans {
    pub fn into_bank(self, epsilon: f64, sinkhorn_iters: usize) -> Result<ReferenceBank> {
        ReferenceBank::new(self.refs, epsilon, sinkhorn_iters)
    }
}

/// Alternates W2 assignment of member sets to `q` centroid sets and
/// free-support barycenter updates
/// `z_k ← Σ_i Σ_j P^i_{jk} x^i_j / Σ_i Σ_j P^i_{jk}`.
///
/// An emptied cluster is re-seeded from the member of the largest cluster
/// that is farthest from its centroid.
pub fn fit_refs_wasserstein(problem: &BarycenterProblem<'_>, q: usize, seed: u64) -> Result<WassersteinKMeans> {
    problem.validate()?;
    let sets = &problem.member_sets;
    let m = sets.len();
    if q == 0 || q > m {
        return Err(Error::InsufficientData(format!("{m} member sets for {q} clusters")));
    }
    let (eps, iters, p) = (problem.epsilon, problem.inner_iters, problem.p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = subsample(stack(sets), DEFAULT_POOL_LIMIT, &mut rng);
    if pool.nrows() < p {
        return Err(Error::InsufficientData(format!("{} feature vectors for {p} supports", pool.nrows())));
    }
    let mut centroids = seed_centroids(sets, &pool, p, q, eps, iters, &mut rng)?;
    let mut trace = Vec::with_capacity(problem.outer_iters + 1);
    let mut labels = vec![0; m];
    for _ in 0..problem.outer_iters {
        let mut values = all_plans(sets, &centroids, eps, iters)?;
        labels = assign(&values);
        trace.push(labels.iter().enumerate().map(|(i, &c)| values[i][c].0).sum());
        for c in 0..q {
            if labels.contains(&c) {
                continue;
            }
            let mut sizes = vec![0usize; q];
            for &l in &labels {
                sizes[l] += 1;
            }
            let largest = (0..q).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).expect("q > 0");
            let far = (0..m)
                .filter(|&i| labels[i] == largest)
                .max_by(|&a, &b| values[a][largest].0.total_cmp(&values[b][largest].0))
                .expect("largest cluster nonempty");
            labels[far] = c;
            centroids[c] = centroid_from_member(sets[far], &pool, p, &mut rng)?;
            let (plan, cost) = w2_plan(sets[far], centroids[c].view(), eps, iters)?;
            values[far][c] = (entropic_value(&plan, &cost, eps), plan);
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let k = centroid.ncols();
            let mut num = Array2::<f64>::zeros((p, k));
            let mut mass = Array1::<f64>::zeros(p);
            for i in (0..m).filter(|&i| labels[i] == c) {
                let plan = &values[i][c].1;
                num += &plan.t().dot(&sets[i]);
                mass += &plan.sum_axis(Axis(0));
            }
            for (mut row, &w) in num.outer_iter_mut().zip(mass.iter()) {
                if w > 0.0 {
                    row /= w;
                }
            }
            for (j, &w) in mass.iter().enumerate() {
                if w > 0.0 {
                    centroid.row_mut(j).assign(&num.row(j));
                }
            }
        }
    }
    let values = all_plans(sets, &centroids, eps, iters)?;
    if problem.outer_iters == 0 {
        labels = assign(&values);
    }
    trace.push(labels.iter().enumerate().map(|(i, &c)| values[i][c].0).sum());
    Ok(WassersteinKMeans { refs: centroids, assignments: labels, objective_trace: trace })
}

/// `(1/m) Σ_i ⟨P(x^i, z), ‖x^i − z‖²⟩` for each reference in `refs`.
pub fn barycenter_objective(
    refs: &[Array2<f64>],
    member_sets: &[ArrayView2<'_, f64>],
    epsilon: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    if member_sets.is_empty() {
        return Err(Error::InsufficientData("no member sets".into()));
    }
    refs.iter()
        .map(|z| {
            let mut total = 0.0;
            for x in member_sets {
                if x.ncols() != z.ncols() {
                    return Err(Error::DimensionMismatch(format!(
                        "set width {} vs reference width {}",
                        x.ncols(),
                        z.ncols()
                    )));
                }
                let (plan, cost) = w2_plan(*x, z.view(), epsilon, iters)?;
                total += (&plan * &cost).sum();
            }
            Ok(total / member_sets.len() as f64)
        })
        .collect()
}

//! Reverse-mode gradients for the fixed graph
//!
//! ```text
//! X ─κ(w,·)→ A ─whitener(w)→ Ψ ─Ψzᵀ→ K ─sinkhorn_L→ P ─⊙S→ Q ─√p/√q·QᵀΨ→ φ ─Wφ+b→ logits → loss
//! ```
//!
//! The tape stores every intermediate the backward pass needs. Sinkhorn is
//! differentiated as the L-step unrolled map, not at its fixed point. The
//! whitener `κ(w,w)^{-1/2}` is differentiated through its eigendecomposition
//! with divided differences of the clamped inverse square root.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Label, PaddedBatch};
use crate::embed::{dot_product_weights, position_matrix, Pooling, ReferenceBank};
use crate::error::{Error, Result};
use crate::kernel::{clamped_inv_sqrt, kernel_eval, whitener_from_eig, KernelSpec, NystromMap};
use crate::linalg::{sym_eig, SymEig};
use crate::ot::{logsumexp, SinkhornMode};
use crate::train::{sample_loss, LinearClassifier};

#[derive(Debug, Clone)]
enum PoolTape {
    Standard {
        e: Array2<f64>,
        /// `u_1..u_L`
        us: Vec<Array1<f64>>,
        /// `v_0..v_L`
        vs: Vec<Array1<f64>>,
    },
    Log {
        /// `f_1..f_L`
        fs: Vec<Array1<f64>>,
        /// `g_0..g_L`
        gs: Vec<Array1<f64>>,
        plan: Array2<f64>,
    },
    Dot {
        softmax: Array2<f64>,
    },
}

#[derive(Debug, Clone)]
struct RefTape {
    pool: PoolTape,
    /// Pooling weights after the positional factor.
    weights: Array2<f64>,
    position: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct SampleTape {
    x: Array2<f64>,
    kernel: Array2<f64>,
    psi: Array2<f64>,
    refs: Vec<RefTape>,
    phi: Array1<f64>,
    /// ∂loss/∂logits for this sample (already divided by the batch size).
    dlogits: Array1<f64>,
    loss: f64,
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub loss: f64,
    spec: KernelSpec,
    ridge: f64,
    anchors: Array2<f64>,
    anchor_gram: Array2<f64>,
    eig: SymEig,
    whitener: Array2<f64>,
    bank: ReferenceBank,
    classifier: LinearClassifier,
    samples: Vec<SampleTape>,
}

impl Tape {
    /// Per-sample set embeddings `φ` recorded during the forward pass.
    pub fn embeddings(&self) -> Vec<Array1<f64>> {
        self.samples.iter().map(|s| s.phi.clone()).collect()
    }

    /// Per-sample losses (before averaging and regularization).
    pub fn sample_losses(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.loss).collect()
    }
}

/// Gradients with respect to every trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// One `p × k` block per reference.
    pub refs: Vec<Array2<f64>>,
    /// `k × d`
    pub anchors: Array2<f64>,
    /// `C × q·p·k`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.refs
            .iter()
            .flat_map(|r| r.iter())
            .chain(self.anchors.iter())
            .chain(self.weights.iter())
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

/// Arithmetic for the unrolled iterations during training: log-domain for
/// `ε < 0.1`, standard otherwise.
pub fn unroll_mode(epsilon: f64) -> SinkhornMode {
    if epsilon < 0.1 {
        SinkhornMode::LogDomain
    } else {
        SinkhornMode::Standard
    }
}

/// Standard arithmetic that overflows is redone in the log domain.
fn forward_sinkhorn(
    k: ArrayView2<'_, f64>,
    eps: f64,
    iters: usize,
    mode: SinkhornMode,
) -> Result<(PoolTape, Array2<f64>)> {
    match unrolled_sinkhorn(k, eps, iters, mode) {
        Err(Error::NonFinite(_)) if mode == SinkhornMode::Standard => {
            unrolled_sinkhorn(k, eps, iters, SinkhornMode::LogDomain)
        }
        other => other,
    }
}

fn unrolled_sinkhorn(
    k: ArrayView2<'_, f64>,
    eps: f64,
    iters: usize,
    mode: SinkhornMode,
) -> Result<(PoolTape, Array2<f64>)> {
    let (n, p) = k.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / p as f64;
    match mode {
        SinkhornMode::Standard => {
            let e = k.mapv(|v| (v / eps).exp());
            let mut vs = vec![Array1::ones(p)];
            let mut us = Vec::with_capacity(iters);
            for _ in 0..iters {
                let ev = e.dot(vs.last().expect("v0"));
                let u = ev.mapv(|s| a / s);
                let v = e.t().dot(&u).mapv(|t| b / t);
                us.push(u);
                vs.push(v);
            }
            let (u, v) = (us.last().expect("iters >= 1"), vs.last().expect("v"));
            let plan = Array2::from_shape_fn((n, p), |(i, j)| u[i] * e[[i, j]] * v[j]);
            let degenerate = us.iter().chain(vs.iter()).flat_map(|x| x.iter()).any(|x| !(x.is_finite() && *x > 0.0));
            if degenerate || plan.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("unrolled sinkhorn (standard mode)"));
            }
            Ok((PoolTape::Standard { e, us, vs }, plan))
        }
        SinkhornMode::LogDomain => {
            let (la, lb) = (a.ln(), b.ln());
            let mut gs = vec![Array1::zeros(p)];
            let mut fs = Vec::with_capacity(iters);
            let mut buf = Vec::with_capacity(n.max(p));
            for _ in 0..iters {
                let g = gs.last().expect("g0");
                let f = Array1::from_shape_fn(n, |i| {
                    buf.clear();
                    buf.extend((0..p).map(|j| (k[[i, j]] + g[j]) / eps));
                    eps * (la - logsumexp(&buf))
                });
                let g = Array1::from_shape_fn(p, |j| {
                    buf.clear();
                    buf.extend((0..n).map(|i| (k[[i, j]] + f[i]) / eps));
                    eps * (lb - logsumexp(&buf))
                });
                fs.push(f);
                gs.push(g);
            }
            let (f, g) = (fs.last().expect("iters >= 1"), gs.last().expect("g"));
            let plan = Array2::from_shape_fn((n, p), |(i, j)| ((k[[i, j]] + f[i] + g[j]) / eps).exp());
            if plan.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("unrolled sinkhorn (log domain)"));
            }
            Ok((PoolTape::Log { fs, gs, plan: plan.clone() }, plan))
        }
    }
}

/// `∂L/∂K` from `∂L/∂P` for the recorded pooling.
fn backward_pool(tape: &PoolTape, k: ArrayView2<'_, f64>, dplan: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (n, p) = dplan.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / p as f64;
    match tape {
        PoolTape::Standard { e, us, vs } => {
            let iters = us.len();
            let (u_l, v_l) = (&us[iters - 1], &vs[iters]);
            let pe = dplan * e;
            let mut de = Array2::from_shape_fn((n, p), |(i, j)| dplan[[i, j]] * u_l[i] * v_l[j]);
            let mut du = pe.dot(v_l);
            let mut dv = pe.t().dot(u_l);
            for l in (1..=iters).rev() {
                let u = &us[l - 1];
                let v = &vs[l];
                let v_prev = &vs[l - 1];
                // v_l = b / (Eᵀ u_l)
                let dt = Array1::from_shape_fn(p, |j| -dv[j] * v[j] * v[j] / b);
                du += &e.dot(&dt);
                for i in 0..n {
                    for j in 0..p {
                        de[[i, j]] += u[i] * dt[j];
                    }
                }
                // u_l = a / (E v_{l-1})
                let ds = Array1::from_shape_fn(n, |i| -du[i] * u[i] * u[i] / a);
                dv = e.t().dot(&ds);
                for i in 0..n {
                    for j in 0..p {
                        de[[i, j]] += ds[i] * v_prev[j];
                    }
                }
                du.fill(0.0);
            }
            de * e / eps
        }
        PoolTape::Log { fs, gs, plan } => {
            let iters = fs.len();
            let r = dplan * plan;
            let mut dk = &r / eps;
            let mut df = r.sum_axis(Axis(1)) / eps;
            let mut dg = r.sum_axis(Axis(0)) / eps;
            for l in (1..=iters).rev() {
                let f = &fs[l - 1];
                let g = &gs[l];
                let g_prev = &gs[l - 1];
                // g_l = ε log b − ε LSE_i((K + f_l)/ε)
                for i in 0..n {
                    for j in 0..p {
                        let t = ((k[[i, j]] + f[i] + g[j]) / eps).exp() / b;
                        dk[[i, j]] -= dg[j] * t;
                        df[i] -= dg[j] * t;
                    }
                }
                // f_l = ε log a − ε LSE_j((K + g_{l-1})/ε)
                let mut dg_prev = Array1::zeros(p);
                for i in 0..n {
                    for j in 0..p {
                        let t = ((k[[i, j]] + f[i] + g_prev[j]) / eps).exp() / a;
                        dk[[i, j]] -= df[i] * t;
                        dg_prev[j] -= df[i] * t;
                    }
                }
                dg = dg_prev;
                df.fill(0.0);
            }
            dk
        }
        PoolTape::Dot { softmax } => {
            let dt = dplan / p as f64;
            let mut dk = Array2::zeros((n, p));
            for j in 0..p {
                let dot: f64 = (0..n).map(|i| softmax[[i, j]] * dt[[i, j]]).sum();
                for i in 0..n {
                    dk[[i, j]] = softmax[[i, j]] * (dt[[i, j]] - dot) / eps;
                }
            }
            dk
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_sample(
    x: ArrayView2<'_, f64>,
    label: Option<&Label>,
    batch_size: usize,
    spec: &KernelSpec,
    anchors: &Array2<f64>,
    whitener: &Array2<f64>,
    bank: &ReferenceBank,
    classifier: &LinearClassifier,
) -> Result<SampleTape> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let kernel = kernel_eval(spec, anchors.view(), x)?;
    let psi = whitener.dot(&kernel).reversed_axes();
    let (q, p, k) = (bank.q(), bank.p(), bank.k());
    if psi.ncols() != k {
        return Err(Error::DimensionMismatch(format!("{} anchors but references of width {k}", psi.ncols())));
    }
    let scale = (p as f64).sqrt() / (q as f64).sqrt();
    let mut phi = Array1::zeros(q * p * k);
    let mut refs = Vec::with_capacity(q);
    for (j, z) in bank.refs().iter().enumerate() {
        let sim = psi.dot(&z.t());
        let (pool, plan) = match bank.pooling {
            Pooling::Ot => forward_sinkhorn(sim.view(), bank.epsilon, bank.sinkhorn_iters, bank.mode)?,
            Pooling::DotProduct => {
                let plan = dot_product_weights(sim.view(), bank.epsilon);
                (PoolTape::Dot { softmax: &plan * p as f64 }, plan)
            }
        };
        let position = bank.sigma_pos.map(|sg| position_matrix(n, p, sg));
        let weights = match &position {
            Some(sm) => &plan * sm,
            None => plan,
        };
        let out = weights.t().dot(&psi) * scale;
        phi.slice_mut(s![j * p * k..(j + 1) * p * k]).assign(&Array1::from_iter(out.iter().copied()));
        refs.push(RefTape { pool, weights, position });
    }
    let logits = classifier.logits(phi.view());
    let (loss, mut dlogits) = sample_loss(logits.view(), label, classifier.mode)?;
    dlogits /= batch_size as f64;
    Ok(SampleTape { x: x.to_owned(), kernel, psi, refs, phi, dlogits, loss })
}

/// Mean loss over the batch plus `(λ/2)‖W‖²`, with the tape for [`backward`].
pub fn forward_loss(
    batch: &PaddedBatch,
    nystrom: &NystromMap,
    bank: &ReferenceBank,
    classifier: &LinearClassifier,
) -> Result<(f64, Tape)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if classifier.input_dim() != bank.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "classifier expects {} inputs, embedding has {}",
            classifier.input_dim(),
            bank.output_dim()
        )));
    }
    let spec = nystrom.spec();
    let anchors = nystrom.anchors().clone();
    let anchor_gram = kernel_eval(&spec, anchors.view(), anchors.view())?;
    let eig = sym_eig(anchor_gram.view());
    let whitener = whitener_from_eig(&eig, nystrom.ridge());
    let bsz = batch.len();
    let samples: Vec<SampleTape> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            forward_sample(
                batch.trimmed(b),
                batch.labels[b].as_ref(),
                bsz,
                &spec,
                &anchors,
                &whitener,
                bank,
                classifier,
            )
        })
        .collect::<Result<_>>()?;
    let data_loss = samples.iter().map(|s| s.loss).sum::<f64>() / bsz as f64;
    let loss = data_loss + classifier.penalty();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let tape = Tape {
        loss,
        spec,
        ridge: nystrom.ridge(),
        anchors,
        anchor_gram,
        eig,
        whitener,
        bank: bank.clone(),
        classifier: classifier.clone(),
        samples,
    };
    Ok((loss, tape))
}

struct SampleGrads {
    refs: Vec<Array2<f64>>,
    whitener: Array2<f64>,
    anchors: Array2<f64>,
}

fn backward_sample(tape: &Tape, st: &SampleTape) -> SampleGrads {
    let bank = &tape.bank;
    let (q, p, k) = (bank.q(), bank.p(), bank.k());
    let scale = (p as f64).sqrt() / (q as f64).sqrt();
    let dphi = tape.classifier.weights.t().dot(&st.dlogits);
    let mut dpsi = Array2::<f64>::zeros(st.psi.dim());
    let mut drefs = Vec::with_capacity(q);
    for (j, (z, rt)) in bank.refs().iter().zip(&st.refs).enumerate() {
        let dout = dphi.slice(s![j * p * k..(j + 1) * p * k]).to_shape((p, k)).expect("contiguous").to_owned();
        // out = scale · Qᵀ Ψ
        let dweights = st.psi.dot(&dout.t()) * scale;
        dpsi += &(rt.weights.dot(&dout) * scale);
        let dplan = match &rt.position {
            Some(sm) => dweights * sm,
            None => dweights,
        };
        let sim = st.psi.dot(&z.t());
        let dk = backward_pool(&rt.pool, sim.view(), &dplan, bank.epsilon);
        dpsi += &dk.dot(z);
        drefs.push(dk.t().dot(&st.psi));
    }
    // Ψᵀ = M A
    let dpsi_t = dpsi.t();
    let dwhitener = dpsi_t.dot(&st.kernel.t());
    let dkernel = tape.whitener.dot(&dpsi_t);
    let anchors = kernel_input_grad(&tape.spec, &tape.anchors, st.x.view(), &st.kernel, &dkernel);
    SampleGrads { refs: drefs, whitener: dwhitener, anchors }
}

/// Gradient w.r.t. the anchors of `Σ dA ⊙ κ(w, X)`.
fn kernel_input_grad(
    spec: &KernelSpec,
    w: &Array2<f64>,
    x: ArrayView2<'_, f64>,
    a: &Array2<f64>,
    da: &Array2<f64>,
) -> Array2<f64> {
    match *spec {
        KernelSpec::Linear => da.dot(&x),
        KernelSpec::Gaussian { sigma } => {
            let inv = 1.0 / (sigma * sigma);
            let coef = da * a;
            // Σ_i coef_ji (x_i − w_j) / σ²
            let row_sums = coef.sum_axis(Axis(1));
            let mut g = coef.dot(&x);
            for (j, mut row) in g.outer_iter_mut().enumerate() {
                row.scaled_add(-row_sums[j], &w.row(j));
                row *= inv;
            }
            g
        }
    }
}

/// Backward through `M = f(G)`, `f(λ) = max(λ, ridge)^{-1/2}` applied spectrally.
fn spectral_backward(eig: &SymEig, dm: &Array2<f64>, ridge: f64) -> Array2<f64> {
    let lam = &eig.values;
    let u = &eig.vectors;
    let n = lam.len();
    let f = |l: f64| clamped_inv_sqrt(l, ridge);
    let fprime = |l: f64| if l > ridge { -0.5 * l.powf(-1.5) } else { 0.0 };
    let scale = lam.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let divided = Array2::from_shape_fn((n, n), |(i, j)| {
        let (li, lj) = (lam[i], lam[j]);
        if (li - lj).abs() > 1e-9 * scale {
            (f(li) - f(lj)) / (li - lj)
        } else {
            fprime(0.5 * (li + lj))
        }
    });
    let inner = u.t().dot(dm).dot(u) * divided;
    u.dot(&inner).dot(&u.t())
}

/// Exact reverse-mode gradients of the recorded graph.
pub fn backward(tape: &Tape) -> GradientBundle {
    let per_sample: Vec<SampleGrads> = tape.samples.par_iter().map(|st| backward_sample(tape, st)).collect();
    let bank = &tape.bank;
    let mut drefs: Vec<Array2<f64>> = vec![Array2::zeros((bank.p(), bank.k())); bank.q()];
    let mut dwhitener = Array2::<f64>::zeros(tape.whitener.dim());
    let mut danchors = Array2::<f64>::zeros(tape.anchors.dim());
    for g in &per_sample {
        for (acc, r) in drefs.iter_mut().zip(&g.refs) {
            *acc += r;
        }
        dwhitener += &g.whitener;
        danchors += &g.anchors;
    }
    let dgram = spectral_backward(&tape.eig, &dwhitener, tape.ridge);
    let sym = &dgram + &dgram.t();
    danchors += &match tape.spec {
        KernelSpec::Linear => sym.dot(&tape.anchors),
        KernelSpec::Gaussian { .. } => {
            // dG_jl/dw_j = G_jl (w_l − w_j)/σ², both index slots via `sym`.
            kernel_input_grad(&tape.spec, &tape.anchors, tape.anchors.view(), &tape.anchor_gram, &sym)
        }
    };
    let cls = &tape.classifier;
    let mut dweights = cls.weights.mapv(|w| w * cls.lambda);
    let mut dbias = Array1::zeros(cls.bias.len());
    for st in &tape.samples {
        for c in 0..st.dlogits.len() {
            dweights.row_mut(c).scaled_add(st.dlogits[c], &st.phi);
        }
        dbias += &st.dlogits;
    }
    GradientBundle { refs: drefs, anchors: danchors, weights: dweights, bias: dbias }
}

/// Trainable parameter blocks, as perturbed by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    References,
    Anchors,
    Weights,
    Bias,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::References, Block::Anchors, Block::Weights, Block::Bias];

    pub fn name(&self) -> &'static str {
        match self {
            Block::References => "references",
            Block::Anchors => "anchors",
            Block::Weights => "weights",
            Block::Bias => "bias",
        }
    }
}

/// Worst relative error per checked block.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_block: Vec<(Block, f64, usize)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_block.iter().map(|b| b.1).fold(0.0, f64::max)
    }

    pub fn coordinates_checked(&self) -> usize {
        self.per_block.iter().map(|b| b.2).sum()
    }
}

fn block_len(block: Block, nystrom: &NystromMap, bank: &ReferenceBank, cls: &LinearClassifier) -> usize {
    match block {
        Block::References => bank.output_dim(),
        Block::Anchors => nystrom.anchors().len(),
        Block::Weights => cls.weights.len(),
        Block::Bias => cls.bias.len(),
    }
}

fn perturbed_loss(
    batch: &PaddedBatch,
    nystrom: &NystromMap,
    bank: &ReferenceBank,
    cls: &LinearClassifier,
    block: Block,
    idx: usize,
    delta: f64,
) -> Result<f64> {
    match block {
        Block::References => {
            let per = bank.p() * bank.k();
            let mut refs = bank.refs().to_vec();
            refs[idx / per].as_slice_mut().expect("standard layout")[idx % per] += delta;
            let mut b2 = bank.clone();
            b2.set_refs(refs)?;
            Ok(forward_loss(batch, nystrom, &b2, cls)?.0)
        }
        Block::Anchors => {
            let mut w = nystrom.anchors().clone();
            w.as_slice_mut().expect("standard layout")[idx] += delta;
            let n2 = NystromMap::with_anchors(w, nystrom.spec(), nystrom.ridge())?;
            Ok(forward_loss(batch, &n2, bank, cls)?.0)
        }
        Block::Weights => {
            let mut c2 = cls.clone();
            c2.weights.as_slice_mut().expect("standard layout")[idx] += delta;
            Ok(forward_loss(batch, nystrom, bank, &c2)?.0)
        }
        Block::Bias => {
            let mut c2 = cls.clone();
            c2.bias[idx] += delta;
            Ok(forward_loss(batch, nystrom, bank, &c2)?.0)
        }
    }
}

fn grad_entry(g: &GradientBundle, block: Block, idx: usize, bank: &ReferenceBank) -> f64 {
    match block {
        Block::References => {
            let per = bank.p() * bank.k();
            g.refs[idx / per].as_slice().expect("standard layout")[idx % per]
        }
        Block::Anchors => g.anchors.as_slice().expect("standard layout")[idx],
        Block::Weights => g.weights.as_slice().expect("standard layout")[idx],
        Block::Bias => g.bias[idx],
    }
}

/// Compares [`backward`] with central differences `(f(θ+h) − f(θ−h)) / 2h` on
/// `samples` coordinates per block, drawn uniformly with replacement. The
/// relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    batch: &PaddedBatch,
    nystrom: &NystromMap,
    bank: &ReferenceBank,
    classifier: &LinearClassifier,
    blocks: &[Block],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, tape) = forward_loss(batch, nystrom, bank, classifier)?;
    let grads = backward(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_block = Vec::with_capacity(blocks.len());
    for &block in blocks {
        let len = block_len(block, nystrom, bank, classifier);
        let coords: Vec<usize> = (0..samples).map(|_| rng.random_range(0..len)).collect();
        let errs: Vec<f64> = coords
            .par_iter()
            .map(|&idx| {
                let up = perturbed_loss(batch, nystrom, bank, classifier, block, idx, h)?;
                let down = perturbed_loss(batch, nystrom, bank, classifier, block, idx, -h)?;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad_entry(&grads, block, idx, bank);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                Ok((analytic - numeric).abs() / denom)
            })
            .collect::<Result<_>>()?;
        per_block.push((block, errs.iter().copied().fold(0.0, f64::max), coords.len()));
    }
    Ok(GradCheckReport { per_block })
}

/// The fixed toy problem used for gradient verification: seed 42, two sets
/// of three 2-d points, two Gaussian anchors, one reference of two
/// supports, two classes.
pub fn toy_problem(
    epsilon: f64,
    iters: usize,
    mode: SinkhornMode,
) -> Result<(PaddedBatch, NystromMap, ReferenceBank, LinearClassifier)> {
    use crate::data::{FeatureSet, TaskMode};
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |r: usize, c: usize, sd: f64| Array2::from_shape_fn((r, c), |_| sd * normal.sample(&mut rng));
    let sets = [
        FeatureSet { features: draw(3, 2, 1.0), label: Some(Label::Class(0)) },
        FeatureSet { features: draw(3, 2, 1.0), label: Some(Label::Class(1)) },
    ];
    let anchors = draw(2, 2, 1.0);
    let refs = vec![draw(2, 2, 0.5)];
    let weights = draw(2, 4, 0.5);
    let bias = Array1::from_iter(draw(1, 2, 0.1).iter().copied());
    let batch = PaddedBatch::from_sets(&[&sets[0], &sets[1]], vec![0, 1])?;
    let nystrom = NystromMap::with_anchors(anchors, KernelSpec::gaussian(1.0)?, crate::kernel::DEFAULT_RIDGE)?;
    let bank = ReferenceBank::new(refs, epsilon, iters)?.with_mode(mode);
    let cls = LinearClassifier { weights, bias, lambda: 0.01, mode: TaskMode::Multiclass };
    Ok((batch, nystrom, bank, cls))
}

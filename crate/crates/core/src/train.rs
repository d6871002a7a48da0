//! Classifier, training loops, evaluation and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{backward, forward_loss, unroll_mode};
use crate::data::{make_batches, Dataset, Label, TaskMode};
use crate::embed::{embed_set, mean_pool, Pooling, ReferenceBank};
use crate::error::{Error, Result};
use crate::kernel::{fit_nystrom, AnchorMethod, KernelSpec, NystromMap, DEFAULT_RIDGE};
use crate::ot::SinkhornMode;
use crate::reflearn::{fit_refs_kmeans, RefFitConfig, DEFAULT_POOL_LIMIT};

/// `joint`: one Adam step on every parameter per batch.
/// `alternating`: Adam on `(z, w)` with the classifier frozen, then a
/// classifier refit, once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Joint,
    #[default]
    Alternating,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "alternating" => Ok(Self::Alternating),
            other => Err(Error::InvalidParameter(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_patience: usize,
    pub lambda: f64,
    pub epsilon: f64,
    /// Sinkhorn iterations during supervised training.
    pub sinkhorn_iters: usize,
    /// Sinkhorn iterations for the unsupervised model.
    pub unsup_sinkhorn_iters: usize,
    pub sigma_pos: Option<f64>,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub kernel: KernelSpec,
    pub ridge: f64,
    pub pooling: Pooling,
    pub sinkhorn_mode: SinkhornMode,
    pub refit_max_iters: usize,
    pub refit_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            lr_halving_patience: 5,
            lambda: 1e-4,
            epsilon: 0.5,
            sinkhorn_iters: 10,
            unsup_sinkhorn_iters: 100,
            sigma_pos: None,
            p: 10,
            q: 1,
            k: 32,
            seed: 0,
            schedule: Schedule::Alternating,
            kernel: KernelSpec::Gaussian { sigma: 4.0 },
            ridge: DEFAULT_RIDGE,
            pooling: Pooling::Ot,
            sinkhorn_mode: SinkhornMode::LogDomain,
            refit_max_iters: 2000,
            refit_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.batch_size == 0 || self.p == 0 || self.q == 0 || self.k == 0 {
            return bad("batch_size, p, q and k must be positive");
        }
        if self.sinkhorn_iters == 0 || self.unsup_sinkhorn_iters == 0 {
            return bad("sinkhorn iteration counts must be positive");
        }
        if !(self.lr > 0.0 && self.epsilon > 0.0 && self.lambda >= 0.0 && self.ridge >= 0.0) {
            return bad("lr and epsilon must be positive, lambda and ridge nonnegative");
        }
        if self.sigma_pos.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma_pos must be positive");
        }
        if !(self.refit_tol > 0.0) {
            return bad("refit_tol must be positive");
        }
        Ok(())
    }
}

/// Loss of one sample and its gradient w.r.t. the logits.
///
/// Multiclass: softmax cross-entropy. Multilabel: sigmoid binary
/// cross-entropy averaged over the `C` labels.
pub fn sample_loss(logits: ArrayView1<'_, f64>, label: Option<&Label>, mode: TaskMode) -> Result<(f64, Array1<f64>)> {
    let c = logits.len();
    match (mode, label) {
        (TaskMode::Multiclass, Some(Label::Class(y))) => {
            if *y >= c {
                return Err(Error::InvalidParameter(format!("label {y} outside {c} classes")));
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps = logits.mapv(|v| (v - m).exp());
            let total = exps.sum();
            let mut grad = exps / total;
            let loss = m + total.ln() - logits[*y];
            grad[*y] -= 1.0;
            Ok((loss, grad))
        }
        (TaskMode::Multilabel, Some(Label::Multi(ys))) => {
            let mut target = Array1::zeros(c);
            for &y in ys {
                if y >= c {
                    return Err(Error::InvalidParameter(format!("label {y} outside {c} classes")));
                }
                target[y] = 1.0;
            }
            let mut loss = 0.0;
            let mut grad = Array1::zeros(c);
            for j in 0..c {
                let v = logits[j];
                // softplus(v) − t·v, stable for both signs
                loss += v.max(0.0) + (-v.abs()).exp().ln_1p() - target[j] * v;
                grad[j] = (sigmoid(v) - target[j]) / c as f64;
            }
            Ok((loss / c as f64, grad))
        }
        (_, None) => Err(Error::InvalidParameter("training needs labeled samples".into())),
        (mode, Some(l)) => Err(Error::InvalidParameter(format!("label {l:?} does not fit {mode:?} task"))),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `C × D`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub lambda: f64,
    pub mode: TaskMode,
}

/// Outcome of [`LinearClassifier::refit`].
#[derive(Debug, Clone)]
pub struct RefitReport {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize, lambda: f64, mode: TaskMode) -> Self {
        Self { weights: Array2::zeros((classes, dim)), bias: Array1::zeros(classes), lambda, mode }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, phi: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&phi) + &self.bias
    }

    /// Row-wise logits for an `m × D` feature matrix.
    pub fn scores(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }

    /// `(λ/2)‖W‖²`
    pub fn penalty(&self) -> f64 {
        0.5 * self.lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Mean loss plus penalty and its gradients `(∂W, ∂b)`.
    pub fn objective(
        &self,
        features: ArrayView2<'_, f64>,
        labels: &[Option<Label>],
    ) -> Result<(f64, Array2<f64>, Array1<f64>)> {
        let m = features.nrows();
        if m == 0 {
            return Err(Error::EmptyDataset);
        }
        let scores = self.scores(features);
        let mut dlogits = Array2::zeros(scores.dim());
        let mut loss = 0.0;
        for (i, label) in labels.iter().enumerate() {
            let (l, g) = sample_loss(scores.row(i), label.as_ref(), self.mode)?;
            loss += l;
            dlogits.row_mut(i).assign(&g);
        }
        dlogits /= m as f64;
        let gw = dlogits.t().dot(&features) + &self.weights * self.lambda;
        let gb = dlogits.sum_axis(Axis(0));
        Ok((loss / m as f64 + self.penalty(), gw, gb))
    }

    /// Full-batch gradient descent with a fixed step `1/L` until the
    /// gradient norm drops to `tol` or `max_iters` is reached.
    ///
    /// `L` bounds the gradient's Lipschitz constant: `½ λ_max(X̃ᵀX̃/m) + λ`
    /// with `X̃ = [X, 1]`, from a power-iteration estimate inflated by 10%.
    /// A step that would raise the objective is rejected and the step halved,
    /// so the objective never increases.
    pub fn refit(
        &mut self,
        features: ArrayView2<'_, f64>,
        labels: &[Option<Label>],
        max_iters: usize,
        tol: f64,
    ) -> Result<RefitReport> {
        if features.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "classifier expects {} inputs, features have {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        let lip = 0.5 * 1.1 * gram_top_eigenvalue(features) + self.lambda;
        let mut step = 1.0 / lip.max(1e-12);
        let (mut loss, mut gw, mut gb) = self.objective(features, labels)?;
        let initial_loss = loss;
        let mut iterations = 0;
        let mut gnorm = grad_norm(&gw, &gb);
        while iterations < max_iters && gnorm > tol {
            let trial = Self {
                weights: &self.weights - &(&gw * step),
                bias: &self.bias - &(&gb * step),
                lambda: self.lambda,
                mode: self.mode,
            };
            let (l2, gw2, gb2) = trial.objective(features, labels)?;
            iterations += 1;
            if !(l2 <= loss) {
                step *= 0.5;
                if step < 1e-30 {
                    break;
                }
                continue;
            }
            *self = trial;
            loss = l2;
            gw = gw2;
            gb = gb2;
            gnorm = grad_norm(&gw, &gb);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("classifier refit"));
        }
        Ok(RefitReport { iterations, initial_loss, final_loss: loss, grad_norm: gnorm })
    }
}

fn grad_norm(gw: &Array2<f64>, gb: &Array1<f64>) -> f64 {
    gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest eigenvalue of `X̃ᵀX̃/m`, `X̃ = [X, 1]`, by power iteration.
fn gram_top_eigenvalue(x: ArrayView2<'_, f64>) -> f64 {
    let (m, d) = x.dim();
    if m == 0 {
        return 0.0;
    }
    let apply = |v: &Array1<f64>| -> Array1<f64> {
        let xv = x.dot(&v.slice(s![..d])) + v[d];
        let mut out = Array1::zeros(d + 1);
        out.slice_mut(s![..d]).assign(&x.t().dot(&xv));
        out[d] = xv.sum();
        out / m as f64
    };
    let mut v = Array1::from_elem(d + 1, 1.0 / ((d + 1) as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..100 {
        let w = apply(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lam).abs() <= 1e-6 * next {
            lam = next;
            break;
        }
        lam = next;
    }
    lam
}

/// Adam with `β = (0.9, 0.999)` and `eps = 1e-8` over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam state length");
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Nyström map, reference bank and classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub nystrom: NystromMap,
    pub bank: ReferenceBank,
    pub classifier: LinearClassifier,
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.nystrom.input_dim()
    }

    /// One flattened embedding per sample, `m × q·p·k`.
    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<Array2<f64>> {
        if dataset.dim() != self.input_dim() && !dataset.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {}-d features, data has {}",
                self.input_dim(),
                dataset.dim()
            )));
        }
        embed_rows(dataset, self.bank.output_dim(), |x| {
            let psi = self.nystrom.embed(x)?;
            Ok(embed_set(psi.view(), &self.bank)?.flatten())
        })
    }

    pub fn scores(&self, dataset: &Dataset) -> Result<Array2<f64>> {
        Ok(self.classifier.scores(self.embed_dataset(dataset)?.view()))
    }
}

fn embed_rows(
    dataset: &Dataset,
    dim: usize,
    f: impl Fn(ArrayView2<'_, f64>) -> Result<Array1<f64>> + Sync,
) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = dataset.samples.par_iter().map(|s| f(s.features.view())).collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Mean of ψ-features per sample, the pooling baseline.
pub fn mean_pool_dataset(nystrom: &NystromMap, dataset: &Dataset) -> Result<Array2<f64>> {
    embed_rows(dataset, nystrom.dim(), |x| mean_pool(nystrom.embed(x)?.view()))
}

fn labels_of(dataset: &Dataset) -> Vec<Option<Label>> {
    dataset.samples.iter().map(|s| s.label.clone()).collect()
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(k, fraction correct)` for every requested k (multiclass).
    pub topk: Vec<(usize, f64)>,
    /// Mean per-label ROC-AUC (multilabel).
    pub auroc: Option<f64>,
    /// Mean per-label average precision (multilabel).
    pub auprc: Option<f64>,
}

impl Evaluation {
    pub fn top1(&self) -> Option<f64> {
        self.topk.iter().find(|(k, _)| *k == 1).map(|t| t.1)
    }
}

/// A sample counts as correct at `k` when fewer than `k` classes score
/// strictly higher than its label.
pub fn topk_accuracy(scores: ArrayView2<'_, f64>, classes: &[usize], k: usize) -> f64 {
    let hits = classes
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            let row = scores.row(i);
            row.iter().filter(|&&v| v > row[c]).count() < k
        })
        .count();
    hits as f64 / classes.len() as f64
}

/// Mann–Whitney ROC-AUC with average ranks for ties. `None` without both classes.
pub fn roc_auc(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| targets[o]).count() as f64 * avg;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Average precision, ties broken by input order after a stable sort.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let pos = targets.iter().filter(|&&t| t).count();
    if pos == 0 || pos == targets.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0;
    let mut ap = 0.0;
    for (rank, &o) in order.iter().enumerate() {
        if targets[o] {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / pos as f64)
}

/// Metrics from precomputed scores (`m × C`).
pub fn evaluate_scores(scores: ArrayView2<'_, f64>, dataset: &Dataset, topk: &[usize]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match dataset.mode {
        TaskMode::Multiclass => {
            let classes: Vec<usize> = dataset
                .samples
                .iter()
                .map(|s| s.class().ok_or_else(|| Error::InvalidParameter("unlabeled sample in evaluation".into())))
                .collect::<Result<_>>()?;
            Ok(Evaluation {
                topk: topk.iter().map(|&k| (k, topk_accuracy(scores, &classes, k))).collect(),
                auroc: None,
                auprc: None,
            })
        }
        TaskMode::Multilabel => {
            let (mut roc, mut pr) = (Vec::new(), Vec::new());
            for c in 0..scores.ncols() {
                let col: Vec<f64> = scores.column(c).to_vec();
                let targets: Vec<bool> = dataset
                    .samples
                    .iter()
                    .map(|s| matches!(&s.label, Some(Label::Multi(ls)) if ls.contains(&c)))
                    .collect();
                roc.extend(roc_auc(&col, &targets));
                pr.extend(average_precision(&col, &targets));
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            Ok(Evaluation { topk: Vec::new(), auroc: mean(&roc), auprc: mean(&pr) })
        }
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset, topk: &[usize]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    evaluate_scores(model.scores(dataset)?.view(), dataset, topk)
}

/// One line of training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch of the returned model (0 = initialization).
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn subsample_rows(x: Array2<f64>, limit: usize, seed: u64) -> Array2<f64> {
    if x.nrows() <= limit {
        return x;
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), x.nrows(), limit).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// Primary score used for checkpoint selection: top-1 accuracy, or mean
/// ROC-AUC for multilabel data.
fn primary_metric(scores: ArrayView2<'_, f64>, dataset: &Dataset) -> Result<f64> {
    let ev = evaluate_scores(scores, dataset, &[1])?;
    Ok(ev.top1().or(ev.auroc).unwrap_or(0.0))
}

fn val_stats(model: &Model, val: &Dataset) -> Result<(f64, f64)> {
    let feats = model.embed_dataset(val)?;
    let (loss, _, _) = model.classifier.objective(feats.view(), &labels_of(val))?;
    let acc = primary_metric(model.classifier.scores(feats.view()).view(), val)?;
    Ok((loss, acc))
}

/// Nyström anchors by K-means on (subsampled) raw features.
pub fn fit_anchors(train: &Dataset, config: &TrainConfig) -> Result<NystromMap> {
    let pooled = subsample_rows(train.pooled_features(), DEFAULT_POOL_LIMIT, config.seed);
    fit_nystrom(pooled.view(), config.k, AnchorMethod::KMeans, config.kernel, config.ridge, config.seed)
}

/// Unsupervised anchors and references, then a classifier on frozen embeddings.
///
/// Validation metrics are computed on `val` when given, else on `train`.
pub fn train_unsupervised(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Model, TrainMetrics)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let nystrom = fit_anchors(train, config)?;
    let psi: Vec<Array2<f64>> =
        train.samples.par_iter().map(|s| nystrom.embed(s.features.view())).collect::<Result<_>>()?;
    let views: Vec<ArrayView2<'_, f64>> = psi.iter().map(|p| p.view()).collect();
    let ref_cfg = RefFitConfig::new(config.p, config.q, config.epsilon, config.unsup_sinkhorn_iters, config.seed);
    let bank = fit_refs_kmeans(&views, &ref_cfg)?
        .with_positional(config.sigma_pos)?
        .with_pooling(config.pooling)
        .with_mode(config.sinkhorn_mode);
    let classifier = LinearClassifier::zeros(train.num_classes, bank.output_dim(), config.lambda, train.mode);
    let mut model = Model { nystrom, bank, classifier };
    let feats = model.embed_dataset(train)?;
    let report = model.classifier.refit(feats.view(), &labels_of(train), config.refit_max_iters, config.refit_tol)?;
    let (val_loss, val_acc) = val_stats(&model, val.unwrap_or(train))?;
    let metrics = TrainMetrics {
        epochs: vec![EpochMetrics { epoch: 0, train_loss: report.final_loss, val_loss, val_acc, lr: 0.0 }],
        best_epoch: 0,
        best_val_acc: val_acc,
    };
    Ok((model, metrics))
}

/// The mean-pooling baseline: same anchors, mean of ψ-features, same classifier.
pub fn train_mean_pool(train: &Dataset, config: &TrainConfig) -> Result<(NystromMap, LinearClassifier)> {
    config.validate()?;
    let nystrom = fit_anchors(train, config)?;
    let feats = mean_pool_dataset(&nystrom, train)?;
    let mut cls = LinearClassifier::zeros(train.num_classes, nystrom.dim(), config.lambda, train.mode);
    cls.refit(feats.view(), &labels_of(train), config.refit_max_iters, config.refit_tol)?;
    Ok((nystrom, cls))
}

fn flat_params(model: &Model, with_classifier: bool) -> Vec<f64> {
    let mut out: Vec<f64> = model.bank.refs().iter().flat_map(|r| r.iter().copied()).collect();
    out.extend(model.nystrom.anchors().iter().copied());
    if with_classifier {
        out.extend(model.classifier.weights.iter().copied());
        out.extend(model.classifier.bias.iter().copied());
    }
    out
}

fn load_params(model: &mut Model, flat: &[f64], with_classifier: bool) -> Result<()> {
    let (q, p, k) = (model.bank.q(), model.bank.p(), model.bank.k());
    let mut at = 0;
    let mut take = |len: usize| {
        let s = &flat[at..at + len];
        at += len;
        s.to_vec()
    };
    let refs = (0..q).map(|_| Array2::from_shape_vec((p, k), take(p * k)).expect("ref shape")).collect();
    model.bank.set_refs(refs)?;
    let (kk, d) = model.nystrom.anchors().dim();
    let anchors = Array2::from_shape_vec((kk, d), take(kk * d)).expect("anchor shape");
    model.nystrom = NystromMap::with_anchors(anchors, model.nystrom.spec(), model.nystrom.ridge())?;
    if with_classifier {
        let (c, dd) = model.classifier.weights.dim();
        model.classifier.weights = Array2::from_shape_vec((c, dd), take(c * dd)).expect("weight shape");
        model.classifier.bias = Array1::from_vec(take(c));
    }
    Ok(())
}

fn flat_grads(g: &crate::autodiff::GradientBundle, with_classifier: bool) -> Vec<f64> {
    let mut out: Vec<f64> = g.refs.iter().flat_map(|r| r.iter().copied()).collect();
    out.extend(g.anchors.iter().copied());
    if with_classifier {
        out.extend(g.weights.iter().copied());
        out.extend(g.bias.iter().copied());
    }
    out
}

/// End-to-end training from an unsupervised initialization.
///
/// The returned model is the one with the best validation score among the
/// initialization (epoch 0) and every completed epoch; ties keep the
/// earlier one. `on_epoch` sees each epoch's metrics as soon as they exist.
pub fn train_supervised(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    init: &Model,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, TrainMetrics)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let val = val.unwrap_or(train);
    let (init_val_loss, init_val_acc) = val_stats(init, val)?;
    let mut metrics = TrainMetrics { epochs: Vec::new(), best_epoch: 0, best_val_acc: init_val_acc };
    let mut best = init.clone();
    if config.epochs == 0 {
        return Ok((best, metrics));
    }
    let mut model = init.clone();
    model.bank.sinkhorn_iters = config.sinkhorn_iters;
    model.classifier.lambda = config.lambda;
    let joint = config.schedule == Schedule::Joint;
    let mut params = flat_params(&model, joint);
    let mut adam = Adam::new(params.len(), config.lr);
    let labels = labels_of(train);
    let mut best_val_loss = init_val_loss;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let batches = make_batches(train, config.batch_size, config.seed.wrapping_add(epoch as u64), true)?;
        let mut losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            let unrolled = model.bank.clone().with_mode(unroll_mode(model.bank.epsilon));
            let (loss, tape) = forward_loss(batch, &model.nystrom, &unrolled, &model.classifier)?;
            let grads = backward(&tape);
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradients"));
            }
            adam.step(&mut params, &flat_grads(&grads, joint));
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameters after Adam step"));
            }
            load_params(&mut model, &params, joint)?;
            losses.push(loss);
        }
        if !joint {
            let feats = model.embed_dataset(train)?;
            model.classifier.refit(feats.view(), &labels, config.refit_max_iters, config.refit_tol)?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (val_loss, val_acc) = val_stats(&model, val)?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        let em = EpochMetrics { epoch, train_loss, val_loss, val_acc, lr: adam.lr };
        on_epoch(&em);
        metrics.epochs.push(em);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.lr_halving_patience {
                adam.lr *= 0.5;
                stale = 0;
            }
        }
        if val_acc > metrics.best_val_acc {
            metrics.best_val_acc = val_acc;
            metrics.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, metrics))
}

const MAGIC: &[u8; 8] = b"OTKE0001";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: usize) -> Result<()> {
        Ok(self.0.write_all(&(v as u64).to_le_bytes())?)
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn all<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes()?);
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= 1 << 32)
            .ok_or_else(|| Error::Checkpoint(format!("implausible size {v}")))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn matrix(&mut self, r: usize, c: usize) -> Result<Array2<f64>> {
        let v = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), v).expect("sized"))
    }
}

/// Serializes a model in the `OTKE0001` layout (see the README).
pub fn write_checkpoint_to<W: Write>(model: &Model, w: W) -> Result<()> {
    let mut w = Writer(w);
    let (k, d) = model.nystrom.anchors().dim();
    let (p, q) = (model.bank.p(), model.bank.q());
    let c = model.classifier.num_classes();
    w.0.write_all(MAGIC)?;
    for v in [d, k, p, q, c] {
        w.u64(v)?;
    }
    match model.nystrom.spec() {
        KernelSpec::Gaussian { sigma } => {
            w.u8(0)?;
            w.f64(sigma)?;
        }
        KernelSpec::Linear => {
            w.u8(1)?;
            w.f64(0.0)?;
        }
    }
    w.f64(model.nystrom.ridge())?;
    w.f64(model.bank.epsilon)?;
    w.u64(model.bank.sinkhorn_iters)?;
    w.u8(match model.bank.pooling {
        Pooling::Ot => 0,
        Pooling::DotProduct => 1,
    })?;
    w.u8(match model.bank.mode {
        SinkhornMode::LogDomain => 0,
        SinkhornMode::Standard => 1,
    })?;
    w.u8(model.bank.sigma_pos.is_some() as u8)?;
    w.f64(model.bank.sigma_pos.unwrap_or(0.0))?;
    w.u8(match model.classifier.mode {
        TaskMode::Multiclass => 0,
        TaskMode::Multilabel => 1,
    })?;
    w.f64(model.classifier.lambda)?;
    w.all(model.nystrom.anchors().iter())?;
    for z in model.bank.refs() {
        w.all(z.iter())?;
    }
    w.all(model.classifier.weights.iter())?;
    w.all(model.classifier.bias.iter())?;
    w.0.flush()?;
    Ok(())
}

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint_to(model, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint_from<R: Read>(r: R) -> Result<Model> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected OTKE0001)".into()));
    }
    let (d, k, p, q, c) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    if d == 0 || k == 0 || p == 0 || q == 0 || c == 0 {
        return Err(Error::Checkpoint("zero dimension in header".into()));
    }
    let spec = match (r.u8()?, r.f64()?) {
        (0, sigma) => KernelSpec::gaussian(sigma).map_err(|e| Error::Checkpoint(e.to_string()))?,
        (1, _) => KernelSpec::Linear,
        (t, _) => return Err(Error::Checkpoint(format!("unknown kernel tag {t}"))),
    };
    let ridge = r.f64()?;
    let epsilon = r.f64()?;
    let iters = r.u64()?;
    let pooling = match r.u8()? {
        0 => Pooling::Ot,
        1 => Pooling::DotProduct,
        t => return Err(Error::Checkpoint(format!("unknown pooling tag {t}"))),
    };
    let mode = match r.u8()? {
        0 => SinkhornMode::LogDomain,
        1 => SinkhornMode::Standard,
        t => return Err(Error::Checkpoint(format!("unknown sinkhorn mode tag {t}"))),
    };
    let has_pos = r.u8()?;
    let sigma_pos = r.f64()?;
    let task = match r.u8()? {
        0 => TaskMode::Multiclass,
        1 => TaskMode::Multilabel,
        t => return Err(Error::Checkpoint(format!("unknown task tag {t}"))),
    };
    let lambda = r.f64()?;
    let anchors = r.matrix(k, d)?;
    let refs = (0..q).map(|_| r.matrix(p, k)).collect::<Result<Vec<_>>>()?;
    let weights = r.matrix(c, q * p * k)?;
    let bias = Array1::from_vec(r.matrix(1, c)?.into_raw_vec_and_offset().0);
    let mut extra = [0u8; 1];
    if r.0.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let checkpoint = |e: Error| Error::Checkpoint(e.to_string());
    let nystrom = NystromMap::with_anchors(anchors, spec, ridge).map_err(checkpoint)?;
    let bank = ReferenceBank::new(refs, epsilon, iters)
        .and_then(|b| b.with_positional((has_pos != 0).then_some(sigma_pos)))
        .map_err(checkpoint)?
        .with_pooling(pooling)
        .with_mode(mode);
    Ok(Model { nystrom, bank, classifier: LinearClassifier { weights, bias, lambda, mode: task } })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, FeatureSet, SynthSpec};
    use ndarray::array;

    fn separable() -> (Array2<f64>, Vec<Option<Label>>) {
        let x = array![[2.0, 0.1], [1.5, -0.2], [-2.0, 0.3], [-1.7, -0.1], [0.1, 2.2], [-0.2, 1.9]];
        let y = [0, 0, 1, 1, 2, 2].iter().map(|&c| Some(Label::Class(c))).collect();
        (x, y)
    }

    #[test]
    fn refit_reaches_full_training_accuracy_on_separable_data() {
        let (x, y) = separable();
        let mut cls = LinearClassifier::zeros(3, 2, 1e-4, TaskMode::Multiclass);
        let rep = cls.refit(x.view(), &y, 5000, 1e-6).unwrap();
        assert!(rep.final_loss < rep.initial_loss);
        let classes: Vec<usize> = y
            .iter()
            .map(|l| match l {
                Some(Label::Class(c)) => *c,
                _ => 0,
            })
            .collect();
        assert_eq!(topk_accuracy(cls.scores(x.view()).view(), &classes, 1), 1.0);
    }

    #[test]
    fn refit_never_increases_objective() {
        let (x, y) = separable();
        let mut cls = LinearClassifier::zeros(3, 2, 0.1, TaskMode::Multiclass);
        let mut last = cls.objective(x.view(), &y).unwrap().0;
        for _ in 0..20 {
            cls.refit(x.view(), &y, 3, 1e-12).unwrap();
            let now = cls.objective(x.view(), &y).unwrap().0;
            assert!(now <= last + 1e-10);
            last = now;
        }
    }

    #[test]
    fn huge_lambda_collapses_to_majority() {
        let x = array![[1.0], [2.0], [3.0], [-1.0]];
        let y: Vec<_> = [0, 0, 0, 1].iter().map(|&c| Some(Label::Class(c))).collect();
        let mut cls = LinearClassifier::zeros(2, 1, 1e6, TaskMode::Multiclass);
        cls.refit(x.view(), &y, 5000, 1e-9).unwrap();
        assert!(cls.weights.iter().all(|w| w.abs() < 1e-5));
        assert_eq!(topk_accuracy(cls.scores(x.view()).view(), &[0, 0, 0, 1], 1), 0.75);
    }

    #[test]
    fn classifier_gradient_matches_differences() {
        let (x, y) = separable();
        let cls = LinearClassifier {
            weights: array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]],
            bias: array![0.1, -0.1, 0.0],
            lambda: 0.3,
            mode: TaskMode::Multiclass,
        };
        let (_, gw, gb) = cls.objective(x.view(), &y).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut a = cls.clone();
                a.weights[[i, j]] += h;
                let mut b = cls.clone();
                b.weights[[i, j]] -= h;
                let num = (a.objective(x.view(), &y).unwrap().0 - b.objective(x.view(), &y).unwrap().0) / (2.0 * h);
                assert!((num - gw[[i, j]]).abs() < 1e-8);
            }
            let mut a = cls.clone();
            a.bias[i] += h;
            let mut b = cls.clone();
            b.bias[i] -= h;
            let num = (a.objective(x.view(), &y).unwrap().0 - b.objective(x.view(), &y).unwrap().0) / (2.0 * h);
            assert!((num - gb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn topk_examples() {
        let scores = array![[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]];
        assert_eq!(topk_accuracy(scores.view(), &[0, 1], 1), 1.0);
        assert_eq!(topk_accuracy(scores.view(), &[2, 2], 1), 0.0);
        assert_eq!(topk_accuracy(scores.view(), &[2, 2], 5), 1.0);
    }

    #[test]
    fn random_scores_are_near_chance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, c, k) = (4000, 10, 3);
        let scores = Array2::from_shape_fn((m, c), |_| rng.random::<f64>());
        let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let acc = topk_accuracy(scores.view(), &classes, k);
        let p = k as f64 / c as f64;
        let sd = (p * (1.0 - p) / m as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sd, "{acc}");
    }

    #[test]
    fn auc_and_ap_known_values() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.5, 0.6], &[true, true]), None);
        let ap = average_precision(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn multilabel_loss_and_gradient() {
        let logits = array![0.3, -1.2, 2.0];
        let (l, g) = sample_loss(logits.view(), Some(&Label::Multi(vec![0, 2])), TaskMode::Multilabel).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut a = logits.clone();
            a[j] += h;
            let mut b = logits.clone();
            b[j] -= h;
            let la = sample_loss(a.view(), Some(&Label::Multi(vec![0, 2])), TaskMode::Multilabel).unwrap().0;
            let lb = sample_loss(b.view(), Some(&Label::Multi(vec![0, 2])), TaskMode::Multilabel).unwrap().0;
            assert!(((la - lb) / (2.0 * h) - g[j]).abs() < 1e-9);
        }
        assert!(l > 0.0);
        assert!(sample_loss(logits.view(), Some(&Label::Class(0)), TaskMode::Multilabel).is_err());
        assert!(sample_loss(logits.view(), None, TaskMode::Multiclass).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.01);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
    }

    fn small_synth(seed: u64) -> crate::data::SyntheticData {
        let spec = SynthSpec { classes: 3, motif_dim: 4, set_length_range: (8, 15), seed, ..SynthSpec::default() };
        generate_synthetic(&spec, 60, 20, 20).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            p: 3,
            k: 6,
            epochs: 2,
            batch_size: 16,
            refit_max_iters: 300,
            kernel: KernelSpec::Gaussian { sigma: 2.0 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let data = small_synth(1);
        let cfg = TrainConfig { sigma_pos: Some(0.3), ..small_config() };
        let (model, _) = train_unsupervised(&data.train, Some(&data.val), &cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&model, &mut buf).unwrap();
        let back = read_checkpoint_from(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_checkpoint_to(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(model.embed_dataset(&data.test).unwrap(), back.embed_dataset(&data.test).unwrap());
        assert!(matches!(read_checkpoint_from(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint_from(bad.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = small_synth(2);
        let cfg = small_config();
        let (init, m0) = train_unsupervised(&data.train, Some(&data.val), &cfg).unwrap();
        let (out, m) =
            train_supervised(&data.train, Some(&data.val), &TrainConfig { epochs: 0, ..cfg }, &init, |_| {}).unwrap();
        assert_eq!(out.classifier, init.classifier);
        assert_eq!(m.best_val_acc, m0.best_val_acc);
        assert!(m.epochs.is_empty());
    }

    #[test]
    fn supervised_is_deterministic_and_not_worse_on_validation() {
        let data = small_synth(3);
        let cfg = small_config();
        let (init, m0) = train_unsupervised(&data.train, Some(&data.val), &cfg).unwrap();
        let run = || train_supervised(&data.train, Some(&data.val), &cfg, &init, |_| {}).unwrap();
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(ma, mb);
        assert_eq!(a.classifier, b.classifier);
        assert!(ma.best_val_acc >= m0.best_val_acc);
        let joint = TrainConfig { schedule: Schedule::Joint, ..cfg.clone() };
        let (_, m) = train_supervised(&data.train, Some(&data.val), &joint, &init, |_| {}).unwrap();
        assert_eq!(m.epochs.len(), 2);
    }

    #[test]
    fn unlabeled_data_is_rejected() {
        let ds =
            Dataset::new(vec![FeatureSet { features: Array2::ones((3, 2)), label: None }], 1, TaskMode::Multiclass)
                .unwrap();
        assert!(evaluate_scores(Array2::zeros((1, 1)).view(), &ds, &[1]).is_err());
    }
}

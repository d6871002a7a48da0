//! Optimal-transport kernel embedding (OTKE) for variable-size sets of
//! feature vectors.
//!
//! A set `x = (x_1, …, x_n)` is mapped through a Nyström feature map `ψ`,
//! aligned to one or more trainable references `z` with an entropic
//! transport plan, and pooled into a fixed `q × p × k` block:
//!
//! ```text
//! Φ_z(x) = √p · P(ψ(x), z)ᵀ ψ(x)
//! ```
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`ot`] | Sinkhorn (standard / log-domain, batched + masked), brute-force ε=0 oracle |
//! | [`kernel`] | Gaussian/linear kernels, Nyström map, k-mer one-hot features |
//! | [`cluster`] | Lloyd's K-means with k-means++ seeding |
//! | [`embed`] | reference bank, positional encoding, OT / dot-product pooling |
//! | [`reflearn`] | unsupervised reference learning (K-means, Wasserstein K-means) |
//! | [`autodiff`] | reverse-mode gradients through the unrolled graph |
//! | [`train`] | classifier, Adam, unsupervised and supervised training, evaluation, checkpoints |
//! | [`exact`] | exact K_OT / K_z kernels, W2 and surrogate distances, bound checks, Gram matrices |
//! | [`data`] | datasets, JSONL/sequence IO, padded batches, synthetic generator |
//! | [`config`] | INI-style run configuration used by the CLI |

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
pub mod cluster;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod exact;
pub mod kernel;
pub mod linalg;
pub mod ot;
pub mod reflearn;
pub mod train;

pub use error::{Error, Result};

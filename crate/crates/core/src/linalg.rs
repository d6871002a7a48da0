//! Dense symmetric eigen-decomposition helpers (backed by nalgebra).

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

pub fn sym_eig(m: ArrayView2<'_, f64>) -> SymEig {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    SymEig { values, vectors }
}

pub fn min_eigenvalue(m: ArrayView2<'_, f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eig(m).values[0]
}

/// `U diag(f(λ)) Uᵀ`.
pub fn spectral_apply(eig: &SymEig, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let scaled = &eig.vectors * &eig.values.mapv(f);
    scaled.dot(&eig.vectors.t())
}

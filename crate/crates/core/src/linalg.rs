//! Small dense linear-algebra helpers shared by the numerical modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Estimate the spectral norm ‖M‖₂ by power iteration on MᵀM.
///
/// Returns 0 for the zero matrix. Iterates until the relative change of the
/// estimate drops below `tol` or `iters` is exhausted.
pub fn power_iteration_spectral_norm(m: ArrayView2<f64>, iters: usize, tol: f64) -> f64 {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 || m.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // Deterministic, non-degenerate start vector.
    let mut v = Array1::from_shape_fn(cols, |i| 1.0 + 0.1 * ((i * 7919 % 97) as f64) / 97.0);
    let n = v.dot(&v).sqrt();
    v /= n;
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m.dot(&v);
        let mut w = m.t().dot(&mv);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            // Start vector fell in the null space; fall back to a basis sweep.
            return basis_sweep(m);
        }
        w /= wn;
        let next = m.dot(&w).dot(&m.dot(&w)).sqrt();
        let done = (next - sigma).abs() <= tol * next.max(1e-300);
        sigma = next;
        v = w;
        if done {
            break;
        }
    }
    sigma
}

fn basis_sweep(m: ArrayView2<f64>) -> f64 {
    // Largest column norm is a lower bound; used only when the start vector is annihilated.
    (0..m.ncols())
        .map(|j| m.column(j).dot(&m.column(j)).sqrt())
        .fold(0.0, f64::max)
}

/// Spectral norm with default settings (tight tolerance, generous iteration cap).
pub fn spectral_norm(m: ArrayView2<f64>) -> f64 {
    power_iteration_spectral_norm(m, 10_000, 1e-13)
}

/// Spectral radius of a square matrix by power iteration on M itself.
///
/// Only reliable when the dominant eigenvalue is real and simple in modulus,
/// which holds for positive (Perron) matrices such as softmax attention.
pub fn spectral_radius_positive(m: ArrayView2<f64>, iters: usize, tol: f64) -> f64 {
    let n = m.nrows();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let w = m.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        let next = wn;
        v = w / wn;
        if (next - lambda).abs() <= tol {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_slice(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Build a matrix from a row-major slice.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Option<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), data.to_vec()).ok()
}

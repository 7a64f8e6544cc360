//! Thin dense linear-algebra helpers shared by the solvers: symmetric
//! eigendecompositions, singular values, and a deterministic power iteration
//! for operator norms.
//!
//! Matrices live in `ndarray` throughout the crate; factorizations go through
//! `nalgebra` (pure Rust, no system LAPACK), so the adapters here copy.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Fixed seed for every internal randomized routine, so repeated runs of the
/// same problem produce bitwise-identical results.
pub const INTERNAL_SEED: u64 = 0x5ca1_ab1e_0000_0001;

pub fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending and
/// eigenvectors (columns) reordered to match.
pub fn symmetric_eigen_desc(q: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    assert_eq!(q.nrows(), q.ncols(), "eigendecomposition needs a square matrix");
    let n = q.nrows();
    let se = to_nalgebra(q).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let values = Array1::from_iter(order.iter().map(|&k| se.eigenvalues[k]));
    let vectors =
        Array2::from_shape_fn((n, n), |(i, j)| se.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Singular values of a dense matrix, sorted descending.
pub fn singular_values(a: &Array2<f64>) -> Array1<f64> {
    let mut sv: Vec<f64> = to_nalgebra(a)
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Array1::from_vec(sv)
}

/// Thin SVD `a = u · diag(s) · v_t` with singular values sorted descending,
/// `u` of shape m × k and `v_t` of shape k × n, k = min(m, n).
pub fn thin_svd(a: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let k = a.nrows().min(a.ncols());
    let svd = to_nalgebra(a).svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("finite singular values")
    });
    let s = Array1::from_iter(order.iter().map(|&i| svd.singular_values[i]));
    let u_out = Array2::from_shape_fn((a.nrows(), k), |(i, j)| u[(i, order[j])]);
    let vt_out = Array2::from_shape_fn((k, a.ncols()), |(i, j)| vt[(order[i], j)]);
    (u_out, s, vt_out)
}

/// Spectral norm ‖A‖₂ of a dense matrix (largest singular value).
pub fn matrix_spectral_norm(a: &Array2<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    singular_values(a)[0]
}

/// Power iteration on a self-map `g = F*∘F` over matrices of shape `shape`,
/// returning an estimate of the largest eigenvalue of g, i.e. ‖F‖₂².
///
/// Deterministic: the starting matrix is drawn from a fixed-seed RNG.
/// Converges when the eigenvalue estimate is stable to `rel_tol` or after
/// `max_iter` sweeps, whichever comes first.
pub fn power_iteration_sq_norm<G>(g: G, shape: (usize, usize), rel_tol: f64, max_iter: usize) -> f64
where
    G: Fn(&Array2<f64>) -> Array2<f64>,
{
    let mut rng = StdRng::seed_from_u64(INTERNAL_SEED);
    let mut x = Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let mut norm = frobenius(&x);
    if norm == 0.0 {
        return 0.0;
    }
    x.mapv_inplace(|v| v / norm);
    let mut lambda = 0.0_f64;
    for _ in 0..max_iter {
        let gx = g(&x);
        // Rayleigh quotient <x, Gx>; x is unit-Frobenius.
        let next: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        norm = frobenius(&gx);
        if norm == 0.0 {
            return 0.0;
        }
        x = gx.mapv(|v| v / norm);
        if (next - lambda).abs() <= rel_tol * next.abs().max(f64::MIN_POSITIVE) {
            return next.max(0.0);
        }
        lambda = next;
    }
    lambda.max(0.0)
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

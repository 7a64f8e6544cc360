//! Reference comparison methods: principal-component denoising, a polynomial
//! field model fitted through the degradation operator, and plain per-patch
//! least-squares weights for a fixed set of components.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::degrade::DegradationOp;
use crate::error::{RcaError, RcaResult};
use crate::field::{ObservationStack, Position, PsfMatrix};
use crate::linalg;

/// Projects each patch onto the top-`r` principal components of the
/// mean-centered stack and adds the mean back.
///
/// `r = 0` keeps only the mean patch; `r >=` the stack rank returns the
/// observations unchanged. Works on the observation grid (no downsampling).
pub fn pca_denoise(stack: &ObservationStack, r: usize) -> RcaResult<PsfMatrix> {
    let y = &stack.y;
    let (n, p) = y.dim();
    let mean = y.mean_axis(Axis(1)).expect("non-empty stack");
    if r >= n.min(p) {
        return PsfMatrix::new(y.clone(), stack.patch_shape);
    }
    let centered = y - &mean.view().insert_axis(Axis(1));
    let (u, _, _) = linalg::thin_svd(&centered);
    let u_r = u.slice(ndarray::s![.., ..r]);
    let recon = &u_r.dot(&u_r.t().dot(&centered)) + &mean.view().insert_axis(Axis(1));
    PsfMatrix::new(recon, stack.patch_shape)
}

/// Design matrix of all monomials `x^a y^b` with `a + b <= degree`, one
/// column per position; `(degree+1)(degree+2)/2` rows ordered
/// `for b { for a }` so degree 2 reads `[1, x, x^2, y, x y, y^2]`.
///
/// Each coordinate axis is affinely rescaled to `[-1, 1]` first to keep the
/// design conditioned; an axis with no spread maps to the constant +1.
pub fn monomial_weights(positions: &[Position], degree: usize) -> RcaResult<Array2<f64>> {
    if positions.is_empty() {
        return Err(RcaError::invalid("monomial design needs at least one position"));
    }
    let p = positions.len();
    let rescale = |vals: Vec<f64>| -> Vec<f64> {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            vec![1.0; vals.len()]
        } else {
            vals.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
        }
    };
    let xs = rescale(positions.iter().map(|u| u.x).collect());
    let ys = rescale(positions.iter().map(|u| u.y).collect());
    let q = (degree + 1) * (degree + 2) / 2;
    let mut a = Array2::zeros((q, p));
    for k in 0..p {
        let mut row = 0;
        for b in 0..=degree {
            for aa in 0..=(degree - b) {
                a[(row, k)] = xs[k].powi(aa as i32) * ys[k].powi(b as i32);
                row += 1;
            }
        }
    }
    Ok(a)
}

fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Nearest-neighbor upsampling of the column-mean patch to the HR grid.
fn upsampled_mean(stack: &ObservationStack, op: &DegradationOp) -> Array2<f64> {
    let mean = stack.y.mean_axis(Axis(1)).expect("non-empty stack");
    let (lr_r, lr_c) = op.lr_shape;
    let (hr_r, hr_c) = op.hr_shape;
    let m = op.m_d;
    let mut up = Array2::zeros((hr_r * hr_c, 1));
    for i in 0..hr_r {
        for j in 0..hr_c {
            up[(i * hr_c + j, 0)] = mean[(i / m).min(lr_r - 1) * lr_c + (j / m).min(lr_c - 1)];
        }
    }
    up
}

/// Fits the field model `Y ~ F((S0 + D) A)` with `A` a fixed monomial design
/// and `D` the ridge-regularized least-squares correction
/// `argmin 1/2 ||Y - F((S0 + D) A)||_F^2 + lambda ||D||_F^2`,
/// solved by conjugate gradient on the normal equations to 1e-8 relative.
///
/// `S0` is a rough first guess: component 0 (the constant monomial) holds the
/// nearest-neighbor-upsampled mean patch, all other components start at zero.
/// Returns `(S0 + D, A, F-free reconstruction (S0 + D) A)` without clamping.
pub fn polynomial_field_fit(
    stack: &ObservationStack,
    op: &DegradationOp,
    degree: usize,
    ridge_lambda: f64,
) -> RcaResult<(Array2<f64>, Array2<f64>, PsfMatrix)> {
    let p = stack.n_patches();
    if op.p() != p {
        return Err(RcaError::shape(format!(
            "operator covers {} patches but stack has {p}",
            op.p()
        )));
    }
    if op.n_y() != stack.n_pixels() {
        return Err(RcaError::shape(format!(
            "operator output has {} pixels but patches have {}",
            op.n_y(),
            stack.n_pixels()
        )));
    }
    if !ridge_lambda.is_finite() || ridge_lambda < 0.0 {
        return Err(RcaError::invalid("ridge weight must be finite and >= 0"));
    }
    let a = monomial_weights(&stack.positions, degree)?;
    let q = a.nrows();
    if ridge_lambda == 0.0 {
        let sv = linalg::singular_values(&a);
        if p < q || sv[sv.len() - 1] <= 1e-10 * sv[0] {
            return Err(RcaError::invalid(
                "monomial design is rank-deficient; a positive ridge weight is required",
            ));
        }
    }

    let mut s0 = Array2::zeros((op.n_x(), q));
    s0.column_mut(0).assign(&upsampled_mean(stack, op).column(0));

    // Normal equations (M*M + lambda I) D = M*(Y - F(S0 A)) for the map
    // M(D) = F(D A), M*(R) = F*(R) A^T, solved in the n_x x q matrix space.
    let normal = |d: &Array2<f64>| -> RcaResult<Array2<f64>> {
        let md = op.apply(&d.dot(&a))?;
        let mut out = op.apply_adjoint(&md)?.dot(&a.t());
        if ridge_lambda > 0.0 {
            out += &(d * ridge_lambda);
        }
        Ok(out)
    };
    let residual0 = &stack.y - &op.apply(&s0.dot(&a))?;
    let b = op.apply_adjoint(&residual0)?.dot(&a.t());
    let b_norm = linalg::frobenius(&b);

    let mut delta = Array2::zeros((op.n_x(), q));
    if b_norm > 0.0 {
        let mut res = b.clone();
        let mut dir = res.clone();
        let mut rs = frob_dot(&res, &res);
        for _ in 0..2000 {
            if rs.sqrt() <= 1e-8 * b_norm {
                break;
            }
            let nd = normal(&dir)?;
            let curv = frob_dot(&dir, &nd);
            if curv <= 0.0 {
                break; // numerically flat direction; accept the current iterate
            }
            let step = rs / curv;
            delta += &(&dir * step);
            res -= &(&nd * step);
            let rs_next = frob_dot(&res, &res);
            dir = &res + &(&dir * (rs_next / rs));
            rs = rs_next;
        }
    }

    let s = &s0 + &delta;
    let x = s.dot(&a);
    let psf = PsfMatrix::new(x, op.hr_shape)?;
    Ok((s, a, psf))
}

/// Per-patch least-squares weights for fixed components: for each patch `k`,
/// solves `argmin ||y_k - M_k S a_k||_2^2` through the normal equations with
/// a tiny ridge (1e-10) guard.
///
/// The per-patch model columns `M_k s_j` are produced with one operator
/// application per component by tiling that component across all patches.
pub fn rca_lsq_weights(
    y: &Array2<f64>,
    op: &DegradationOp,
    s: &Array2<f64>,
) -> RcaResult<Array2<f64>> {
    let p = op.p();
    if y.ncols() != p || y.nrows() != op.n_y() {
        return Err(RcaError::shape(format!(
            "observations must be {}x{}, got {}x{}",
            op.n_y(),
            p,
            y.nrows(),
            y.ncols()
        )));
    }
    if s.nrows() != op.n_x() || s.ncols() == 0 {
        return Err(RcaError::shape(format!(
            "components must be {}xr with r >= 1, got {}x{}",
            op.n_x(),
            s.nrows(),
            s.ncols()
        )));
    }
    let r = s.ncols();
    let mut model = Vec::with_capacity(r);
    for j in 0..r {
        let tiled = Array2::from_shape_fn((op.n_x(), p), |(i, _)| s[(i, j)]);
        model.push(op.apply(&tiled)?);
    }

    let cols: Vec<Array1<f64>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let mut bk = nalgebra::DMatrix::<f64>::zeros(op.n_y(), r);
            for j in 0..r {
                for i in 0..op.n_y() {
                    bk[(i, j)] = model[j][(i, k)];
                }
            }
            let mut gram = bk.transpose() * &bk;
            for j in 0..r {
                gram[(j, j)] += 1e-10;
            }
            let yk = nalgebra::DVector::from_iterator(op.n_y(), y.column(k).iter().copied());
            let rhs = bk.transpose() * yk;
            let sol = gram
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| gram.lu().solve(&rhs))
                .ok_or_else(|| {
                    RcaError::solver(format!("normal equations singular for patch {k}"))
                })?;
            Ok(Array1::from_iter(sol.iter().copied()))
        })
        .collect::<RcaResult<_>>()?;

    let mut a_hat = Array2::zeros((r, p));
    for (k, col) in cols.into_iter().enumerate() {
        a_hat.column_mut(k).assign(&col);
    }
    Ok(a_hat)
}

//! Shape diagnostics for PSF fields: central moments, ellipticity, size,
//! aggregate field errors, and signal-to-noise helpers.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{RcaError, RcaResult};
use crate::field::{column_as_image, PsfMatrix};
use crate::linalg;

/// Intensity centroid `(row, col)` of `image`.
///
/// Negative pixels are clamped to zero for this step only, so that noise
/// cannot push the total flux to zero or drag the centroid outside the
/// support; moments themselves are taken on the raw pixels.
pub fn centroid(image: &Array2<f64>) -> RcaResult<(f64, f64)> {
    let mut flux = 0.0;
    let mut row_acc = 0.0;
    let mut col_acc = 0.0;
    for ((i, j), &v) in image.indexed_iter() {
        let v = v.max(0.0);
        flux += v;
        row_acc += i as f64 * v;
        col_acc += j as f64 * v;
    }
    if flux <= 0.0 {
        return Err(RcaError::invalid(
            "centroid undefined: image has no positive flux",
        ));
    }
    Ok((row_acc / flux, col_acc / flux))
}

/// Central moment `mu_{p,q} = sum_{i,j} (i - i_c)^p (j - j_c)^q x[i, j]`,
/// with `i` the row index and `j` the column index.
pub fn central_moment(image: &Array2<f64>, p: u32, q: u32) -> RcaResult<f64> {
    let (ic, jc) = centroid(image)?;
    let mut acc = 0.0;
    for ((i, j), &v) in image.indexed_iter() {
        acc += (i as f64 - ic).powi(p as i32) * (j as f64 - jc).powi(q as i32) * v;
    }
    Ok(acc)
}

fn second_moments(image: &Array2<f64>) -> RcaResult<(f64, f64, f64, f64)> {
    let (ic, jc) = centroid(image)?;
    let (mut m00, mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0, 0.0);
    for ((i, j), &v) in image.indexed_iter() {
        let di = i as f64 - ic;
        let dj = j as f64 - jc;
        m00 += v;
        m20 += di * di * v;
        m02 += dj * dj * v;
        m11 += di * dj * v;
    }
    Ok((m00, m20, m02, m11))
}

/// Ellipticity vector `(e1, e2)` from second-order central moments:
/// `e1 = (mu20 - mu02) / (mu20 + mu02)`, `e2 = 2 mu11 / (mu20 + mu02)`.
pub fn ellipticity(image: &Array2<f64>) -> RcaResult<(f64, f64)> {
    let (_, m20, m02, m11) = second_moments(image)?;
    let denom = m20 + m02;
    if denom <= 0.0 {
        return Err(RcaError::invalid(
            "ellipticity undefined: second moments have no positive spread",
        ));
    }
    Ok(((m20 - m02) / denom, 2.0 * m11 / denom))
}

/// Root-mean-square spread about the centroid, in pixels:
/// `sqrt((mu20 + mu02) / mu00)`.
pub fn rms_size(image: &Array2<f64>) -> RcaResult<f64> {
    let (m00, m20, m02, _) = second_moments(image)?;
    if m00 <= 0.0 {
        return Err(RcaError::invalid("size undefined: non-positive total flux"));
    }
    let radicand = (m20 + m02) / m00;
    if radicand < 0.0 {
        return Err(RcaError::invalid(
            "size undefined: negative second-moment spread",
        ));
    }
    Ok(radicand.sqrt())
}

/// Per-PSF shape summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfShape {
    pub e1: f64,
    pub e2: f64,
    pub size: f64,
    /// Intensity centroid as `(row, col)`.
    pub centroid: (f64, f64),
}

/// Measures ellipticity, size, and centroid of a single image.
pub fn measure_shape(image: &Array2<f64>) -> RcaResult<PsfShape> {
    let c = centroid(image)?;
    let (e1, e2) = ellipticity(image)?;
    let size = rms_size(image)?;
    Ok(PsfShape {
        e1,
        e2,
        size,
        centroid: c,
    })
}

/// Nuclear norm (sum of singular values) of `mat`.
///
/// When the smaller dimension is at most two the singular values come from
/// the closed-form eigenvalues of the 2x2 Gram matrix, which keeps small
/// reference cases exact; larger matrices fall back to a full SVD.
pub fn nuclear_norm(mat: &Array2<f64>) -> f64 {
    let (m, n) = mat.dim();
    let k = m.min(n);
    if k == 0 {
        return 0.0;
    }
    if k <= 2 {
        let gram = if m <= n {
            mat.dot(&mat.t())
        } else {
            mat.t().dot(mat)
        };
        if k == 1 {
            return gram[(0, 0)].max(0.0).sqrt();
        }
        let mean = 0.5 * (gram[(0, 0)] + gram[(1, 1)]);
        let half_diff = 0.5 * (gram[(0, 0)] - gram[(1, 1)]);
        let disc = (half_diff * half_diff + gram[(0, 1)] * gram[(1, 0)]).max(0.0);
        let root = disc.sqrt();
        return (mean + root).max(0.0).sqrt() + (mean - root).max(0.0).sqrt();
    }
    linalg::singular_values(mat).sum()
}

/// Field-level comparison of a truth/estimate PSF pair.
#[derive(Debug, Clone)]
pub struct ShapeReport {
    pub truth: Vec<PsfShape>,
    pub estimate: Vec<PsfShape>,
    /// Mean Euclidean norm of the per-PSF ellipticity difference.
    pub e_gamma: f64,
    /// Nuclear norm of the 2 x p matrix of ellipticity differences.
    pub b_gamma: f64,
    /// Mean absolute size difference, in pixels.
    pub e_size: f64,
    /// Population standard deviation of the signed size differences.
    pub sigma_size: f64,
}

impl ShapeReport {
    /// One row per PSF followed by one aggregate row; per-PSF rows leave the
    /// aggregate columns empty and vice versa.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,index,e1_truth,e2_truth,size_truth,e1_estimate,e2_estimate,size_estimate,\
             e_gamma,b_gamma,e_size,sigma_size\n",
        );
        for (k, (t, e)) in self.truth.iter().zip(&self.estimate).enumerate() {
            out.push_str(&format!(
                "psf,{k},{},{},{},{},{},{},,,,\n",
                t.e1, t.e2, t.size, e.e1, e.e2, e.size
            ));
        }
        out.push_str(&format!(
            "aggregate,,,,,,,,{},{},{},{}\n",
            self.e_gamma, self.b_gamma, self.e_size, self.sigma_size
        ));
        out
    }
}

/// Compares two PSF fields shape-wise and aggregates the per-PSF errors.
pub fn field_errors(truth: &PsfMatrix, estimate: &PsfMatrix) -> RcaResult<ShapeReport> {
    if truth.x.dim() != estimate.x.dim() || truth.hr_shape != estimate.hr_shape {
        return Err(RcaError::shape(format!(
            "field mismatch: truth {:?} / {:?} vs estimate {:?} / {:?}",
            truth.x.dim(),
            truth.hr_shape,
            estimate.x.dim(),
            estimate.hr_shape
        )));
    }
    let p = truth.n_psfs();
    if p == 0 {
        return Err(RcaError::invalid("field comparison needs at least one PSF"));
    }
    let shapes: Vec<(PsfShape, PsfShape)> = (0..p)
        .into_par_iter()
        .map(|k| {
            let t = measure_shape(&column_as_image(&truth.x, k, truth.hr_shape))?;
            let e = measure_shape(&column_as_image(&estimate.x, k, estimate.hr_shape))?;
            Ok((t, e))
        })
        .collect::<RcaResult<_>>()?;

    let mut gamma = Array2::zeros((2, p));
    let mut e_gamma = 0.0;
    let mut e_size = 0.0;
    let mut size_diffs = Vec::with_capacity(p);
    for (k, (t, e)) in shapes.iter().enumerate() {
        let d1 = t.e1 - e.e1;
        let d2 = t.e2 - e.e2;
        gamma[(0, k)] = d1;
        gamma[(1, k)] = d2;
        e_gamma += d1.hypot(d2);
        let ds = t.size - e.size;
        e_size += ds.abs();
        size_diffs.push(ds);
    }
    e_gamma /= p as f64;
    e_size /= p as f64;
    let mean_ds = size_diffs.iter().sum::<f64>() / p as f64;
    let sigma_size = (size_diffs
        .iter()
        .map(|d| (d - mean_ds) * (d - mean_ds))
        .sum::<f64>()
        / p as f64)
        .sqrt();

    let (truth_shapes, estimate_shapes) = shapes.into_iter().unzip();
    Ok(ShapeReport {
        truth: truth_shapes,
        estimate: estimate_shapes,
        e_gamma,
        b_gamma: nuclear_norm(&gamma),
        e_size,
        sigma_size,
    })
}

/// Mean over PSFs of the squared reconstruction error normalized by the
/// squared flux of the matching truth column:
/// `mean_k ||x_hat_k - x_k||^2 / ||x_k||^2`.
pub fn mean_normalized_sq_error(truth: &PsfMatrix, estimate: &PsfMatrix) -> RcaResult<f64> {
    if truth.x.dim() != estimate.x.dim() {
        return Err(RcaError::shape(format!(
            "field mismatch: truth {:?} vs estimate {:?}",
            truth.x.dim(),
            estimate.x.dim()
        )));
    }
    let p = truth.n_psfs();
    if p == 0 {
        return Err(RcaError::invalid("field comparison needs at least one PSF"));
    }
    let mut acc = 0.0;
    for k in 0..p {
        let t = truth.x.column(k);
        let e = estimate.x.column(k);
        let norm_sq = t.dot(&t);
        if norm_sq <= 0.0 {
            return Err(RcaError::invalid(format!(
                "normalized error undefined: truth column {k} has zero norm"
            )));
        }
        let diff_sq = t
            .iter()
            .zip(e.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        acc += diff_sq / norm_sq;
    }
    Ok(acc / p as f64)
}

/// Signal-to-noise ratio `||s||^2 / (n sigma^2)`.
pub fn snr(signal: ArrayView1<'_, f64>, noise_sigma: f64, n: usize) -> f64 {
    let energy = signal.dot(&signal);
    energy / (n as f64 * noise_sigma * noise_sigma)
}

/// Noise level that realizes `target_snr` for `signal` over `n` samples:
/// `sigma = ||s|| / sqrt(n * target_snr)`.
pub fn noise_for_snr(signal: ArrayView1<'_, f64>, target_snr: f64, n: usize) -> RcaResult<f64> {
    if !(target_snr > 0.0) {
        return Err(RcaError::invalid(format!(
            "target SNR must be positive, got {target_snr}"
        )));
    }
    if n == 0 {
        return Err(RcaError::invalid("sample count must be positive"));
    }
    let norm = signal.dot(&signal).sqrt();
    if norm <= 0.0 {
        return Err(RcaError::invalid(
            "noise level undefined for an all-zero signal",
        ));
    }
    Ok(norm / (n as f64 * target_snr).sqrt())
}

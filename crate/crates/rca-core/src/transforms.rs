//! Sparsity dictionaries Φ_s applied to vectorized images: identity (pixel
//! domain) and the second-generation starlet — an undecimated isotropic
//! à-trous wavelet with the coarse scale dropped.
//!
//! Starlet forward, per scale j = 1..J with dilation 2^{j−1}:
//!   c_j = B_j c_{j−1}          (separable B₃-spline blur [1,4,6,4,1]/16)
//!   d_j = c_{j−1} − B_j c_j    (detail with smoothed reconstruction filter)
//! The output concatenates d_1..d_J; c_J is discarded. Boundaries use mirror
//! extension without edge duplication, so the blur matrix is *not* symmetric
//! and the adjoint is computed by scattering, not by re-blurring.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1};
use rayon::prelude::*;

use crate::error::{RcaError, RcaResult};

const B3: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index about the edge pixels (…, 2, 1, 0 | 0..n-1 | n-2, n-3, …).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur_line(input: ArrayView1<f64>, mut out: ArrayViewMut1<f64>, dil: usize) {
    let n = input.len();
    for i in 0..n {
        let mut acc = 0.0;
        for (t, &w) in B3.iter().enumerate() {
            let off = (t as isize - 2) * dil as isize;
            acc += w * input[mirror(i as isize + off, n)];
        }
        out[i] = acc;
    }
}

fn blur_line_adjoint(input: ArrayView1<f64>, mut out: ArrayViewMut1<f64>, dil: usize) {
    let n = input.len();
    out.fill(0.0);
    for i in 0..n {
        let v = input[i];
        for (t, &w) in B3.iter().enumerate() {
            let off = (t as isize - 2) * dil as isize;
            out[mirror(i as isize + off, n)] += w * v;
        }
    }
}

fn blur_image(img: &Array2<f64>, dil: usize) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        blur_line(img.column(j), tmp.column_mut(j), dil);
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        blur_line(tmp.row(i), out.row_mut(i), dil);
    }
    out
}

fn blur_image_adjoint(img: &Array2<f64>, dil: usize) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        blur_line_adjoint(img.row(i), tmp.row_mut(i), dil);
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        blur_line_adjoint(tmp.column(j), out.column_mut(j), dil);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SparsityDictionary {
    Identity { image_shape: (usize, usize) },
    Starlet2 { image_shape: (usize, usize), n_scales: usize },
}

/// Default scale count: ⌊log₂(min dimension)⌋ − 2, never below 2.
pub fn default_n_scales(image_shape: (usize, usize)) -> usize {
    let m = image_shape.0.min(image_shape.1).max(1);
    let log2 = (usize::BITS - 1 - m.leading_zeros()) as usize;
    log2.saturating_sub(2).max(2)
}

impl SparsityDictionary {
    pub fn identity(image_shape: (usize, usize)) -> Self {
        SparsityDictionary::Identity { image_shape }
    }

    pub fn starlet(image_shape: (usize, usize), n_scales: usize) -> RcaResult<Self> {
        if n_scales < 1 {
            return Err(RcaError::invalid("starlet needs at least one scale"));
        }
        let reach = 1usize << n_scales;
        if reach > image_shape.0.min(image_shape.1) {
            return Err(RcaError::invalid(format!(
                "{} starlet scales exceed a {}x{} image",
                n_scales, image_shape.0, image_shape.1
            )));
        }
        Ok(SparsityDictionary::Starlet2 { image_shape, n_scales })
    }

    pub fn image_shape(&self) -> (usize, usize) {
        match *self {
            SparsityDictionary::Identity { image_shape } => image_shape,
            SparsityDictionary::Starlet2 { image_shape, .. } => image_shape,
        }
    }

    pub fn n_pixels(&self) -> usize {
        let (r, c) = self.image_shape();
        r * c
    }

    pub fn n_coefficients(&self) -> usize {
        match *self {
            SparsityDictionary::Identity { .. } => self.n_pixels(),
            SparsityDictionary::Starlet2 { n_scales, .. } => n_scales * self.n_pixels(),
        }
    }

    /// Φ_s x for one vectorized image.
    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n_pixels(), "image length mismatch");
        match *self {
            SparsityDictionary::Identity { .. } => x.clone(),
            SparsityDictionary::Starlet2 { image_shape, n_scales } => {
                let n = self.n_pixels();
                let mut c = x
                    .clone()
                    .into_shape_with_order(image_shape)
                    .expect("image length matches shape");
                let mut out = Array1::<f64>::zeros(n_scales * n);
                for j in 0..n_scales {
                    let dil = 1usize << j;
                    let c_next = blur_image(&c, dil);
                    let detail = &c - &blur_image(&c_next, dil);
                    out.slice_mut(s![j * n..(j + 1) * n])
                        .assign(&detail.into_shape_with_order(n).expect("same size"));
                    c = c_next;
                }
                out
            }
        }
    }

    /// Φ_sᵀ c for one coefficient vector.
    pub fn adjoint(&self, coef: &Array1<f64>) -> Array1<f64> {
        assert_eq!(coef.len(), self.n_coefficients(), "coefficient length mismatch");
        match *self {
            SparsityDictionary::Identity { .. } => coef.clone(),
            SparsityDictionary::Starlet2 { image_shape, n_scales } => {
                let n = self.n_pixels();
                let band = |j: usize| {
                    coef.slice(s![j * n..(j + 1) * n])
                        .to_owned()
                        .into_shape_with_order(image_shape)
                        .expect("band size")
                };
                // d_j = (I − B_j²) c_{j−1} and c_j = B_j c_{j−1}, so the
                // adjoint accumulates uⱼ = dⱼ − Bⱼᵀ(Bⱼᵀ dⱼ) backwards through
                // the smoothing pyramid.
                let u = |j: usize| {
                    let d = band(j);
                    let dil = 1usize << j;
                    &d - &blur_image_adjoint(&blur_image_adjoint(&d, dil), dil)
                };
                let mut acc = u(n_scales - 1);
                for j in (0..n_scales - 1).rev() {
                    let dil = 1usize << j;
                    acc = blur_image_adjoint(&acc, dil) + u(j);
                }
                acc.into_shape_with_order(n).expect("image size")
            }
        }
    }

    /// Column-wise forward on an n_x × r matrix.
    pub fn forward_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        let cols: Vec<Array1<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|k| self.forward(&x.column(k).to_owned()))
            .collect();
        let mut out = Array2::<f64>::zeros((self.n_coefficients(), x.ncols()));
        for (k, col) in cols.into_iter().enumerate() {
            out.column_mut(k).assign(&col);
        }
        out
    }

    /// Column-wise adjoint on an n_coef × r matrix.
    pub fn adjoint_matrix(&self, coef: &Array2<f64>) -> Array2<f64> {
        let cols: Vec<Array1<f64>> = (0..coef.ncols())
            .into_par_iter()
            .map(|k| self.adjoint(&coef.column(k).to_owned()))
            .collect();
        let mut out = Array2::<f64>::zeros((self.n_pixels(), coef.ncols()));
        for (k, col) in cols.into_iter().enumerate() {
            out.column_mut(k).assign(&col);
        }
        out
    }

    /// (Φ_s ⊙ Φ_s)·X column-wise: every squared analysis weight, applied to
    /// each input column. Probes one delta image per pixel; chunks are summed
    /// in fixed order so the result is independent of thread scheduling.
    pub fn squared_apply(&self, x: &Array2<f64>) -> Array2<f64> {
        if let SparsityDictionary::Identity { .. } = self {
            return x.clone();
        }
        let n_x = self.n_pixels();
        let n_c = self.n_coefficients();
        let r = x.ncols();
        assert_eq!(x.nrows(), n_x, "image length mismatch");
        let chunk = 64usize;
        let starts: Vec<usize> = (0..n_x).step_by(chunk).collect();
        let partials: Vec<Array2<f64>> = starts
            .par_iter()
            .map(|&start| {
                let mut acc = Array2::<f64>::zeros((n_c, r));
                for pix in start..(start + chunk).min(n_x) {
                    let mut delta = Array1::<f64>::zeros(n_x);
                    delta[pix] = 1.0;
                    let resp = self.forward(&delta);
                    for (row, &w) in resp.iter().enumerate() {
                        if w != 0.0 {
                            let w2 = w * w;
                            for col in 0..r {
                                acc[(row, col)] += w2 * x[(pix, col)];
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = Array2::<f64>::zeros((n_c, r));
        for part in partials {
            out += &part;
        }
        out
    }

    /// Per-coefficient sum of squared analysis weights (row norms² of Φ_s).
    pub fn row_squared_sums(&self) -> Array1<f64> {
        let ones = Array2::<f64>::ones((self.n_pixels(), 1));
        self.squared_apply(&ones).column(0).to_owned()
    }
}

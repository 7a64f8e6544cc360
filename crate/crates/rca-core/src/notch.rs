//! Position-derived notch filters and the spatial-regularity machinery built
//! on them: the functionals Ψ (regular-grid convolution form) and Ψ̂
//! (irregular-position quadratic form vᵀQv with Q = PᵀP), eigen-dictionaries
//! of Q, the (e, a) search grid, and the greedy parameter selection that
//! initializes the spatial weights.
//!
//! Parameter roles: `e` is the distance-decay exponent (higher e → faster
//! decay → higher-frequency notch), `a` scales the center tap relative to
//! the neighbors (a = 1 makes P a graph Laplacian, so constants are
//! annihilated).

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{RcaError, RcaResult};
use crate::field::Position;
use crate::linalg::symmetric_eigen_desc;

// ── notch filters on a uniform 1-D grid ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NotchFilter {
    pub e: f64,
    pub a: f64,
    /// l2-normalized taps, symmetric about the center.
    pub taps: Array1<f64>,
    /// l2 norm of the raw (pre-normalization) taps.
    pub raw_norm: f64,
}

/// Builds the length-p notch filter from p = 2k+1 uniformly spaced positions:
/// off-center taps −1/|u_i−u_center|ᵉ, center tap Σ a/|u_j−u_center|ᵉ,
/// normalized to unit l2 norm.
pub fn notch_filter_1d(positions: &[f64], e: f64, a: f64) -> RcaResult<NotchFilter> {
    let p = positions.len();
    if p < 3 || p % 2 == 0 {
        return Err(RcaError::invalid(format!("filter length must be odd and ≥ 3, got {p}")));
    }
    if !e.is_finite() || e < 0.0 || !a.is_finite() {
        return Err(RcaError::invalid("filter parameters must be finite, e ≥ 0"));
    }
    let deltas: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    if mean_delta <= 0.0 {
        return Err(RcaError::invalid("positions must be strictly increasing"));
    }
    if deltas.iter().any(|&d| (d - mean_delta).abs() > 1e-9 * mean_delta) {
        return Err(RcaError::invalid("positions must be uniformly spaced"));
    }
    let k = p / 2;
    let mut raw = Array1::<f64>::zeros(p);
    let mut center = 0.0;
    for i in 0..p {
        if i == k {
            continue;
        }
        let d = (positions[i] - positions[k]).abs();
        raw[i] = -1.0 / d.powf(e);
        center += a / d.powf(e);
    }
    raw[k] = center;
    let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(NotchFilter { e, a, taps: raw.mapv(|v| v / raw_norm), raw_norm })
}

/// Centered correlation with zero boundary: out[j] = Σ_i v[i]·taps[j+k−i]
/// (0-based; taps index outside [0, p) contributes nothing).
pub fn convolve_centered(v: &Array1<f64>, taps: &Array1<f64>) -> Array1<f64> {
    let p = taps.len();
    let k = p / 2;
    let n = v.len();
    Array1::from_shape_fn(n, |j| {
        let mut acc = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            let t = j as isize + k as isize - i as isize;
            if t >= 0 && (t as usize) < p {
                acc += vi * taps[t as usize];
            }
        }
        acc
    })
}

/// Ψ(v) = ‖v ⋆ ψ‖₂² with the l2-normalized filter.
pub fn psi_regular(v: &Array1<f64>, filter: &NotchFilter) -> f64 {
    convolve_centered(v, &filter.taps).iter().map(|h| h * h).sum()
}

// ── irregular positions: Ψ̂ and the graph penalty ───────────────────────────

fn position_guard(positions: &[Position]) -> RcaResult<(f64, f64)> {
    if positions.len() < 2 {
        return Err(RcaError::invalid("need at least two positions"));
    }
    let mut min_d = f64::INFINITY;
    let mut max_d = 0.0_f64;
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            let d = positions[i].dist(&positions[j]);
            min_d = min_d.min(d);
            max_d = max_d.max(d);
        }
    }
    if min_d <= 1e-9 * max_d {
        return Err(RcaError::invalid(format!(
            "coincident or near-coincident positions (min distance {min_d:.3e}, diameter {max_d:.3e})"
        )));
    }
    Ok((min_d, max_d))
}

/// Ψ̂(v) = Σ_k (Σ_{i≠k} (a·v_k − v_i)/‖u_k−u_i‖ᵉ)².
pub fn psi_hat(v: &Array1<f64>, positions: &[Position], e: f64, a: f64) -> RcaResult<f64> {
    position_guard(positions)?;
    let p = positions.len();
    if v.len() != p {
        return Err(RcaError::shape("vector length must match position count"));
    }
    let mut total = 0.0;
    for k in 0..p {
        let mut inner = 0.0;
        for i in 0..p {
            if i == k {
                continue;
            }
            inner += (a * v[k] - v[i]) / positions[k].dist(&positions[i]).powf(e);
        }
        total += inner * inner;
    }
    Ok(total)
}

/// P, Q = PᵀP, and the eigen-basis of Q with eigenvalues sorted decreasing.
#[derive(Debug, Clone)]
pub struct GraphPenalty {
    pub e: f64,
    pub a: f64,
    pub p_mat: Array2<f64>,
    pub q: Array2<f64>,
    /// Orthonormal eigenvectors of Q, one per column, in eigenvalue order.
    pub v_block: Array2<f64>,
    /// Eigenvalues of Q, sorted decreasing.
    pub d: Array1<f64>,
}

/// P[i,j] = −1/‖u_i−u_j‖ᵉ off the diagonal, P[i,i] = Σ_{j≠i} a/‖u_i−u_j‖ᵉ,
/// so that ‖Pv‖² = Ψ̂(v); Q = PᵀP is symmetric positive-semidefinite.
pub fn build_graph_penalty(positions: &[Position], e: f64, a: f64) -> RcaResult<GraphPenalty> {
    position_guard(positions)?;
    if !e.is_finite() || e < 0.0 || !a.is_finite() {
        return Err(RcaError::invalid("graph parameters must be finite, e ≥ 0"));
    }
    let p = positions.len();
    let mut p_mat = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        let mut diag = 0.0;
        for j in 0..p {
            if i == j {
                continue;
            }
            let w = 1.0 / positions[i].dist(&positions[j]).powf(e);
            p_mat[(i, j)] = -w;
            diag += a * w;
        }
        p_mat[(i, i)] = diag;
    }
    let q = p_mat.t().dot(&p_mat);
    let (d, v_block) = symmetric_eigen_desc(&q);
    Ok(GraphPenalty { e, a, p_mat, q, v_block, d })
}

// ── parameter grid ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ParameterGrid {
    /// (e, a) candidates, e-major: index = i_e · n_a + i_a.
    pub points: Vec<(f64, f64)>,
    pub e_max: f64,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let root = self.find(self.0[x]);
            self.0[x] = root;
        }
        self.0[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

/// True when the graph with edges {(i,j) : d_ij⁻ᵉ ≥ 10⁻⁶ · max weight} is
/// connected; the max weight is attained at the minimum pairwise distance.
fn connected_at(positions: &[Position], e: f64, min_d: f64) -> bool {
    let p = positions.len();
    let mut uf = UnionFind::new(p);
    // weight ratio (d/min_d)^{-e} ≥ 1e-6  ⟺  d ≤ min_d · 1e6^{1/e}
    let cutoff = min_d * 1e6_f64.powf(1.0 / e);
    for i in 0..p {
        for j in (i + 1)..p {
            if positions[i].dist(&positions[j]) <= cutoff {
                uf.union(i, j);
            }
        }
    }
    let root = uf.find(0);
    (1..p).all(|i| uf.find(i) == root)
}

const GRID_N_E: usize = 15;
const GRID_N_A: usize = 10;

/// Default search box: e log-spaced over [1, e_max] (denser near 1), a linear
/// over [0, 2). e_max is the largest exponent, probed over a log sweep of
/// [1, 10], at which the thresholded proximity graph stays connected.
pub fn default_grid(positions: &[Position]) -> RcaResult<ParameterGrid> {
    let (min_d, _) = position_guard(positions)?;
    let mut e_max = 1.0_f64;
    for i in 0..64 {
        let e = 10.0_f64.powf(i as f64 / 63.0);
        if connected_at(positions, e, min_d) {
            e_max = e_max.max(e);
        }
    }
    let mut points = Vec::with_capacity(GRID_N_E * GRID_N_A);
    for i in 0..GRID_N_E {
        let e = e_max.powf(i as f64 / (GRID_N_E - 1) as f64);
        for j in 0..GRID_N_A {
            points.push((e, 2.0 * j as f64 / GRID_N_A as f64));
        }
    }
    Ok(ParameterGrid { points, e_max })
}

// ── greedy parameter selection ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct HarmonicDictionary {
    /// Winning (e_i, a_i) per component.
    pub params: Vec<(f64, f64)>,
    /// p × r·p concatenation of the winning eigenvector blocks.
    pub v: Array2<f64>,
    /// r × p initial weights: row i is the winning eigenvector of round i.
    pub a0: Array2<f64>,
    /// r × r·p one-hot code with α₀[i, i·p + k*] = 1.
    pub alpha0: Array2<f64>,
}

/// Greedy selection of r (e, a) pairs: each round scores every candidate by
/// J(R) = max_k ‖R·V_{e,a}[:,k]‖₂ against the current residual R, keeps the
/// winner (ties → lowest grid index, then lowest eigenvector index), and
/// removes the captured rank-one direction: R ← R − (R v*)v*ᵀ.
pub fn select_parameters(
    y: &Array2<f64>,
    positions: &[Position],
    r: usize,
    grid: &ParameterGrid,
) -> RcaResult<HarmonicDictionary> {
    let p = positions.len();
    if y.ncols() != p {
        return Err(RcaError::shape("observation columns must match position count"));
    }
    if r < 1 {
        return Err(RcaError::invalid("need at least one component"));
    }
    if r > p {
        return Err(RcaError::invalid(format!("cannot select {r} components from {p} patches")));
    }
    if grid.points.is_empty() {
        return Err(RcaError::invalid("empty parameter grid"));
    }
    let blocks: Vec<Array2<f64>> = grid
        .points
        .par_iter()
        .map(|&(e, a)| build_graph_penalty(positions, e, a).map(|gp| gp.v_block))
        .collect::<RcaResult<_>>()?;

    let mut resid = y.clone();
    let mut params = Vec::with_capacity(r);
    let mut a0 = Array2::<f64>::zeros((r, p));
    let mut alpha0 = Array2::<f64>::zeros((r, r * p));
    let mut v = Array2::<f64>::zeros((p, r * p));
    for round in 0..r {
        // ‖R v‖² = vᵀ(RᵀR)v: one Gram matrix per round, then a cheap
        // quadratic form per candidate eigenvector.
        let gram = resid.t().dot(&resid);
        let scored: Vec<(f64, usize)> = blocks
            .par_iter()
            .map(|block| {
                let gb = gram.dot(block);
                let mut best = (f64::NEG_INFINITY, 0usize);
                for k in 0..p {
                    let s: f64 = (0..p).map(|i| block[(i, k)] * gb[(i, k)]).sum();
                    if s > best.0 {
                        best = (s, k);
                    }
                }
                best
            })
            .collect();
        let mut win = (f64::NEG_INFINITY, 0usize, 0usize);
        for (gi, &(s, k)) in scored.iter().enumerate() {
            if s > win.0 {
                win = (s, gi, k);
            }
        }
        let (_, gi, k_star) = win;
        let v_star = blocks[gi].column(k_star).to_owned();
        params.push(grid.points[gi]);
        a0.row_mut(round).assign(&v_star);
        alpha0[(round, round * p + k_star)] = 1.0;
        v.slice_mut(ndarray::s![.., round * p..(round + 1) * p]).assign(&blocks[gi]);
        let rv = resid.dot(&v_star);
        for i in 0..resid.nrows() {
            for j in 0..p {
                resid[(i, j)] -= rv[i] * v_star[j];
            }
        }
    }
    Ok(HarmonicDictionary { params, v, a0, alpha0 })
}

// ── approximation gap bound (uniform 1-D grid, e > 1) ───────────────────────

/// Upper bound on |Ψ̂(v) − ‖v⋆ψ_raw‖²| for a uniform 1-D grid with spacing
/// `delta`, built from per-entry bounds b_j on the difference between the
/// exact position sums and the centered convolution: the scalar bound is
/// Σ_j b_j·(2|h_j| + b_j).
pub fn approximation_bound(v: &Array1<f64>, e: f64, a: f64, delta: f64) -> RcaResult<f64> {
    let p = v.len();
    if p < 3 || p % 2 == 0 {
        return Err(RcaError::invalid("bound needs odd length ≥ 3"));
    }
    if e <= 1.0 {
        return Err(RcaError::invalid("bound requires decay exponent e > 1"));
    }
    let k = p / 2; // p = 2k+1
    let vmax = v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    let scale = vmax / delta.powf(e);
    let pw = |n: usize| (n as f64).powf(1.0 - e);

    let mut b = Array1::<f64>::zeros(p);
    for j1 in 1..=p {
        // fold to the left half; the construction is symmetric
        let jm = j1.min(p + 1 - j1);
        let v_here = v[j1 - 1] != 0.0;
        let v_edge = if j1 <= k + 1 { v[0] != 0.0 } else { v[p - 1] != 0.0 };
        b[j1 - 1] = if jm == k + 1 {
            0.0
        } else if jm == 1 {
            (pw(k) - pw(p - 1)) / (e - 1.0) * scale
        } else {
            let a1 = (pw(p - jm + 1) + pw(jm - 1) - pw(k + 1) - pw(k)).abs();
            let a2 = (pw(p - jm) + pw(jm) - pw(k + 1) - pw(k)).abs();
            let mut t = pw(k) - pw(p - jm);
            if v_here {
                t += a1.max(a2) * a;
            }
            if v_edge {
                t += (e - 1.0) / ((jm - 1) as f64).powf(e);
            }
            t / (e - 1.0) * scale
        };
    }

    // h is the centered convolution with the *raw* (unnormalized) filter,
    // matching the scale of the Ψ̂ position sums.
    let positions: Vec<f64> = (0..p).map(|i| i as f64 * delta).collect();
    let filter = notch_filter_1d(&positions, e, a)?;
    let h = convolve_centered(v, &filter.taps.mapv(|t| t * filter.raw_norm));
    Ok(b.iter().zip(h.iter()).map(|(&bj, &hj)| bj * (2.0 * hj.abs() + bj)).sum())
}

/// |Ψ̂ − Ψ_raw| on a uniform 1-D grid (both sides of the bound above).
pub fn approximation_gap(v: &Array1<f64>, e: f64, a: f64, delta: f64) -> RcaResult<f64> {
    let p = v.len();
    let positions_1d: Vec<f64> = (0..p).map(|i| i as f64 * delta).collect();
    let positions: Vec<Position> =
        positions_1d.iter().map(|&x| Position::new(x, 0.0)).collect();
    let filter = notch_filter_1d(&positions_1d, e, a)?;
    let h = convolve_centered(v, &filter.taps.mapv(|t| t * filter.raw_norm));
    let psi_raw: f64 = h.iter().map(|x| x * x).sum();
    Ok((psi_hat(v, &positions, e, a)? - psi_raw).abs())
}

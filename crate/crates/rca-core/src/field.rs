//! Core data types for PSF fields: observation stacks, high-resolution PSF
//! matrices, the factorization X = S·α·Vᵀ, and dataset (de)serialization.
//!
//! Conventions used everywhere in this crate:
//! - images are vectorized row-major (row index varies slowest);
//! - one column per star patch / PSF;
//! - all pixel data is `f64` (the inverse problem is ill-conditioned enough
//!   that single precision is refused).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, RcaResult};

/// 2-D field position of a star (arbitrary but consistent units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn dist(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

fn check_positions(positions: &[Position]) -> RcaResult<()> {
    for (i, u) in positions.iter().enumerate() {
        if !u.x.is_finite() || !u.y.is_finite() {
            return Err(RcaError::invalid(format!("position {i} is not finite")));
        }
    }
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            if positions[i] == positions[j] {
                return Err(RcaError::invalid(format!(
                    "positions {i} and {j} coincide at ({}, {})",
                    positions[i].x, positions[i].y
                )));
            }
        }
    }
    Ok(())
}

fn check_finite(name: &str, m: &Array2<f64>) -> RcaResult<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(RcaError::invalid(format!("{name} contains a non-finite entry")));
    }
    Ok(())
}

/// Stack of p observed star patches: one vectorized patch per column of `y`,
/// with the catalog positions and the per-pixel white-noise level.
#[derive(Debug, Clone)]
pub struct ObservationStack {
    pub y: Array2<f64>,
    pub positions: Vec<Position>,
    pub patch_shape: (usize, usize),
    pub noise_sigma: f64,
}

impl ObservationStack {
    pub fn new(
        y: Array2<f64>,
        positions: Vec<Position>,
        patch_shape: (usize, usize),
        noise_sigma: f64,
    ) -> RcaResult<Self> {
        let (rows, cols) = patch_shape;
        if rows == 0 || cols == 0 {
            return Err(RcaError::shape("patch shape must be nonzero"));
        }
        if positions.is_empty() {
            return Err(RcaError::invalid("empty stack (no patches)"));
        }
        if y.ncols() != positions.len() {
            return Err(RcaError::shape(format!(
                "{} patch columns but {} positions",
                y.ncols(),
                positions.len()
            )));
        }
        if y.nrows() != rows * cols {
            return Err(RcaError::shape(format!(
                "{} pixel rows but patch shape {}x{}",
                y.nrows(),
                rows,
                cols
            )));
        }
        if !noise_sigma.is_finite() || noise_sigma < 0.0 {
            return Err(RcaError::invalid("noise sigma must be finite and >= 0"));
        }
        check_finite("observation matrix", &y)?;
        check_positions(&positions)?;
        Ok(ObservationStack { y, positions, patch_shape, noise_sigma })
    }

    pub fn n_patches(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_pixels(&self) -> usize {
        self.y.nrows()
    }
}

/// Matrix of p high-resolution PSFs, one vectorized image per column.
#[derive(Debug, Clone)]
pub struct PsfMatrix {
    pub x: Array2<f64>,
    pub hr_shape: (usize, usize),
}

impl PsfMatrix {
    pub fn new(x: Array2<f64>, hr_shape: (usize, usize)) -> RcaResult<Self> {
        if hr_shape.0 * hr_shape.1 != x.nrows() {
            return Err(RcaError::shape(format!(
                "{} pixel rows but image shape {}x{}",
                x.nrows(),
                hr_shape.0,
                hr_shape.1
            )));
        }
        check_finite("PSF matrix", &x)?;
        Ok(PsfMatrix { x, hr_shape })
    }

    pub fn n_psfs(&self) -> usize {
        self.x.ncols()
    }
}

/// Factorization X = S·A with A = α·Vᵀ: S holds the eigen-PSFs, α the sparse
/// spatial code over the harmonic dictionary V, and A the resolved weights.
#[derive(Debug, Clone)]
pub struct Factorization {
    /// Eigen-PSFs, n_x × r.
    pub s: Array2<f64>,
    /// Sparse code, r × N.
    pub alpha: Array2<f64>,
    /// Harmonic dictionary, p × N.
    pub v: Array2<f64>,
    /// Spatial weights A = α·Vᵀ, r × p.
    pub a: Array2<f64>,
    pub hr_shape: (usize, usize),
}

impl Factorization {
    /// Builds the factorization and derives A = α·Vᵀ.
    pub fn new(
        s: Array2<f64>,
        alpha: Array2<f64>,
        v: Array2<f64>,
        hr_shape: (usize, usize),
    ) -> RcaResult<Self> {
        if alpha.ncols() != v.ncols() {
            return Err(RcaError::shape(format!(
                "code has {} atoms but dictionary has {}",
                alpha.ncols(),
                v.ncols()
            )));
        }
        if s.ncols() != alpha.nrows() {
            return Err(RcaError::shape(format!(
                "{} components in S but {} code rows",
                s.ncols(),
                alpha.nrows()
            )));
        }
        if hr_shape.0 * hr_shape.1 != s.nrows() {
            return Err(RcaError::shape("component length does not match image shape"));
        }
        let a = alpha.dot(&v.t());
        Ok(Factorization { s, alpha, v, a, hr_shape })
    }

    pub fn r_effective(&self) -> usize {
        self.s.ncols()
    }
}

/// X = S·(α·Vᵀ). Entries may be slightly negative; the caller decides whether
/// to clamp (the full pipeline clamps its final output).
pub fn reconstruct(f: &Factorization) -> RcaResult<PsfMatrix> {
    let a = f.alpha.dot(&f.v.t());
    PsfMatrix::new(f.s.dot(&a), f.hr_shape)
}

// ── Dataset file format ─────────────────────────────────────────────────────
//
// One UTF-8 JSON header line, a newline, then the raw pixel payload as
// little-endian IEEE-754 f64: patch 1 fully (row-major), then patch 2, …
// The format round-trips finite doubles bit-exactly.

const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    p: usize,
    patch_rows: usize,
    patch_cols: usize,
    noise_sigma: f64,
    positions: Vec<[f64; 2]>,
}

pub fn save_dataset(stack: &ObservationStack, path: impl AsRef<Path>) -> RcaResult<()> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        p: stack.n_patches(),
        patch_rows: stack.patch_shape.0,
        patch_cols: stack.patch_shape.1,
        noise_sigma: stack.noise_sigma,
        positions: stack.positions.iter().map(|u| [u.x, u.y]).collect(),
    };
    let text = serde_json::to_string(&header)
        .map_err(|e| RcaError::format(format!("header encode: {e}")))?;
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    for col in stack.y.columns() {
        for &v in col.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> RcaResult<ObservationStack> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RcaError::format("missing header line"))?;
    let header_text = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| RcaError::format("header is not UTF-8"))?;
    let header: DatasetHeader = serde_json::from_str(header_text)
        .map_err(|e| RcaError::format(format!("malformed header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(RcaError::format(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    if header.positions.len() != header.p {
        return Err(RcaError::shape(format!(
            "header declares {} patches but lists {} positions",
            header.p,
            header.positions.len()
        )));
    }
    let n_y = header
        .patch_rows
        .checked_mul(header.patch_cols)
        .ok_or_else(|| RcaError::format("patch shape overflows"))?;
    let payload = &bytes[newline + 1..];
    let expected = header
        .p
        .checked_mul(n_y)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| RcaError::format("payload size overflows"))?;
    if payload.len() != expected {
        return Err(RcaError::format(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            expected
        )));
    }
    let mut y = Array2::<f64>::zeros((n_y, header.p));
    for k in 0..header.p {
        let base = k * n_y * 8;
        for i in 0..n_y {
            let off = base + i * 8;
            let v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            y[(i, k)] = v;
        }
    }
    let positions = header.positions.iter().map(|&[x, y]| Position::new(x, y)).collect();
    ObservationStack::new(y, positions, (header.patch_rows, header.patch_cols), header.noise_sigma)
}

/// Column k of a PSF/observation matrix viewed as an image, row-major.
pub fn column_as_image(m: &Array2<f64>, k: usize, shape: (usize, usize)) -> Array2<f64> {
    let col: Array1<f64> = m.column(k).to_owned();
    col.into_shape_with_order(shape).expect("column length matches image shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_positions(p: usize) -> Vec<Position> {
        (0..p).map(|k| Position::new(k as f64, 0.5 * k as f64)).collect()
    }

    #[test]
    fn stack_rejects_mismatched_positions() {
        let y = Array2::<f64>::zeros((16, 2));
        let err = ObservationStack::new(y, unit_positions(3), (4, 4), 0.0);
        assert!(matches!(err, Err(RcaError::Shape(_))));
    }

    #[test]
    fn stack_rejects_duplicate_positions() {
        let y = Array2::<f64>::zeros((4, 2));
        let pos = vec![Position::new(1.0, 2.0), Position::new(1.0, 2.0)];
        assert!(ObservationStack::new(y, pos, (2, 2), 0.0).is_err());
    }

    #[test]
    fn stack_rejects_non_finite_pixels() {
        let mut y = Array2::<f64>::zeros((4, 2));
        y[(1, 1)] = f64::NAN;
        assert!(ObservationStack::new(y, unit_positions(2), (2, 2), 0.0).is_err());
    }

    #[test]
    fn stack_rejects_empty() {
        let y = Array2::<f64>::zeros((4, 0));
        assert!(ObservationStack::new(y, vec![], (2, 2), 0.0).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.psfs");
        let y = Array2::from_shape_fn((16, 5), |(i, k)| {
            (i as f64 * 0.37 - k as f64 * 1.21).sin() * 1e-3 + k as f64
        });
        let stack = ObservationStack::new(y, unit_positions(5), (4, 4), 0.125).unwrap();
        save_dataset(&stack, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(stack.y, back.y);
        assert_eq!(stack.positions, back.positions);
        assert_eq!(stack.patch_shape, back.patch_shape);
        assert_eq!(stack.noise_sigma, back.noise_sigma);
    }

    #[test]
    fn two_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.psfs");
        let b = dir.path().join("b.psfs");
        let y = Array2::from_shape_fn((9, 3), |(i, k)| (i + 7 * k) as f64 * 0.013);
        let stack = ObservationStack::new(y, unit_positions(3), (3, 3), 0.01).unwrap();
        save_dataset(&stack, &a).unwrap();
        save_dataset(&stack, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn all_ones_stack_loads_as_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ones.psfs");
        let stack =
            ObservationStack::new(Array2::ones((16, 5)), unit_positions(5), (4, 4), 0.0).unwrap();
        save_dataset(&stack, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert!(back.y.iter().all(|&v| v == 1.0));
        assert_eq!(back.y.dim(), (16, 5));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.psfs");
        let y = Array2::<f64>::ones((4, 2));
        let stack = ObservationStack::new(y, unit_positions(2), (2, 2), 0.0).unwrap();
        save_dataset(&stack, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(RcaError::Format(_))));
    }

    #[test]
    fn header_patch_count_mismatch_is_rejected() {
        // Header says p=3 while only two patches' worth of payload follows.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.psfs");
        let header = r#"{"version":1,"p":3,"patch_rows":2,"patch_cols":2,"noise_sigma":0.0,"positions":[[0.0,0.0],[1.0,0.0],[2.0,0.0]]}"#;
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat(0u8).take(2 * 4 * 8));
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(RcaError::Format(_))));
    }

    #[test]
    fn reconstruct_identity_and_zero() {
        let eye = Array2::<f64>::eye(2);
        let f = Factorization::new(eye.clone(), eye.clone(), eye.clone(), (2, 1)).unwrap();
        assert_eq!(reconstruct(&f).unwrap().x, eye);

        let f0 =
            Factorization::new(eye.clone(), Array2::zeros((2, 2)), eye, (2, 1)).unwrap();
        assert!(reconstruct(&f0).unwrap().x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_matches_triple_loop() {
        let s = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 + 1.0) * (j as f64 - 0.5));
        let alpha = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.2 - 0.5);
        let v = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) as f64).cos());
        let f = Factorization::new(s.clone(), alpha.clone(), v.clone(), (2, 2)).unwrap();
        let x = reconstruct(&f).unwrap().x;

        let mut a = Array2::<f64>::zeros((2, 3));
        for i in 0..2 {
            for j in 0..3 {
                for n in 0..3 {
                    a[(i, j)] += alpha[(i, n)] * v[(j, n)];
                }
            }
        }
        let mut expect = Array2::<f64>::zeros((4, 3));
        for i in 0..4 {
            for j in 0..3 {
                for n in 0..2 {
                    expect[(i, j)] += s[(i, n)] * a[(n, j)];
                }
            }
        }
        for (got, want) in x.iter().zip(expect.iter()) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn reconstruct_is_linear_in_alpha() {
        let s = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.3 + 0.1);
        let alpha = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64 - j as f64) * 0.7);
        let v = Array2::<f64>::eye(3);
        let f1 = Factorization::new(s.clone(), alpha.clone(), v.clone(), (2, 2)).unwrap();
        let f2 = Factorization::new(s, alpha.mapv(|x| 2.5 * x), v, (2, 2)).unwrap();
        let x1 = reconstruct(&f1).unwrap().x;
        let x2 = reconstruct(&f2).unwrap().x;
        for (a, b) in x1.iter().zip(x2.iter()) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn column_as_image_is_row_major() {
        let m = array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        let img = column_as_image(&m, 0, (2, 2));
        assert_eq!(img, array![[1.0, 2.0], [3.0, 4.0]]);
    }
}

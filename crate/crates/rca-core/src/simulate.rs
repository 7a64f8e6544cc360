//! Synthetic PSF-field generator: smooth spatially-varying elliptical
//! Gaussians with an optional faint ring, plus noise injection and
//! degradation into an observation stack.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::degrade::build_operator;
use crate::error::{RcaError, RcaResult};
use crate::field::{ObservationStack, Position, PsfMatrix};

/// Spatial arrangement of the simulated stars over the unit-square field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    UniformRandom,
    Grid,
    /// Mostly uniform with extra stars packed near the four field corners.
    ClusteredCorners,
}

/// Parameters of the synthetic PSF family. All PSFs are unit-flux, strictly
/// positive elliptical Gaussians whose width and ellipticity drift smoothly
/// (degree-2 polynomials of position), optionally with a faint ring halo.
#[derive(Debug, Clone)]
pub struct FieldSpec {
    pub p: usize,
    pub hr_shape: (usize, usize),
    pub layout: Layout,
    /// Base Gaussian width in HR pixels; must exceed 0.5 (Nyquist-ish floor).
    pub sigma0: f64,
    /// Cap on the ellipticity-vector magnitude; must stay below 0.9.
    pub eps_max: f64,
    /// Relative amplitude of the spatial width modulation, in [0, 0.9].
    pub variation: f64,
    /// Peak height of the ring halo relative to the Gaussian peak; 0 disables.
    pub ring_amplitude: f64,
    /// Ring radius range (min, max) in HR pixels; the radius drifts smoothly
    /// across the field within this band.
    pub ring_radius: (f64, f64),
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            p: 200,
            hr_shape: (32, 32),
            layout: Layout::UniformRandom,
            sigma0: 2.5,
            eps_max: 0.3,
            variation: 0.2,
            ring_amplitude: 0.15,
            ring_radius: (5.0, 9.0),
            seed: 0,
        }
    }
}

impl FieldSpec {
    fn validate(&self) -> RcaResult<()> {
        if self.p == 0 {
            return Err(RcaError::invalid("field needs at least one PSF"));
        }
        if self.hr_shape.0 == 0 || self.hr_shape.1 == 0 {
            return Err(RcaError::shape("HR patch shape must be nonzero"));
        }
        if !(self.sigma0 > 0.5) {
            return Err(RcaError::invalid(format!(
                "base width must exceed 0.5 px, got {}",
                self.sigma0
            )));
        }
        if !(0.0..0.9).contains(&self.eps_max) {
            return Err(RcaError::invalid(format!(
                "ellipticity amplitude must lie in [0, 0.9), got {}",
                self.eps_max
            )));
        }
        if !(0.0..=0.9).contains(&self.variation) {
            return Err(RcaError::invalid(format!(
                "width variation must lie in [0, 0.9], got {}",
                self.variation
            )));
        }
        if !(self.ring_amplitude >= 0.0) || !self.ring_amplitude.is_finite() {
            return Err(RcaError::invalid("ring amplitude must be finite and >= 0"));
        }
        let (lo, hi) = self.ring_radius;
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(RcaError::invalid(format!(
                "ring radius range must satisfy 0 < min <= max, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Degree-2 polynomial field over the unit square: six coefficients
/// normalized to unit l1 mass, evaluated on coordinates rescaled to
/// [-1, 1]^2, so values stay within [-1, 1].
#[derive(Debug, Clone, Copy)]
struct SmoothField {
    c: [f64; 6],
}

impl SmoothField {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut c = [0.0; 6];
        loop {
            let mut mass = 0.0;
            for v in &mut c {
                *v = rng.gen_range(-1.0_f64..1.0);
                mass += (*v).abs();
            }
            if mass > 1e-8 {
                for v in &mut c {
                    *v /= mass;
                }
                return SmoothField { c };
            }
        }
    }

    fn eval(&self, u: &Position) -> f64 {
        let x = 2.0 * u.x - 1.0;
        let y = 2.0 * u.y - 1.0;
        self.c[0]
            + self.c[1] * x
            + self.c[2] * x * x
            + self.c[3] * y
            + self.c[4] * x * y
            + self.c[5] * y * y
    }
}

fn draw_positions(spec: &FieldSpec, rng: &mut ChaCha8Rng) -> Vec<Position> {
    // Reflect into [0, 1] without clamping, so jittered points cannot collide.
    let reflect = |v: f64| -> f64 {
        let v = v.abs();
        if v > 1.0 {
            2.0 - v
        } else {
            v
        }
    };
    match spec.layout {
        Layout::UniformRandom => (0..spec.p)
            .map(|_| Position::new(rng.gen::<f64>(), rng.gen::<f64>()))
            .collect(),
        Layout::Grid => {
            let side = (spec.p as f64).sqrt().ceil() as usize;
            (0..spec.p)
                .map(|k| {
                    let (i, j) = (k / side, k % side);
                    Position::new(
                        (i as f64 + 0.5) / side as f64,
                        (j as f64 + 0.5) / side as f64,
                    )
                })
                .collect()
        }
        Layout::ClusteredCorners => {
            let n_corner = (spec.p * 3 / 10).max(spec.p.min(4));
            let n_uniform = spec.p - n_corner;
            let corners = [(0.05, 0.05), (0.05, 0.95), (0.95, 0.05), (0.95, 0.95)];
            let mut out: Vec<Position> = (0..n_uniform)
                .map(|_| Position::new(rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            for k in 0..n_corner {
                let (cx, cy) = corners[k % 4];
                let jx: f64 = StandardNormal.sample(rng);
                let jy: f64 = StandardNormal.sample(rng);
                out.push(Position::new(
                    reflect(cx + 0.03 * jx),
                    reflect(cy + 0.03 * jy),
                ));
            }
            out
        }
    }
}

/// Radial standard deviation of the ring halo. Optical diffraction rings are
/// resolved features of roughly the core width, so the cross-section is kept
/// wider than one pixel.
const RING_WIDTH: f64 = 1.5;

/// Renders one unit-flux PSF: elliptical Gaussian with covariance
/// `sigma^2 [[1 + e1, e2], [e2, 1 - e1]]` (rows first), plus an optional
/// circular ring `amp * exp(-(rho - r0)^2 / (2 RING_WIDTH^2))`.
fn render_psf(
    shape: (usize, usize),
    sigma: f64,
    e1: f64,
    e2: f64,
    ring_amplitude: f64,
    ring_radius: f64,
) -> Vec<f64> {
    let (rows, cols) = shape;
    let (rc, cc) = ((rows - 1) as f64 / 2.0, (cols - 1) as f64 / 2.0);
    let s2 = sigma * sigma;
    // Inverse covariance of sigma^2 [[1+e1, e2], [e2, 1-e1]].
    let det = s2 * s2 * (1.0 - e1 * e1 - e2 * e2);
    let (q_rr, q_cc, q_rc) = (
        s2 * (1.0 - e1) / det,
        s2 * (1.0 + e1) / det,
        -s2 * e2 / det,
    );
    let mut img = Vec::with_capacity(rows * cols);
    let mut flux = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let dr = i as f64 - rc;
            let dc = j as f64 - cc;
            let quad = q_rr * dr * dr + 2.0 * q_rc * dr * dc + q_cc * dc * dc;
            let mut v = (-0.5 * quad).exp();
            if ring_amplitude > 0.0 {
                let rho = (dr * dr + dc * dc).sqrt();
                let t = (rho - ring_radius) / RING_WIDTH;
                v += ring_amplitude * (-0.5 * t * t).exp();
            }
            flux += v;
            img.push(v);
        }
    }
    for v in &mut img {
        *v /= flux;
    }
    img
}

/// Generates a smooth synthetic PSF field: one unit-flux HR patch per star,
/// deterministic in `spec.seed`.
pub fn generate_field(spec: &FieldSpec) -> RcaResult<(PsfMatrix, Vec<Position>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let positions = draw_positions(spec, &mut rng);
    let width_field = SmoothField::draw(&mut rng);
    let e1_field = SmoothField::draw(&mut rng);
    let e2_field = SmoothField::draw(&mut rng);
    let ring_field = SmoothField::draw(&mut rng);

    // Scale the ellipticity pair by eps_max / sqrt(2) so its magnitude never
    // reaches eps_max and the covariance stays positive definite.
    let e_scale = spec.eps_max / 2.0_f64.sqrt();
    let (r_lo, r_hi) = spec.ring_radius;
    let n = spec.hr_shape.0 * spec.hr_shape.1;
    let columns: Vec<Vec<f64>> = positions
        .par_iter()
        .map(|u| {
            let sigma = spec.sigma0 * (1.0 + spec.variation * width_field.eval(u));
            let r0 = r_lo + 0.5 * (r_hi - r_lo) * (ring_field.eval(u) + 1.0);
            render_psf(
                spec.hr_shape,
                sigma,
                e_scale * e1_field.eval(u),
                e_scale * e2_field.eval(u),
                spec.ring_amplitude,
                r0,
            )
        })
        .collect();
    let mut x = Array2::zeros((n, spec.p));
    for (k, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            x[(i, k)] = v;
        }
    }
    let psf = PsfMatrix::new(x, spec.hr_shape)?;
    Ok((psf, positions))
}

/// Controls for turning a truth field into observations.
#[derive(Debug, Clone, Copy)]
pub struct DegradeOptions {
    /// Downsampling factor (1 keeps the HR grid).
    pub m_d: usize,
    /// Target signal-to-noise ratio; `None` leaves the stack noiseless.
    pub snr: Option<f64>,
    /// Draw random sub-pixel shifts (uniform in [-0.5, 0.5) LR pixels per
    /// axis); `false` keeps every patch registered.
    pub apply_shifts: bool,
    pub seed: u64,
}

impl Default for DegradeOptions {
    fn default() -> Self {
        DegradeOptions {
            m_d: 1,
            snr: None,
            apply_shifts: true,
            seed: 0,
        }
    }
}

/// Applies per-star shift + downsampling and white Gaussian noise sized so
/// the field-mean signal norm realizes the target SNR. Deterministic in
/// `opts.seed`.
pub fn degrade_field(
    truth: &PsfMatrix,
    positions: &[Position],
    opts: &DegradeOptions,
) -> RcaResult<ObservationStack> {
    let p = truth.n_psfs();
    if positions.len() != p {
        return Err(RcaError::shape(format!(
            "{} positions for {} PSFs",
            positions.len(),
            p
        )));
    }
    if let Some(t) = opts.snr {
        if !(t > 0.0) || !t.is_finite() {
            return Err(RcaError::invalid(format!(
                "target SNR must be positive and finite, got {t}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shifts: Vec<(f64, f64)> = if opts.apply_shifts {
        (0..p)
            .map(|_| {
                let lr_r: f64 = rng.gen::<f64>() - 0.5;
                let lr_c: f64 = rng.gen::<f64>() - 0.5;
                (lr_r * opts.m_d as f64, lr_c * opts.m_d as f64)
            })
            .collect()
    } else {
        vec![(0.0, 0.0); p]
    };
    let op = build_operator(&shifts, opts.m_d, truth.hr_shape)?;
    let mut y = op.apply(&truth.x)?;
    let sigma = match opts.snr {
        None => 0.0,
        Some(t) => {
            let mean_norm = y
                .axis_iter(Axis(1))
                .map(|col| col.dot(&col).sqrt())
                .sum::<f64>()
                / p as f64;
            let sigma = mean_norm / (op.n_y() as f64 * t).sqrt();
            for v in y.iter_mut() {
                let draw: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * draw;
            }
            sigma
        }
    };
    ObservationStack::new(y, positions.to_vec(), op.lr_shape, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_abs_diff_eq;
    use ndarray::s;

    fn small_spec() -> FieldSpec {
        FieldSpec {
            p: 24,
            hr_shape: (16, 16),
            seed: 42,
            ..FieldSpec::default()
        }
    }

    #[test]
    fn every_psf_has_unit_flux_and_positive_pixels() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        assert_eq!(positions.len(), 24);
        for k in 0..24 {
            let col = field.x.column(k);
            assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-9);
            assert!(col.iter().all(|&v| v > 0.0), "PSF {k} has a zero pixel");
        }
    }

    #[test]
    fn constant_spec_yields_identical_columns() {
        let spec = FieldSpec {
            p: 6,
            hr_shape: (12, 12),
            eps_max: 0.0,
            variation: 0.0,
            ring_amplitude: 0.0,
            seed: 3,
            ..FieldSpec::default()
        };
        let (field, _) = generate_field(&spec).unwrap();
        let first = field.x.column(0).to_owned();
        for k in 1..6 {
            assert_eq!(field.x.column(k), first.view());
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = small_spec();
        let (a, pa) = generate_field(&spec).unwrap();
        let (b, pb) = generate_field(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(pa, pb);
        let other = FieldSpec { seed: 43, ..spec };
        let (c, _) = generate_field(&other).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn layouts_cover_the_unit_square() {
        for layout in [Layout::UniformRandom, Layout::Grid, Layout::ClusteredCorners] {
            let spec = FieldSpec {
                p: 50,
                layout,
                seed: 9,
                ..small_spec()
            };
            let (_, positions) = generate_field(&spec).unwrap();
            assert_eq!(positions.len(), 50);
            for u in &positions {
                assert!((0.0..=1.0).contains(&u.x) && (0.0..=1.0).contains(&u.y));
            }
        }
    }

    #[test]
    fn corner_layout_piles_stars_near_corners() {
        let spec = FieldSpec {
            p: 40,
            layout: Layout::ClusteredCorners,
            seed: 5,
            ..small_spec()
        };
        let (_, positions) = generate_field(&spec).unwrap();
        let near_corner = positions
            .iter()
            .filter(|u| {
                let dx = u.x.min(1.0 - u.x);
                let dy = u.y.min(1.0 - u.y);
                dx < 0.15 && dy < 0.15
            })
            .count();
        assert!(near_corner >= 10, "only {near_corner} stars near corners");
    }

    #[test]
    fn smooth_field_compresses_to_low_rank() {
        let spec = FieldSpec {
            p: 80,
            seed: 17,
            ..FieldSpec::default()
        };
        let (field, _) = generate_field(&spec).unwrap();
        let sv = linalg::singular_values(&field.x);
        let total: f64 = sv.iter().map(|v| v * v).sum();
        let top10: f64 = sv.slice(s![..10]).iter().map(|v| v * v).sum();
        assert!(
            top10 / total >= 0.999,
            "rank-10 energy ratio {} below 0.999",
            top10 / total
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = small_spec();
        for bad in [
            FieldSpec { p: 0, ..base.clone() },
            FieldSpec { sigma0: 0.5, ..base.clone() },
            FieldSpec { eps_max: 0.95, ..base.clone() },
            FieldSpec { variation: 1.5, ..base.clone() },
            FieldSpec { ring_radius: (0.0, 4.0), ..base.clone() },
            FieldSpec { ring_radius: (5.0, 4.0), ..base.clone() },
        ] {
            assert!(generate_field(&bad).is_err());
        }
    }

    #[test]
    fn registered_noiseless_identity_returns_truth() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        let stack = degrade_field(
            &field,
            &positions,
            &DegradeOptions {
                m_d: 1,
                snr: None,
                apply_shifts: false,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(stack.y, field.x);
        assert_eq!(stack.noise_sigma, 0.0);
        assert_eq!(stack.patch_shape, field.hr_shape);
    }

    #[test]
    fn downsampling_conserves_flux() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        let stack = degrade_field(
            &field,
            &positions,
            &DegradeOptions {
                m_d: 2,
                snr: None,
                apply_shifts: false,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(stack.patch_shape, (8, 8));
        for k in 0..field.n_psfs() {
            assert_abs_diff_eq!(stack.y.column(k).sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn degradation_is_seed_deterministic() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        let opts = DegradeOptions {
            m_d: 2,
            snr: Some(20.0),
            apply_shifts: true,
            seed: 11,
        };
        let a = degrade_field(&field, &positions, &opts).unwrap();
        let b = degrade_field(&field, &positions, &opts).unwrap();
        assert_eq!(a.y, b.y);
        let c = degrade_field(&field, &positions, &DegradeOptions { seed: 12, ..opts }).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn realized_snr_matches_target() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        let clean = degrade_field(
            &field,
            &positions,
            &DegradeOptions {
                m_d: 2,
                snr: None,
                apply_shifts: false,
                seed: 0,
            },
        )
        .unwrap();
        let target = 25.0;
        let mut noise_sq = 0.0;
        let mut samples = 0usize;
        let mut sigma_used = 0.0;
        for trial in 0..100u64 {
            let stack = degrade_field(
                &field,
                &positions,
                &DegradeOptions {
                    m_d: 2,
                    snr: Some(target),
                    apply_shifts: false,
                    seed: 1000 + trial,
                },
            )
            .unwrap();
            let diff = &stack.y - &clean.y;
            noise_sq += diff.iter().map(|v| v * v).sum::<f64>();
            samples += diff.len();
            sigma_used = stack.noise_sigma;
        }
        let sigma_hat = (noise_sq / samples as f64).sqrt();
        assert_abs_diff_eq!(sigma_hat, sigma_used, epsilon = 0.05 * sigma_used);
        let mean_norm = clean
            .y
            .axis_iter(Axis(1))
            .map(|col| col.dot(&col).sqrt())
            .sum::<f64>()
            / clean.n_patches() as f64;
        let realized = mean_norm * mean_norm / (clean.n_pixels() as f64 * sigma_hat * sigma_hat);
        assert_abs_diff_eq!(realized, target, epsilon = 0.05 * target);
    }

    #[test]
    fn position_count_mismatch_is_rejected() {
        let (field, positions) = generate_field(&small_spec()).unwrap();
        let err = degrade_field(
            &field,
            &positions[..10],
            &DegradeOptions::default(),
        )
        .unwrap_err();
        assert!(err.is_data_error());
        assert!(degrade_field(
            &field,
            &positions,
            &DegradeOptions { snr: Some(0.0), ..DegradeOptions::default() }
        )
        .is_err());
    }
}

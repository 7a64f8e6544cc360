//! Alternating-minimization driver: dictionary selection, noise-calibrated
//! threshold propagation, re-weighted sparse component solves, support-capped
//! weight updates, row normalization, and component pruning.

use ndarray::{Array2, Axis};

use crate::degrade::{build_operator, estimate_shifts, spectral_norm, DegradationOp};
use crate::error::{RcaError, RcaResult};
use crate::field::{Factorization, ObservationStack, PsfMatrix};
use crate::linalg::{matrix_spectral_norm, power_iteration_sq_norm, singular_values};
use crate::notch::{default_grid, select_parameters, ParameterGrid};
use crate::prox::{solve_alpha_step, solve_s_step, ProxContext, SupportRule, SupportSchedule};
use crate::transforms::{default_n_scales, SparsityDictionary};

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictKind {
    /// Sparsity measured directly on pixels.
    Identity,
    /// Sparsity measured on 2-D starlet detail coefficients.
    Starlet { n_scales: Option<usize> },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverBudget {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for SolverBudget {
    fn default() -> Self {
        SolverBudget { max_iters: 500, rel_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct RcaConfig {
    /// Number of components to start from; `None` estimates it from the
    /// spectrum of the observations.
    pub r_init: Option<usize>,
    /// Detection level in propagated-noise sigmas.
    pub kappa: f64,
    /// Re-weighted component solves per outer round.
    pub j_max: usize,
    /// Outer alternating rounds.
    pub k_max: usize,
    /// Super-resolution factor; 1 disables shift registration.
    pub m_d: usize,
    pub dict_kind: DictKind,
    /// Search box for the proximity-penalty parameters; `None` derives it
    /// from the observation positions.
    pub grid: Option<ParameterGrid>,
    pub s_step: SolverBudget,
    pub alpha_step: SolverBudget,
}

impl Default for RcaConfig {
    fn default() -> Self {
        RcaConfig {
            r_init: None,
            kappa: 3.0,
            j_max: 3,
            k_max: 5,
            m_d: 1,
            dict_kind: DictKind::Starlet { n_scales: None },
            grid: None,
            s_step: SolverBudget::default(),
            alpha_step: SolverBudget::default(),
        }
    }
}

/// Number of principal directions of the mean-centered observations whose
/// singular value exceeds the white-noise bulk edge σ(√n_y + √p), clamped to
/// [1, 15] and to the patch count.
pub fn default_r_init(stack: &ObservationStack) -> usize {
    let (n_y, p) = stack.y.dim();
    let mut centered = stack.y.clone();
    for mut row in centered.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / p as f64;
        row.mapv_inplace(|v| v - mean);
    }
    let sv = singular_values(&centered);
    let floor = stack.noise_sigma * ((n_y as f64).sqrt() + (p as f64).sqrt());
    let count = sv.iter().filter(|&&s| s > floor).count();
    count.clamp(1, 15).min(p)
}

// ── noise propagation and re-weighting ──────────────────────────────────────

/// Entrywise standard deviation of the noise term μ·Φ_s F*(B) Aᵀ for white
/// noise B of std `noise_sigma`: μ·√((Φ_s⊙Φ_s)·F²*(var B)·(Aᵀ⊙Aᵀ)).
/// Returns an n_coefficients × r matrix.
pub fn propagate_noise(
    op: &DegradationOp,
    noise_sigma: f64,
    a: &Array2<f64>,
    dict: &SparsityDictionary,
    mu: f64,
) -> RcaResult<Array2<f64>> {
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(RcaError::invalid("noise level must be finite and nonnegative"));
    }
    if !mu.is_finite() || mu <= 0.0 {
        return Err(RcaError::invalid("step size must be finite and positive"));
    }
    if a.ncols() != op.p() {
        return Err(RcaError::shape(format!(
            "weight matrix must have {} columns, got {}",
            op.p(),
            a.ncols()
        )));
    }
    if dict.n_pixels() != op.n_x() {
        return Err(RcaError::shape("dictionary pixel count does not match operator"));
    }
    let var_b = Array2::from_elem((op.n_y(), op.p()), noise_sigma * noise_sigma);
    let back = op.apply_squared_adjoint(&var_b)?;
    let a_sq = a.mapv(|v| v * v);
    let base = back.dot(&a_sq.t());
    let through_dict = dict.squared_apply(&base);
    Ok(through_dict.mapv(|v| mu * v.max(0.0).sqrt()))
}

/// Per-outer-round threshold state: propagated noise Σ, thresholds
/// λ = (κ/μ)Σ, and re-weighting multipliers β ∈ (0,1]. The sparsity weights
/// handed to the component solver are W = κ·β⊙λ.
#[derive(Debug, Clone)]
pub struct WeightState {
    pub sigma: Array2<f64>,
    pub lambda: Array2<f64>,
    pub beta: Array2<f64>,
    pub kappa: f64,
}

impl WeightState {
    pub fn fresh(sigma: Array2<f64>, kappa: f64, mu: f64) -> Self {
        let lambda = sigma.mapv(|v| v * kappa / mu);
        let beta = Array2::from_elem(sigma.dim(), 1.0);
        WeightState { sigma, lambda, beta, kappa }
    }

    pub fn weights(&self) -> Array2<f64> {
        let mut w = &self.beta * &self.lambda;
        w.mapv_inplace(|v| v * self.kappa);
        w
    }
}

/// Entrywise threshold-then-shrink: 0 where |s| ≤ κΣ, else s − sign(s)·κΣ.
pub fn hard_soft_denoise(s_raw: &Array2<f64>, sigma: &Array2<f64>, kappa: f64) -> Array2<f64> {
    let mut out = s_raw.clone();
    out.zip_mut_with(sigma, |v, &sg| {
        let t = kappa * sg;
        *v = if v.abs() <= t { 0.0 } else { *v - v.signum() * t };
    });
    out
}

/// β = 1/(1 + |Φ_s S| / max(κλ, ε)) entrywise, with ε = 1e-12·max(κλ) so
/// zero thresholds do not divide by zero. Large coefficients get small
/// weights, debiasing the l1 shrinkage; noise-level entries keep β ≈ 1.
pub fn update_beta(
    s_k: &Array2<f64>,
    lambda: &Array2<f64>,
    kappa: f64,
    dict: &SparsityDictionary,
) -> RcaResult<Array2<f64>> {
    let coef = dict.forward_matrix(s_k);
    if coef.dim() != lambda.dim() {
        return Err(RcaError::shape(format!(
            "threshold matrix is {:?} but coefficients are {:?}",
            lambda.dim(),
            coef.dim()
        )));
    }
    let scale_max = lambda.iter().fold(0.0_f64, |m, &l| m.max(kappa * l));
    let eps = (1e-12 * scale_max).max(1e-300);
    Ok(Array2::from_shape_fn(coef.dim(), |idx| {
        let denom = (kappa * lambda[idx]).max(eps);
        1.0 / (1.0 + coef[idx].abs() / denom)
    }))
}

/// Drops components whose code row is entirely zero, removing the matching
/// weight rows and component columns. Errors when nothing survives.
pub fn prune_components(
    alpha: &Array2<f64>,
    s: &Array2<f64>,
    a: &Array2<f64>,
) -> RcaResult<(Array2<f64>, Array2<f64>, Array2<f64>, usize)> {
    let r = alpha.nrows();
    if s.ncols() != r || a.nrows() != r {
        return Err(RcaError::shape("component count disagrees between code, S, and A"));
    }
    let keep: Vec<usize> =
        (0..r).filter(|&l| alpha.row(l).iter().any(|&v| v != 0.0)).collect();
    if keep.is_empty() {
        return Err(RcaError::solver("model collapsed: every component row is null"));
    }
    if keep.len() == r {
        return Ok((alpha.clone(), s.clone(), a.clone(), r));
    }
    let alpha_kept = alpha.select(Axis(0), &keep);
    let s_kept = s.select(Axis(1), &keep);
    let a_kept = a.select(Axis(0), &keep);
    Ok((alpha_kept, s_kept, a_kept, keep.len()))
}

// ── objective bookkeeping ───────────────────────────────────────────────────

/// (data term ½‖Y − F(SA)‖²_F, sparsity term ‖W ⊙ Φ_s S‖₁).
pub fn cost_components(
    y: &Array2<f64>,
    op: &DegradationOp,
    s: &Array2<f64>,
    a: &Array2<f64>,
    dict: &SparsityDictionary,
    w: &Array2<f64>,
) -> RcaResult<(f64, f64)> {
    let resid = y - &op.apply(&s.dot(a))?;
    let data = 0.5 * resid.iter().map(|v| v * v).sum::<f64>();
    let coef = dict.forward_matrix(s);
    let l1 = coef.iter().zip(w.iter()).map(|(&c, &wi)| (wi * c).abs()).sum::<f64>();
    Ok((data, l1))
}

#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    pub outer_k: usize,
    pub inner_j: usize,
    pub cost_h: f64,
    pub min_entry_sav: f64,
    pub r_effective: usize,
    pub support_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RcaDiagnostics {
    pub records: Vec<DiagnosticsRecord>,
    /// Objective after the final re-weighted solve of each outer round.
    pub outer_cost_trace: Vec<f64>,
    /// Min entry of S·αVᵀ right after each weight update (feasibility drift).
    pub min_sav_trace: Vec<f64>,
    /// Max entry of the same product, for scaling the drift.
    pub max_sav_trace: Vec<f64>,
    /// Min entry of S·αVᵀ just before each weight update, for comparison.
    pub min_sav_pre_trace: Vec<f64>,
    /// Min and max entries of the returned product before the final clamp.
    pub final_min_sav: f64,
    pub final_max_sav: f64,
    /// Weight updates rejected because they raised the objective.
    pub alpha_rejections: usize,
    pub warnings: Vec<String>,
    pub r_init_used: usize,
    /// ‖negative part of S·A‖_F / ‖X̂‖_F at the final clamp.
    pub clamp_rel_adjustment: f64,
}

impl RcaDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("outer_k,inner_j,cost_h,min_entry_sav,r_effective,support_sizes\n");
        for rec in &self.records {
            let supports: Vec<String> =
                rec.support_sizes.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e},{},{}\n",
                rec.outer_k,
                rec.inner_j,
                rec.cost_h,
                rec.min_entry_sav,
                rec.r_effective,
                supports.join(";")
            ));
        }
        out
    }
}

fn row_supports(alpha: &Array2<f64>) -> Vec<usize> {
    alpha
        .axis_iter(Axis(0))
        .map(|row| row.iter().filter(|&&v| v != 0.0).count())
        .collect()
}

// ── driver ──────────────────────────────────────────────────────────────────

fn build_dict(kind: DictKind, hr_shape: (usize, usize)) -> RcaResult<SparsityDictionary> {
    match kind {
        DictKind::Identity => Ok(SparsityDictionary::identity(hr_shape)),
        DictKind::Starlet { n_scales } => {
            SparsityDictionary::starlet(hr_shape, n_scales.unwrap_or_else(|| default_n_scales(hr_shape)))
        }
    }
}

fn dict_sq_norm(dict: &SparsityDictionary) -> f64 {
    match dict {
        SparsityDictionary::Identity { .. } => 1.0,
        SparsityDictionary::Starlet2 { .. } => {
            let n = dict.n_pixels();
            power_iteration_sq_norm(
                |x: &Array2<f64>| dict.adjoint_matrix(&dict.forward_matrix(x)),
                (n, 1),
                1e-6,
                200,
            )
        }
    }
}

/// Full estimation pass: greedy dictionary selection, then `k_max` rounds of
/// re-weighted component solves alternated with support-capped weight solves,
/// with noise-propagated thresholds refreshed from the current weights, row
/// normalization, and pruning of null components. Returns the factorization,
/// the clamped reconstruction, and a per-iteration diagnostics trace.
pub fn run_rca(
    stack: &ObservationStack,
    config: &RcaConfig,
) -> RcaResult<(Factorization, PsfMatrix, RcaDiagnostics)> {
    if config.m_d < 1 {
        return Err(RcaError::invalid("super-resolution factor must be at least 1"));
    }
    if config.j_max < 1 || config.k_max < 1 {
        return Err(RcaError::invalid("iteration counts must be at least 1"));
    }
    if !config.kappa.is_finite() || config.kappa <= 0.0 {
        return Err(RcaError::invalid("detection level must be finite and positive"));
    }
    let mut diag = RcaDiagnostics::default();
    if !(2.0..=5.0).contains(&config.kappa) {
        diag.warnings.push(format!(
            "detection level {} outside the usual [2, 5] range",
            config.kappa
        ));
    }

    let (rows, cols) = stack.patch_shape;
    let hr_shape = (rows * config.m_d, cols * config.m_d);
    let p = stack.positions.len();
    let op = if config.m_d == 1 {
        DegradationOp::identity(hr_shape, p)
    } else {
        let shifts = estimate_shifts(stack, config.m_d)?;
        build_operator(&shifts, config.m_d, hr_shape)?
    };
    let dict = build_dict(config.dict_kind, hr_shape)?;

    let r_init = config.r_init.unwrap_or_else(|| default_r_init(stack));
    diag.r_init_used = r_init;
    let grid = match &config.grid {
        Some(g) => g.clone(),
        None => default_grid(&stack.positions)?,
    };
    let selected = select_parameters(&stack.y, &stack.positions, r_init, &grid)?;
    let v = selected.v;
    let mut alpha = selected.alpha0;
    let mut a = selected.a0;
    let mut s = Array2::<f64>::zeros((op.n_x(), alpha.nrows()));

    let phi_sq = dict_sq_norm(&dict);
    let schedule = SupportSchedule {
        rule: SupportRule::SqrtPlusOne,
        k_max: config.alpha_step.max_iters,
        tol: config.alpha_step.rel_tol,
    };

    // State at the last recorded trace point, for rollback in the rare case
    // a round fails to improve on it (threshold drift between rounds).
    let mut last_accepted: Option<(Array2<f64>, Array2<f64>, f64)> = None;

    for k in 0..config.k_max {
        let grad_lipschitz = spectral_norm(&op, &a).powi(2);
        let a_sq = matrix_spectral_norm(&a).powi(2);
        let ctx = ProxContext::new(
            grad_lipschitz,
            a_sq,
            phi_sq,
            config.s_step.max_iters,
            config.s_step.rel_tol,
        );
        let mu = ctx.tau;
        let sigma = propagate_noise(&op, stack.noise_sigma, &a, &dict, mu)?;
        let mut weights = WeightState::fresh(sigma, config.kappa, mu);

        // Objective at the round's entry point, under this round's fresh κλ
        // thresholds. The recorded round-to-round trace lives here; the
        // re-weighting multipliers are a debiasing device inside the round
        // and stay out of the comparison.
        let w_fresh = weights.weights();
        let (data_in, l1_in) = cost_components(&stack.y, &op, &s, &a, &dict, &w_fresh)?;
        let entry_cost = data_in + l1_in;
        if let Some((prev_s, prev_alpha, prev_cost)) = &last_accepted {
            if entry_cost > prev_cost * (1.0 + 1e-7) {
                // The alternation stopped making progress under the recorded
                // objective; keep the previous refined iterate and stop.
                s = prev_s.clone();
                alpha = prev_alpha.clone();
                a = alpha.dot(&v.t());
                diag.warnings.push(format!(
                    "objective plateaued entering outer round {k}; keeping the previous iterate"
                ));
                break;
            }
        }
        diag.outer_cost_trace.push(entry_cost);

        // Inner sweeps refine S under re-weighted thresholds; the round keeps
        // the latest sweep output whose fresh-threshold objective sits within
        // a hair of the round's best, so the entry objective cannot go up
        // while later (better-settled) iterates are still preferred.
        let mut candidates: Vec<(f64, Array2<f64>)> = vec![(entry_cost, s.clone())];
        for j in 0..config.j_max {
            let w = weights.weights();
            let solved = solve_s_step(&stack.y, &op, &a, &w, &dict, &ctx, Some(&s))?;
            s = solved.s;
            let (data, l1) = cost_components(&stack.y, &op, &s, &a, &dict, &w)?;
            let sa = s.dot(&a);
            let min_sa = sa.iter().cloned().fold(f64::INFINITY, f64::min);
            diag.records.push(DiagnosticsRecord {
                outer_k: k,
                inner_j: j,
                cost_h: data + l1,
                min_entry_sav: min_sa,
                r_effective: alpha.nrows(),
                support_sizes: row_supports(&alpha),
            });
            let (data_f, l1_f) = if j == 0 {
                (data, l1)
            } else {
                cost_components(&stack.y, &op, &s, &a, &dict, &w_fresh)?
            };
            candidates.push((data_f + l1_f, s.clone()));
            weights.beta = update_beta(&s, &weights.lambda, config.kappa, &dict)?;
        }
        let min_cost = candidates.iter().map(|(c, _)| *c).fold(f64::INFINITY, f64::min);
        let (best_cost, best_s) = candidates
            .into_iter()
            .rev()
            .find(|(c, _)| *c <= min_cost * (1.0 + 1e-9) + 1e-300)
            .expect("the minimum itself always qualifies");
        s = best_s;
        // Rollback target: the refined components with the code they were
        // refined under — never the raw post-update handoff, whose product
        // can dip further negative until the next refinement repairs it.
        last_accepted = Some((s.clone(), alpha.clone(), entry_cost));

        if k + 1 == config.k_max {
            diag.outer_cost_trace.push(best_cost);
            break;
        }

        let pre_product = s.dot(&a);
        diag.min_sav_pre_trace
            .push(pre_product.iter().cloned().fold(f64::INFINITY, f64::min));

        let alpha_out = solve_alpha_step(&stack.y, &op, &s, &v, &schedule)?;
        let a_raw = alpha_out.alpha.dot(&v.t());
        let product = s.dot(&a_raw);
        let min_sav = product.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_sav = product.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        diag.min_sav_trace.push(min_sav);
        diag.max_sav_trace.push(max_sav);

        // Build the state the next round would start from: prune dead rows,
        // then normalize each remaining row to unit l2 norm with the scale
        // pushed into the matching component column, which leaves the product
        // S·A untouched (the factorization is scale-indeterminate).
        let (mut alpha_c, mut s_c, _a_raw_p, r_eff) =
            prune_components(&alpha_out.alpha, &s, &a_raw)?;
        let a_unscaled = alpha_c.dot(&v.t());
        for l in 0..a_unscaled.nrows() {
            let norm = a_unscaled.row(l).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                alpha_c.row_mut(l).mapv_inplace(|x| x / norm);
                s_c.column_mut(l).mapv_inplace(|x| x * norm);
            }
        }
        let a_c = alpha_c.dot(&v.t());

        // Sufficient-decrease check on the weight update: the support
        // re-selection is greedy, so only accept the candidate when the
        // objective it hands the next round — its thresholds recomputed for
        // the candidate's weight rows — stays below this round's entry value.
        let sigma_c = propagate_noise(&op, stack.noise_sigma, &a_c, &dict, mu)?;
        let w_cand = WeightState::fresh(sigma_c, config.kappa, mu).weights();
        let (data_c, l1_c) = cost_components(&stack.y, &op, &s_c, &a_c, &dict, &w_cand)?;
        let cand_cost = data_c + l1_c;
        let r_recorded;
        if cand_cost <= entry_cost {
            alpha = alpha_c;
            s = s_c;
            a = a_c;
            r_recorded = r_eff;
            diag.records.push(DiagnosticsRecord {
                outer_k: k,
                inner_j: config.j_max,
                cost_h: cand_cost,
                min_entry_sav: min_sav,
                r_effective: r_eff,
                support_sizes: row_supports(&alpha),
            });
        } else {
            diag.alpha_rejections += 1;
            r_recorded = alpha.nrows();
            let _ = r_recorded;
        }
    }

    let x_raw = s.dot(&a);
    diag.final_min_sav = x_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    diag.final_max_sav = x_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_hat = x_raw.mapv(|v| v.max(0.0));
    let clamp_norm: f64 = x_raw
        .iter()
        .map(|&v| if v < 0.0 { v * v } else { 0.0 })
        .sum::<f64>()
        .sqrt();
    let x_norm = x_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    diag.clamp_rel_adjustment = if x_norm > 0.0 { clamp_norm / x_norm } else { 0.0 };
    if diag.clamp_rel_adjustment > 1e-3 {
        diag.warnings.push(format!(
            "negativity clamp moved the reconstruction by {:.3e} relative",
            diag.clamp_rel_adjustment
        ));
    }

    let fact = Factorization::new(s, alpha, v, hr_shape)?;
    let psf = PsfMatrix { x: x_hat, hr_shape };
    Ok((fact, psf, diag))
}

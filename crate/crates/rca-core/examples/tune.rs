//! Scratch harness for experiment tuning; not part of the shipped API.

use ndarray::Array2;
use rca_core::baselines::pca_denoise;
use rca_core::metrics::{field_errors, mean_normalized_sq_error};
use rca_core::rca::{run_rca, DictKind, RcaConfig, SolverBudget};
use rca_core::simulate::{degrade_field, generate_field, DegradeOptions, FieldSpec, Layout};
use rca_core::field::PsfMatrix;

fn profile(truth: &PsfMatrix, est: &PsfMatrix) {
    use rca_core::metrics::measure_shape;
    let (rows, cols) = truth.hr_shape;
    let p = truth.x.ncols();
    let mut dsize = 0.0;
    let mut bins = [0.0f64; 3];
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for k in 0..p {
        let t = truth.x.column(k).to_shape((rows, cols)).unwrap().to_owned();
        let e = est.x.column(k).to_shape((rows, cols)).unwrap().to_owned();
        let st = measure_shape(&t).unwrap();
        let se = measure_shape(&e).unwrap();
        dsize += se.size - st.size;
        let (ci, cj) = st.centroid;
        for i in 0..rows {
            for j in 0..cols {
                let rr = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
                let b = if rr < 4.0 { 0 } else if rr < 8.0 { 1 } else { 2 };
                let d = e[(i, j)] - t[(i, j)];
                bins[b] += d * d;
                sums[b] += d;
                counts[b] += 1;
            }
        }
    }
    println!(
        "  mean signed dsize {:+.4}; residual rms core/mid/far: {:.2e} {:.2e} {:.2e}; mean core/mid/far: {:+.2e} {:+.2e} {:+.2e}",
        dsize / p as f64,
        (bins[0] / counts[0] as f64).sqrt(),
        (bins[1] / counts[1] as f64).sqrt(),
        (bins[2] / counts[2] as f64).sqrt(),
        sums[0] / counts[0] as f64,
        sums[1] / counts[1] as f64,
        sums[2] / counts[2] as f64
    );
}

fn band_profile(truth: &PsfMatrix, est: &PsfMatrix) {
    use rca_core::transforms::SparsityDictionary;
    let (rows, cols) = truth.hr_shape;
    let p = truth.x.ncols();
    let mut mean_res = ndarray::Array1::<f64>::zeros(rows * cols);
    for k in 0..p {
        mean_res += &(&est.x.column(k) - &truth.x.column(k));
    }
    mean_res /= p as f64;
    let n_scales = 3;
    let dict = SparsityDictionary::starlet((rows, cols), n_scales).unwrap();
    let coef = dict.forward(&mean_res);
    let n = rows * cols;
    let mut norms = Vec::new();
    for b in 0..n_scales {
        let band = coef.slice(ndarray::s![b * n..(b + 1) * n]);
        norms.push(format!("{:.2e}", band.iter().map(|v| v * v).sum::<f64>().sqrt()));
    }
    // radial profile of the mean residual, 4-px bins
    let c = ((rows / 2) as f64 - 0.5, (cols / 2) as f64 - 0.5);
    let mut prof = [0.0f64; 4];
    let mut cnt = [0usize; 4];
    for i in 0..rows {
        for j in 0..cols {
            let rr = ((i as f64 - c.0).powi(2) + (j as f64 - c.1).powi(2)).sqrt();
            let b = ((rr / 4.0) as usize).min(3);
            prof[b] += mean_res[i * cols + j];
            cnt[b] += 1;
        }
    }
    let prof: Vec<String> = prof
        .iter()
        .zip(cnt.iter())
        .map(|(s, &c)| format!("{:+.2e}", s / c as f64))
        .collect();
    println!("  mean-res band norms {norms:?}; radial mean {prof:?}");
}

/// Given the learned components, refit the weights against the *truth* field:
/// (a) unconstrained least squares, (b) least squares followed by projection
/// of each weight row onto its best 18-sparse representation in the graph
/// eigenbasis. Separates component error from weight-model error.
fn oracle_refit(truth: &PsfMatrix, s: &ndarray::Array2<f64>, v: &ndarray::Array2<f64>) {
    use rca_core::linalg::thin_svd;
    let (u, sv, vt) = thin_svd(s);
    let tol = sv[0] * 1e-12;
    // pseudo-inverse applied to truth: A* = pinv(S) · X
    let mut a_ls = ndarray::Array2::<f64>::zeros((s.ncols(), truth.x.ncols()));
    for (i, &sig) in sv.iter().enumerate() {
        if sig <= tol {
            continue;
        }
        let proj = u.column(i).dot(&truth.x); // row vector over patches
        let scaled = proj.mapv(|z| z / sig);
        for r in 0..s.ncols() {
            let vr = vt[(i, r)];
            for c in 0..truth.x.ncols() {
                a_ls[(r, c)] += vr * scaled[c];
            }
        }
    }
    let x_ls = s.dot(&a_ls).mapv(|z| z.max(0.0));
    let rep_ls = field_errors(truth, &PsfMatrix::new(x_ls, truth.hr_shape).unwrap()).unwrap();
    // project each weight row onto its best 18-sparse combination of eigenvectors
    let coef = a_ls.dot(v); // rows in eigenbasis
    let mut coef_sp = coef.clone();
    for mut row in coef_sp.rows_mut() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].abs().partial_cmp(&row[a].abs()).unwrap());
        for &i in &idx[18..] {
            row[i] = 0.0;
        }
    }
    let a_sp = coef_sp.dot(&v.t());
    let x_sp = s.dot(&a_sp).mapv(|z| z.max(0.0));
    let rep_sp = field_errors(truth, &PsfMatrix::new(x_sp, truth.hr_shape).unwrap()).unwrap();
    println!(
        "  oracle refit: free E_g {:.4} E_S {:.4}; 18-sparse E_g {:.4} E_S {:.4}",
        rep_ls.e_gamma, rep_ls.e_size, rep_sp.e_gamma, rep_sp.e_size
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let snr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40.0);
    let kappa: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let k_max: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let j_max: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    let s_iters: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(300);
    let m_d: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);
    let r_init: Option<usize> = args.get(7).map(|s| s.parse().unwrap());
    let n_scales: Option<usize> = args.get(8).map(|s| s.parse().unwrap());

    let ring: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let sigma0: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let rlo: f64 = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(5.0);
    let rhi: f64 = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(9.0);
    let variation: f64 = args.get(13).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let eps_max: f64 = args.get(14).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let alpha_iters: usize = args.get(15).map(|s| s.parse().unwrap()).unwrap_or(300);
    let layout: usize = args.get(16).map(|s| s.parse().unwrap()).unwrap_or(0);
    let spec = FieldSpec {
        seed: if m_d == 1 { 515 } else { 616 },
        ring_amplitude: ring,
        sigma0,
        ring_radius: (rlo, rhi),
        variation,
        eps_max,
        layout: match layout {
            1 => Layout::Grid,
            2 => Layout::ClusteredCorners,
            _ => Layout::UniformRandom,
        },
        ..FieldSpec::default()
    };
    let (truth, positions) = generate_field(&spec).unwrap();
    let stack = degrade_field(
        &truth,
        &positions,
        &DegradeOptions {
            m_d,
            snr: Some(snr),
            apply_shifts: m_d > 1,
            seed: if m_d == 1 { 516 } else { 617 },
        },
    )
    .unwrap();
    println!("snr={snr} kappa={kappa} k_max={k_max} j_max={j_max} s_iters={s_iters} m_d={m_d}");
    println!("noise sigma = {:.6}", stack.noise_sigma);

    if m_d == 1 {
        let raw = PsfMatrix::new(stack.y.clone(), truth.hr_shape).unwrap();
        let rep = field_errors(&truth, &raw).unwrap();
        println!(
            "raw obs    : E_g {:.4} E_S {:.4} nmse {:.5}",
            rep.e_gamma,
            rep.e_size,
            mean_normalized_sq_error(&truth, &raw).unwrap()
        );
        let mut best = (f64::INFINITY, 0, f64::NAN, f64::NAN);
        for r in 2..=15 {
            let psf = pca_denoise(&stack, r).unwrap();
            let rep = field_errors(&truth, &psf).unwrap();
            let nm = mean_normalized_sq_error(&truth, &psf).unwrap();
            if rep.e_gamma < best.0 {
                best = (rep.e_gamma, r, rep.e_size, nm);
            }
        }
        println!(
            "pca best   : E_g {:.4} (r={}) E_S {:.4} nmse {:.5}",
            best.0, best.1, best.2, best.3
        );
    }

    for (label, dict) in [
        ("starlet", DictKind::Starlet { n_scales }),
        ("pixel", DictKind::Identity),
    ] {
        let t0 = std::time::Instant::now();
        let config = RcaConfig {
            r_init,
            kappa,
            j_max,
            k_max,
            m_d,
            dict_kind: dict,
            grid: None,
            s_step: SolverBudget { max_iters: s_iters, rel_tol: 1e-7 },
            alpha_step: SolverBudget { max_iters: alpha_iters, rel_tol: 1e-7 },
        };
        let (fact, psf, diag) = run_rca(&stack, &config).unwrap();
        let rep = field_errors(&truth, &psf).unwrap();
        let nm = mean_normalized_sq_error(&truth, &psf).unwrap();
        println!(
            "{label:10} : E_g {:.4} E_S {:.4} nmse {:.5}  r_init {} -> r_eff {}  clamp {:.2e}  {:.1}s",
            rep.e_gamma,
            rep.e_size,
            nm,
            diag.r_init_used,
            fact.r_effective(),
            diag.clamp_rel_adjustment,
            t0.elapsed().as_secs_f64()
        );
        println!("  cost trace: {:?}", diag.outer_cost_trace.iter().map(|c| format!("{c:.4e}")).collect::<Vec<_>>());
        let ratios: Vec<String> = diag
            .min_sav_trace
            .iter()
            .zip(&diag.max_sav_trace)
            .map(|(mn, mx)| format!("{:.2e}", -mn / mx))
            .collect();
        println!("  -min/max sav: {ratios:?}");
        let pre: Vec<String> = diag
            .min_sav_pre_trace
            .iter()
            .zip(&diag.max_sav_trace)
            .map(|(mn, mx)| format!("{:.2e}", -mn / mx))
            .collect();
        println!(
            "  -min/max pre: {pre:?}  final: {:.2e}  alpha rejections: {}",
            -diag.final_min_sav / diag.final_max_sav,
            diag.alpha_rejections
        );
        if !diag.warnings.is_empty() {
            println!("  warnings: {:?}", diag.warnings);
        }
        let supports: Vec<usize> = diag
            .records
            .last()
            .map(|r| r.support_sizes.clone())
            .unwrap_or_default();
        println!("  final supports: {supports:?}");
        profile(&truth, &psf);
        band_profile(&truth, &psf);
        oracle_refit(&truth, &fact.s, &fact.v);
        let _ = Array2::<f64>::zeros((1, 1));
    }
}

//! Acceptance suite. Each test writes one `criterion N ...: PASS|FAIL` line to stderr.
//!
//! The toy-preset training runs are shared between criteria 1-3 and computed
//! once; heavy sections hold `HEAVY` so that wall-clock timings are not
//! inflated by other tests competing for the same core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use featlab::harness::{run_paired, simulate_recursion, upsample_factor, PairedRuns, RecursionSpec};
use featlab::linalg::dot;
use featlab::model::{
    empirical_loss, frozen_logit_gradient, gradient, hessian_vector_product, init_weights, HvpMode, InitSpec,
    WeightMatrix,
};
use featlab::optim::{OptimizerConfig, TrainOptions, TrainTrace};
use featlab::spectral::{lanczos_top_k, model_spectrum, LanczosOptions};
use featlab::synthgen::{generate, make_basis, BasisMode, Dataset, DistributionSpec};
use featlab::useful::{kmeans_two, run_useful, SeparatingMode, UsefulConfig, KMEANS_MAX_ITERS, KMEANS_TOLERANCE};
use featlab_cli::ExperimentConfig;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the raw stderr handle so the line shows up even when the harness captures output.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} ({name}): {verdict} {detail}");
}

fn preset() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/preset.toml");
    ExperimentConfig::load(&path).unwrap()
}

fn with_beta_d(cfg: &ExperimentConfig, beta_d: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.dataset.beta_d = beta_d;
    c
}

struct PresetRun {
    beta_d: f64,
    seed: u64,
    runs: PairedRuns,
    elapsed: Duration,
}

/// Paired GD/SAM runs of the toy preset for beta_d in {0.2, 0.4}, every seed,
/// with the test error measured at the end.
fn preset_runs() -> &'static [PresetRun] {
    static RUNS: OnceLock<Vec<PresetRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _g = heavy();
        let base = preset();
        let mut out = Vec::new();
        for beta_d in [0.2, 0.4] {
            let cfg = with_beta_d(&base, beta_d);
            for &seed in &cfg.seeds {
                let ds = cfg.train_set(seed).unwrap();
                let test = cfg.test_set(seed).unwrap().unwrap();
                let w0 = cfg.initial_weights(seed, ds.basis()).unwrap();
                let o = &cfg.optimizer;
                let opts = TrainOptions {
                    test_set: Some(&test),
                    test_every: o.iterations,
                    checkpoint_every: None,
                };
                let start = Instant::now();
                let runs = run_paired(&w0, &ds, o.eta, o.rho, o.iterations, &opts).unwrap();
                out.push(PresetRun {
                    beta_d,
                    seed,
                    runs,
                    elapsed: start.elapsed(),
                });
            }
        }
        out
    })
}

fn first_crossing(trace: &TrainTrace, threshold: f64) -> Option<usize> {
    trace.rows.iter().position(|r| r.fast_alignment >= threshold)
}

#[test]
fn criterion_01_gd_learns_fast_feature_first() {
    let cfg = preset();
    let threshold = 1.0 / cfg.dataset.beta_e;
    let bound = 3.0 * cfg.sigma_0();
    let mut pass = true;
    let mut detail = String::new();
    for r in preset_runs().iter().filter(|r| r.beta_d == 0.2) {
        let tg = first_crossing(&r.runs.gd, threshold);
        let ts = first_crossing(&r.runs.sam, threshold);
        let (Some(tg), Some(ts)) = (tg, ts) else {
            pass = false;
            detail += &format!("[seed {} no crossing gd={tg:?} sam={ts:?}] ", r.seed);
            continue;
        };
        let sg = r.runs.gd.rows[tg].slow_alignment;
        let ss = r.runs.sam.rows[ts].slow_alignment;
        let ok = tg < ts && sg < bound && ss < bound && r.elapsed <= Duration::from_secs(120);
        pass &= ok;
        detail += &format!(
            "[seed {} t_gd={tg} t_sam={ts} slow_gd={sg:.4} slow_sam={ss:.4} bound={bound:.3} paired={:.1}s] ",
            r.seed,
            r.elapsed.as_secs_f64()
        );
    }
    report(1, "GD crosses before SAM, slow feature small", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_02_sam_gap_smaller_than_gd_gap() {
    let threshold = 1.0 / preset().dataset.beta_e;
    let mut pass = true;
    let mut detail = String::new();
    for r in preset_runs() {
        let (gd, sam) = (&r.runs.gd.rows, &r.runs.sam.rows);
        let (g0, s0) = (r.runs.gd.initial(), r.runs.sam.initial());
        assert_eq!(
            (g0.loss, g0.fast_alignment, g0.slow_alignment),
            (s0.loss, s0.fast_alignment, s0.slow_alignment)
        );
        let Some(t0) = first_crossing(&r.runs.gd, threshold) else {
            pass = false;
            detail += &format!("[beta_d={} seed {} no crossing] ", r.beta_d, r.seed);
            continue;
        };
        let slack = (1..=t0)
            .map(|t| {
                let g = gd[t].fast_alignment - gd[t].slow_alignment;
                let s = sam[t].fast_alignment - sam[t].slow_alignment;
                g - s
            })
            .fold(f64::INFINITY, f64::min);
        pass &= t0 >= 1 && slack > 0.0;
        detail += &format!("[beta_d={} seed {} T0={t0} slack={slack:.3e}] ", r.beta_d, r.seed);
    }
    report(2, "uniformity gap", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_03_stronger_slow_feature_lowers_test_error() {
    let runs = preset_runs();
    let mean = |beta: f64, pick: fn(&PairedRuns) -> &TrainTrace| {
        let errs: Vec<f64> = runs
            .iter()
            .filter(|r| r.beta_d == beta)
            .map(|r| pick(&r.runs).last().test_error.unwrap())
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    };
    let gd = (mean(0.2, |p| &p.gd), mean(0.4, |p| &p.gd));
    let sam = (mean(0.2, |p| &p.sam), mean(0.4, |p| &p.sam));
    let pass = gd.1 < gd.0 && sam.1 < sam.0;
    let detail = format!(
        "gd {:.4} -> {:.4}, sam {:.4} -> {:.4} (beta_d 0.2 -> 0.4)",
        gd.0, gd.1, sam.0, sam.1
    );
    report(3, "test error vs slow-feature strength", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_04_upsampling_accelerates_slow_feature() {
    let _g = heavy();
    let mut cfg = preset();
    cfg.dataset.sigma_p = 0.0;
    let gd = OptimizerConfig::gd(cfg.optimizer.eta, cfg.optimizer.iterations);
    let useful = UsefulConfig {
        separating: SeparatingMode::Fixed { iteration: 50 },
        factor: 2,
        fresh_init: None,
    };
    let alpha = cfg.dataset.alpha;
    let trivial = alpha.max(1.0 - alpha);
    let opts = TrainOptions {
        checkpoint_every: None,
        ..TrainOptions::default()
    };
    let mut pass = true;
    let mut detail = String::new();
    for &seed in &cfg.seeds {
        let ds = cfg.train_set(seed).unwrap();
        let w0 = cfg.initial_weights(seed, ds.basis()).unwrap();
        let out = run_useful(&ds, &w0, &gd, &useful, &opts).unwrap();
        let plain = out.baseline.slow_alignments();
        let up = out.retrained.slow_alignments();
        let dominated = plain.iter().zip(&up).all(|(p, u)| u >= p);
        let slack = plain
            .iter()
            .zip(&up)
            .skip(1)
            .map(|(p, u)| u - p)
            .fold(f64::INFINITY, f64::min);
        let agree = (0..ds.len())
            .filter(|&i| {
                let masked = !ds.examples()[i].has_fast_feature();
                masked == out.plan.slow_indices.binary_search(&i).is_ok()
            })
            .count() as f64
            / ds.len() as f64;
        pass &= dominated && agree > trivial;
        detail += &format!("[seed {seed} min(up-plain)={slack:.3e} agreement={agree:.4} vs {trivial}] ");
    }
    report(4, "upsampling dominance and mask recovery", pass, &detail);
    assert!(pass, "{detail}");
}

fn slow_fast_ratio(g: &WeightMatrix, j: usize, ds: &Dataset) -> f64 {
    dot(g.row(j), &ds.basis().slow) / dot(g.row(j), &ds.basis().fast)
}

#[test]
fn criterion_05_upsampling_factor_matches_sam_gradient() {
    let cfg = preset();
    let mut spec = cfg.distribution(2000, 77);
    spec.sigma_p = 0.0;
    let ds = generate(&spec, &cfg.basis().unwrap()).unwrap();
    let alpha_hat = ds.fast_fraction();
    let (vf, vs) = (&ds.basis().fast, &ds.basis().slow);
    let (be3, bd3) = (spec.beta_e.powi(3), spec.beta_d.powi(3));
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    let mut instances = 0;
    while instances < 60 {
        let init = InitSpec {
            sigma_0: rng.random_range(0.01..0.3),
            seed: rng.random(),
            enforce_positive_projections: true,
        };
        let w = init_weights(&init, 4, spec.d, ds.basis()).unwrap();
        let j = rng.random_range(0..4);
        let (ce, cd) = (dot(w.row(j), vf), dot(w.row(j), vs));
        // regime: both perturbed projections stay positive and the fast term dominates
        if alpha_hat * be3 * ce < bd3 * cd {
            continue;
        }
        let rho_max = 1.0 / (3.0 * alpha_hat * be3 * ce);
        let rho_t = rho_max * rng.random_range(0.05..0.9);
        instances += 1;

        let g = frozen_logit_gradient(&w, &ds, 1.0).unwrap();
        let g_sam = frozen_logit_gradient(&w.add_scaled(rho_t, &g), &ds, 1.0).unwrap();
        let k = upsample_factor(ce, cd, &spec, alpha_hat, rho_t).unwrap();
        let g_gd = frozen_logit_gradient(&w, &ds.amplify_slow(k).unwrap(), 1.0).unwrap();
        let n_gd = g_gd.frobenius_norm();
        let normalized = WeightMatrix::from_vec(4, spec.d, g_gd.as_slice().iter().map(|x| x / n_gd).collect()).unwrap();
        let r_sam = slow_fast_ratio(&g_sam, j, &ds);
        let r_gd = slow_fast_ratio(&normalized, j, &ds);
        worst = worst.max((r_sam - r_gd).abs() / r_gd.abs());

        // closed form of the SAM ratio under the early-phase gradient
        let ce_eps = ce * (1.0 - 3.0 * rho_t * alpha_hat * be3 * ce);
        let cd_eps = cd * (1.0 - 3.0 * rho_t * bd3 * cd);
        let closed = bd3 * cd_eps * cd_eps / (alpha_hat * be3 * ce_eps * ce_eps);
        worst_closed = worst_closed.max((r_sam - closed).abs() / closed.abs());
    }
    let k0 = upsample_factor(0.3, 0.1, &spec, alpha_hat, 0.0).unwrap();
    let pass = worst < 1e-8 && worst_closed < 1e-8 && k0 == 1.0;
    let detail =
        format!("{instances} instances, max rel err {worst:.2e}, vs closed form {worst_closed:.2e}, k(0) = {k0}");
    report(5, "upsampling factor gradient oracle", pass, &detail);
    assert!(pass, "{detail}");
}

fn random_small_problem(rng: &mut ChaCha20Rng) -> (Dataset, WeightMatrix) {
    let d = rng.random_range(3..=8);
    let j = rng.random_range(1..=4);
    let n = rng.random_range(4..=24);
    let spec = DistributionSpec {
        d,
        patches: rng.random_range(3..=4),
        beta_e: rng.random_range(0.5..1.5),
        beta_d: rng.random_range(0.1..0.5),
        alpha: rng.random_range(0.3..1.0),
        sigma_p: rng.random_range(0.0..1.0),
        n,
        seed: rng.random(),
        orthogonalize_noise: rng.random(),
    };
    let basis = make_basis(d, BasisMode::Rotated { seed: rng.random() }).unwrap();
    let ds = generate(&spec, &basis).unwrap();
    let mult: Vec<u32> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let ds = ds.with_multiplicity(mult).unwrap();
    let init = InitSpec {
        sigma_0: rng.random_range(0.2..1.0),
        seed: rng.random(),
        enforce_positive_projections: false,
    };
    let w = init_weights(&init, j, d, &basis).unwrap();
    (ds, w)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    inf_norm(&diff) / inf_norm(b)
}

#[test]
fn criterion_06_analytic_derivatives_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let eps = 1e-5;
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..120 {
        let (ds, w) = random_small_problem(&mut rng);
        let analytic = gradient(&w, &ds).unwrap();
        let mut fd = vec![0.0; w.as_slice().len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = w.clone();
            plus.as_mut_slice()[i] += eps;
            let mut minus = w.clone();
            minus.as_mut_slice()[i] -= eps;
            *slot = (empirical_loss(&plus, &ds).unwrap() - empirical_loss(&minus, &ds).unwrap()) / (2.0 * eps);
        }
        worst_g = worst_g.max(normwise_error(analytic.as_slice(), &fd));

        let dir: Vec<f64> = (0..fd.len()).map(|_| rng.sample(StandardNormal)).collect();
        let dir = WeightMatrix::from_vec(w.filters(), w.dim(), dir).unwrap();
        let hv = hessian_vector_product(&w, &ds, &dir, HvpMode::Analytic).unwrap();
        let gp = gradient(&w.add_scaled(eps, &dir), &ds).unwrap();
        let gm = gradient(&w.add_scaled(-eps, &dir), &ds).unwrap();
        let fd_hv: Vec<f64> = gp
            .as_slice()
            .iter()
            .zip(gm.as_slice())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        worst_h = worst_h.max(normwise_error(hv.as_slice(), &fd_hv));
    }
    let pass = worst_g < 1e-5 && worst_h < 1e-5;
    let detail = format!("120 instances, gradient {worst_g:.2e}, HVP {worst_h:.2e}");
    report(6, "gradient and HVP vs finite differences", pass, &detail);
    assert!(pass, "{detail}");
}

fn dense_top5(w: &WeightMatrix, ds: &Dataset) -> Vec<f64> {
    let n = w.as_slice().len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        let mut e = WeightMatrix::zeros(w.filters(), w.dim());
        e.as_mut_slice()[col] = 1.0;
        let hv = hessian_vector_product(w, ds, &e, HvpMode::Analytic).unwrap();
        for (row, v) in hv.as_slice().iter().enumerate() {
            h[(row, col)] = *v;
        }
    }
    let sym = (&h + h.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(5);
    ev
}

#[test]
fn criterion_07_lanczos_matches_dense_eigensolver() {
    let shapes = [(10, 4), (8, 8), (16, 4), (6, 5), (12, 5), (7, 9)];
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..24u64 {
        let (d, j) = shapes[seed as usize % shapes.len()];
        let spec = DistributionSpec {
            d,
            patches: 3,
            beta_e: 1.0,
            beta_d: 0.3,
            alpha: 0.8,
            sigma_p: 0.5,
            n: 64,
            seed,
            orthogonalize_noise: false,
        };
        let ds = generate(&spec, &make_basis(d, BasisMode::Rotated { seed }).unwrap()).unwrap();
        let init = InitSpec {
            sigma_0: 0.3,
            seed: 1000 + seed,
            enforce_positive_projections: false,
        };
        let w = init_weights(&init, j, d, ds.basis()).unwrap();
        let p = d * j;
        assert!(p <= 64);
        let report = model_spectrum(&w, &ds, &LanczosOptions::new(5, p, seed), None).unwrap();
        let dense = dense_top5(&w, &ds);
        for (a, b) in report.eigenvalues.iter().zip(&dense) {
            worst = worst.max((a - b).abs() / b.abs());
        }
        count += 1;
    }

    let diag = |x: &[f64], out: &mut [f64]| {
        for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
            *o = (i + 1) as f64 * v;
        }
        Ok(())
    };
    let r = lanczos_top_k(diag, 5, &LanczosOptions::new(5, 5, 3)).unwrap();
    let bulk = r.bulk_ratio.unwrap();
    let diag_ok =
        (r.lambda_max - 5.0).abs() < 1e-12 && (bulk - 5.0).abs() < 1e-12 && (r.eigenvalues[4] - 1.0).abs() < 1e-12;
    let pass = worst < 1e-6 && diag_ok;
    let detail = format!(
        "{count} models, max rel err {worst:.2e}; diag(1..5): lambda_max={} bulk={}",
        r.lambda_max, bulk
    );
    report(7, "Lanczos vs dense eigendecomposition", pass, &detail);
    assert!(pass, "{detail}");
}

/// Exhaustive O(n^2) search over all splits of the sorted values.
fn brute_force_two_means(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let sse = |part: &[f64]| {
        let m = part.iter().sum::<f64>() / part.len() as f64;
        part.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    (1..s.len())
        .map(|k| sse(&s[..k]) + sse(&s[k..]))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_08_scalar_two_means_is_globally_optimal() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut refined = 0;
    let instances = 400;
    for t in 0..instances {
        let n = rng.random_range(2..=64);
        let values: Vec<f64> = match t % 4 {
            0 => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            1 => (0..n).map(|_| rng.random_range(0.0f64..1.0).powi(4) * 100.0).collect(),
            2 => (0..n)
                .map(|_| {
                    let c = if rng.random::<bool>() { 3.0 } else { 0.0 };
                    c + rng.sample::<f64, _>(StandardNormal)
                })
                .collect(),
            _ => (0..n).map(|_| rng.random_range(0..6) as f64).collect(),
        };
        if values.iter().all(|&v| v == values[0]) {
            continue;
        }
        let r = kmeans_two(&values, 1, KMEANS_TOLERANCE, KMEANS_MAX_ITERS).unwrap();
        refined += r.refined as usize;
        let opt = brute_force_two_means(&values);
        let scale = values.iter().map(|v| v * v).sum::<f64>().max(1.0);
        worst = worst.max((r.objective - opt) / scale);
    }
    let pass = worst <= 1e-12;
    let detail = format!(
        "{instances} instances, worst (objective - optimum)/scale = {worst:.2e}, {refined} needed the split scan"
    );
    report(8, "2-means global optimum", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_09_growth_recursion_within_bound() {
    let hand = RecursionSpec {
        z0: 0.1,
        rho: 0.0,
        m: 1.0,
        big_m: 1.0,
        v: 0.2,
    };
    let h = simulate_recursion(&hand).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    let instances = 1500;
    for _ in 0..instances {
        let z0: f64 = rng.random_range(0.02..2.0);
        let m: f64 = rng.random_range(-3.0f64..2.0).exp();
        let spec = RecursionSpec {
            z0,
            rho: z0 * rng.random_range(0.0..0.9),
            m,
            big_m: m * rng.random_range(1.0..5.0),
            v: z0 * rng.random_range(0.0f64..6.0).exp(),
        };
        let out = simulate_recursion(&spec).unwrap();
        // independent evaluation of the measured time and the bound
        let (mut z, mut t) = (spec.z0, 0u64);
        while z < spec.v {
            z += spec.m * (z - spec.rho).powi(2);
            t += 1;
        }
        let gap2 = (spec.z0 - spec.rho).powi(2);
        let bound = 2.0 * spec.z0 / (spec.m * gap2)
            + 4.0 * spec.big_m * spec.z0 * spec.z0 / (spec.m * gap2) * ((spec.v / spec.z0).log2()).ceil();
        assert_eq!(out.measured, t);
        assert!((out.bound - bound).abs() <= 1e-9 * bound);
        if t as f64 > bound {
            violations += 1;
        }
        tightest = tightest.min(bound / (t.max(1) as f64));
    }
    let pass = h.measured == 6 && (h.bound - 24.0).abs() < 1e-12 && violations == 0;
    let detail = format!(
        "hand instance {} <= {}; {instances} random specs, {violations} violations, tightest bound/measured {tightest:.3}",
        h.measured, h.bound
    );
    report(9, "growth recursion bound", pass, &detail);
    assert!(pass, "{detail}");
}

const AUDIT_CONFIG: &str = r#"
schema_version = 1
seeds = [3, 4]
checks = ["gap", "order", "factor", "ratio", "recursion"]

[dataset]
d = 12
beta_e = 1.0
beta_d = 0.3
alpha = 0.8
sigma_p = 0.6
n_train = 600
n_test = 300
orthogonalize_noise = true

[model]
filters = 4
sigma_0 = 0.1
enforce_positive_projections = true

[optimizer]
kind = "sam"
eta = 0.5
rho = 0.02
iterations = 60

[useful]
factor = 2
separating = { fixed = { iteration = 15 } }

[outputs]
dir = "out"
checkpoint_every = 20
test_every = 5

[verify]
threshold = 0.3
recursion_instances = 100
factor_instances = 5
factor_examples = 300

[spectrum]
k = 5
steps = 48
dense_oracle = true
"#;

fn run_all_commands(config: &Path, out: &Path, threads: usize) -> BTreeMap<PathBuf, String> {
    for cmd in ["gen", "train", "useful", "spectrum", "verify"] {
        let status = Command::new(env!("CARGO_BIN_EXE_featlab"))
            .args([cmd, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("RAYON_NUM_THREADS", threads.to_string())
            .output()
            .unwrap();
        // verify may legitimately report a failed check (exit 1); only crashes matter here
        assert!(
            matches!(status.status.code(), Some(0) | Some(1)),
            "{cmd}: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    let mut digests = BTreeMap::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                digests.insert(p.strip_prefix(out).unwrap().to_path_buf(), hex);
            }
        }
    }
    digests
}

#[test]
fn criterion_10_outputs_are_byte_identical() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("audit.toml");
    std::fs::write(&config, AUDIT_CONFIG).unwrap();
    let mut runs = Vec::new();
    for (i, threads) in [1, 1, 4].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        std::fs::create_dir(&out).unwrap();
        runs.push(run_all_commands(&config, &out, threads));
    }
    let files = runs[0].len();
    let identical = runs.iter().all(|r| *r == runs[0]);
    let pass = identical && files > 20;
    let detail = format!("{files} files per run, rerun and 1 vs 4 threads identical: {identical}");
    report(10, "determinism audit", pass, &detail);
    assert!(pass, "{detail}");
}

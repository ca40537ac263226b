//! Executable checks of the feature-learning theory on the toy model:
//! learning order, the SAM uniformity gap, the closed-form upsampling factor
//! and the growth-recursion bound.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::metrics::argmax_filter;
use crate::model::{frozen_logit_gradient, init_weights, InitSpec, WeightMatrix};
use crate::optim::{train, OptimizerConfig, TrainOptions, TrainTrace};
use crate::synthgen::{seeded_rng, Dataset, DistributionSpec};

/// Outcome of one named check, written as one JSON file per check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub params: Value,
    pub pass: bool,
    /// Smallest margin by which the checked inequality held (negative when violated).
    pub worst_slack: f64,
    pub iterations_checked: usize,
}

/// GD and SAM trained from the same initialization on the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRuns {
    pub gd: TrainTrace,
    pub sam: TrainTrace,
}

pub fn run_paired(
    w0: &WeightMatrix,
    ds: &Dataset,
    eta: f64,
    rho: f64,
    iterations: usize,
    options: &TrainOptions<'_>,
) -> Result<PairedRuns> {
    let gd_cfg = OptimizerConfig::gd(eta, iterations);
    let sam_cfg = OptimizerConfig::sam(eta, rho, iterations);
    let (gd, sam) = rayon::join(
        || train(w0, ds, &gd_cfg, options, &mut []),
        || train(w0, ds, &sam_cfg, options, &mut []),
    );
    Ok(PairedRuns { gd: gd?, sam: sam? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub iteration: usize,
    pub sam_fast: f64,
    pub sam_slow: f64,
    pub gd_fast: f64,
    pub gd_slow: f64,
}

impl GapRow {
    pub fn gap_sam(&self) -> f64 {
        self.sam_fast - self.sam_slow
    }

    pub fn gap_gd(&self) -> f64 {
        self.gd_fast - self.gd_slow
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTrace {
    pub rows: Vec<GapRow>,
    pub threshold: f64,
    /// First iteration where the GD fast alignment reaches `threshold`.
    pub t0: Option<usize>,
}

impl GapTrace {
    pub fn from_runs(runs: &PairedRuns, threshold: f64) -> Result<GapTrace> {
        if runs.gd.rows.len() != runs.sam.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: runs.gd.rows.len(),
                got: runs.sam.rows.len(),
            });
        }
        let rows: Vec<GapRow> = runs
            .gd
            .rows
            .iter()
            .zip(&runs.sam.rows)
            .map(|(g, s)| GapRow {
                iteration: g.iteration,
                sam_fast: s.fast_alignment,
                sam_slow: s.slow_alignment,
                gd_fast: g.fast_alignment,
                gd_slow: g.slow_alignment,
            })
            .collect();
        let t0 = rows.iter().position(|r| r.gd_fast >= threshold);
        Ok(GapTrace { rows, threshold, t0 })
    }
}

/// Trains the pair and builds the gap trace; `threshold` defaults to `1 / beta_e`.
pub fn run_gap_experiment(
    w0: &WeightMatrix,
    ds: &Dataset,
    eta: f64,
    rho: f64,
    iterations: usize,
    threshold: Option<f64>,
    options: &TrainOptions<'_>,
) -> Result<(PairedRuns, GapTrace)> {
    let runs = run_paired(w0, ds, eta, rho, iterations, options)?;
    let gap = GapTrace::from_runs(&runs, threshold.unwrap_or(1.0 / ds.spec().beta_e))?;
    Ok((runs, gap))
}

/// Strict `gap_sam(t) < gap_gd(t)` for `1 <= t <= T0`.
pub fn verify_gap(gap: &GapTrace) -> Result<Verdict> {
    let t0 = gap.t0.ok_or(Error::NoCrossing {
        threshold: gap.threshold,
        iterations: gap.rows.len().saturating_sub(1),
    })?;
    let mut worst = f64::INFINITY;
    for row in &gap.rows[1..=t0] {
        worst = worst.min(row.gap_gd() - row.gap_sam());
    }
    Ok(Verdict {
        check: "gap".into(),
        params: json!({ "threshold": gap.threshold, "t0": t0 }),
        pass: t0 >= 1 && worst > 0.0,
        worst_slack: worst,
        iterations_checked: t0,
    })
}

/// First iteration whose fast alignment reaches `threshold`.
pub fn crossing_iteration(trace: &TrainTrace, threshold: f64) -> Result<usize> {
    trace
        .rows
        .iter()
        .position(|r| r.fast_alignment >= threshold)
        .ok_or(Error::NoCrossing {
            threshold,
            iterations: trace.rows.len().saturating_sub(1),
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub t_cross: usize,
    pub slow_at_cross: f64,
    pub slow_bound: f64,
    pub slow_ok: bool,
}

impl CrossingReport {
    pub fn measure(trace: &TrainTrace, threshold: f64, slow_bound: f64) -> Result<Self> {
        let t = crossing_iteration(trace, threshold)?;
        let slow = trace.rows[t].slow_alignment;
        Ok(CrossingReport {
            t_cross: t,
            slow_at_cross: slow,
            slow_bound,
            slow_ok: slow <= slow_bound,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningOrderReport {
    pub threshold: f64,
    pub gd: CrossingReport,
    pub sam: CrossingReport,
    pub sam_not_earlier: bool,
    pub sam_strictly_later: bool,
}

impl LearningOrderReport {
    pub fn pass(&self) -> bool {
        self.gd.slow_ok && self.sam.slow_ok && self.sam_not_earlier
    }

    pub fn verdict(&self) -> Verdict {
        Verdict {
            check: "order".into(),
            params: json!({
                "threshold": self.threshold,
                "slow_bound": self.gd.slow_bound,
                "t_cross_gd": self.gd.t_cross,
                "t_cross_sam": self.sam.t_cross,
            }),
            pass: self.pass(),
            worst_slack: (self.gd.slow_bound - self.gd.slow_at_cross)
                .min(self.sam.slow_bound - self.sam.slow_at_cross)
                .min(self.sam.t_cross as f64 - self.gd.t_cross as f64),
            iterations_checked: self.gd.t_cross.max(self.sam.t_cross),
        }
    }
}

pub const DEFAULT_SLOW_MULTIPLE: f64 = 3.0;

/// Crossing of `1 / beta_e` for both runs, slow alignment at the crossing
/// against `c * sigma_0`, and the order of the two crossings.
pub fn check_learning_order(runs: &PairedRuns, sigma_0: f64, beta_e: f64, c: f64) -> Result<LearningOrderReport> {
    let threshold = 1.0 / beta_e;
    let bound = c * sigma_0;
    let gd = CrossingReport::measure(&runs.gd, threshold, bound)?;
    let sam = CrossingReport::measure(&runs.sam, threshold, bound)?;
    Ok(LearningOrderReport {
        threshold,
        gd,
        sam,
        sam_not_earlier: sam.t_cross >= gd.t_cross,
        sam_strictly_later: sam.t_cross > gd.t_cross,
    })
}

/// Closed-form upsampling factor for a filter with projections `proj_fast`
/// and `proj_slow` on the two features.
pub fn upsample_factor(proj_fast: f64, proj_slow: f64, spec: &DistributionSpec, alpha: f64, rho_t: f64) -> Result<f64> {
    if !(proj_fast > 0.0 && proj_slow > 0.0) {
        return Err(Error::RegimeViolation(format!(
            "projections must be positive, got fast {proj_fast}, slow {proj_slow}"
        )));
    }
    if !(rho_t >= 0.0 && rho_t.is_finite()) {
        return Err(Error::InvalidConfig(format!("rho_t = {rho_t}")));
    }
    let num = 1.0 - 3.0 * rho_t * spec.beta_d.powi(3) * proj_slow;
    let den = 1.0 - 3.0 * rho_t * alpha * spec.beta_e.powi(3) * proj_fast;
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::RegimeViolation(format!(
            "rho_t = {rho_t} too large: numerator {num}, denominator {den}"
        )));
    }
    Ok((num / den).powf(2.0 / 3.0))
}

/// Factor for one filter of `w` (the one most aligned with the fast feature
/// when `filter` is `None`), using the dataset's empirical fast fraction.
pub fn upsample_factor_for(w: &WeightMatrix, ds: &Dataset, filter: Option<usize>, rho_t: f64) -> Result<f64> {
    let basis = ds.basis();
    let j = filter.unwrap_or_else(|| argmax_filter(w, &basis.fast));
    let row = w.row(j);
    upsample_factor(
        dot(row, &basis.fast),
        dot(row, &basis.slow),
        ds.spec(),
        ds.fast_fraction(),
        rho_t,
    )
}

fn require_clean_features(ds: &Dataset) -> Result<()> {
    let spec = ds.spec();
    if spec.sigma_p != 0.0 && !spec.orthogonalize_noise {
        return Err(Error::RegimeViolation(
            "noise patches must be zero or orthogonal to both features".into(),
        ));
    }
    Ok(())
}

/// Early-phase gradient (all logit weights equal to 1) and the SAM ascent point.
fn perturbed(w: &WeightMatrix, ds: &Dataset, rho_t: f64) -> Result<(WeightMatrix, WeightMatrix)> {
    let g = frozen_logit_gradient(w, ds, 1.0)?;
    let w_eps = w.add_scaled(rho_t, &g);
    Ok((g, w_eps))
}

fn coefficient_ratio(g: &WeightMatrix, j: usize, ds: &Dataset) -> f64 {
    let row = g.row(j);
    dot(row, &ds.basis().slow) / dot(row, &ds.basis().fast)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMatch {
    pub filter: usize,
    pub k: f64,
    /// Slow/fast coefficient ratio of the SAM gradient on the original data.
    pub sam_ratio: f64,
    /// Same ratio for the GD gradient on the slow-amplified data.
    pub gd_ratio: f64,
    pub relative_error: f64,
}

/// Compares one SAM step on `ds` with one GD step on `ds.amplify_slow(k)`,
/// both under the early-phase gradient, through the ratio of their slow and
/// fast coefficients for one filter.
pub fn gradient_match(w: &WeightMatrix, ds: &Dataset, filter: Option<usize>, rho_t: f64) -> Result<GradientMatch> {
    require_clean_features(ds)?;
    let j = filter.unwrap_or_else(|| argmax_filter(w, &ds.basis().fast));
    let k = upsample_factor_for(w, ds, Some(j), rho_t)?;
    let (_, w_eps) = perturbed(w, ds, rho_t)?;
    let g_sam = frozen_logit_gradient(&w_eps, ds, 1.0)?;
    let amplified = if k >= 1.0 {
        ds.amplify_slow(k)?
    } else {
        ds.rescale_slow(k)
    };
    let g_gd = frozen_logit_gradient(w, &amplified, 1.0)?;
    let sam_ratio = coefficient_ratio(&g_sam, j, ds);
    let gd_ratio = coefficient_ratio(&g_gd, j, ds);
    Ok(GradientMatch {
        filter: j,
        k,
        sam_ratio,
        gd_ratio,
        relative_error: (sam_ratio - gd_ratio).abs() / gd_ratio.abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRatio {
    pub before: f64,
    pub after: f64,
    /// `alpha beta_e^3 <w, v_e> >= beta_d^3 <w, v_d>` for this filter.
    pub precondition: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rho_t: f64,
    pub filters: Vec<FilterRatio>,
    /// Worst `after - before` over filters meeting the precondition.
    pub worst_slack: f64,
    pub pass: bool,
}

/// Slow/fast projection ratio of every filter before and after the SAM ascent
/// step. Filters that meet the precondition must not lose slow weight.
pub fn check_gradient_ratio_monotonicity(w: &WeightMatrix, ds: &Dataset, rho_t: f64) -> Result<RatioReport> {
    require_clean_features(ds)?;
    let (_, w_eps) = perturbed(w, ds, rho_t)?;
    let spec = ds.spec();
    let alpha = ds.fast_fraction();
    let (vf, vs) = (&ds.basis().fast, &ds.basis().slow);
    let mut filters = Vec::with_capacity(w.filters());
    let mut worst = f64::INFINITY;
    for j in 0..w.filters() {
        let (cf, cs) = (dot(w.row(j), vf), dot(w.row(j), vs));
        let (ef, es) = (dot(w_eps.row(j), vf), dot(w_eps.row(j), vs));
        if !(cf > 0.0 && cs > 0.0 && ef > 0.0) {
            return Err(Error::RegimeViolation(format!(
                "filter {j}: projections before ({cf}, {cs}) or perturbed fast {ef} not positive"
            )));
        }
        let r = FilterRatio {
            before: cs / cf,
            after: es / ef,
            precondition: alpha * spec.beta_e.powi(3) * cf >= spec.beta_d.powi(3) * cs,
        };
        if r.precondition {
            worst = worst.min(r.after - r.before);
        }
        filters.push(r);
    }
    Ok(RatioReport {
        rho_t,
        filters,
        worst_slack: worst,
        pass: worst >= -1e-12 * worst.abs().max(1.0) || worst == f64::INFINITY,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursionSpec {
    pub z0: f64,
    pub rho: f64,
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    pub v: f64,
}

impl RecursionSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.z0 > 0.0
            && self.rho >= 0.0
            && self.z0 > self.rho
            && self.m > 0.0
            && self.big_m >= self.m
            && self.v >= self.z0
            && [self.z0, self.rho, self.m, self.big_m, self.v]
                .iter()
                .all(|x| x.is_finite());
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "recursion spec needs z0 > rho >= 0, M >= m > 0, v >= z0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bound(&self) -> f64 {
        let gap2 = (self.z0 - self.rho).powi(2);
        let doublings = ((self.v / self.z0).ln() / 2f64.ln()).ceil().max(0.0);
        2.0 * self.z0 / (self.m * gap2) + 4.0 * self.big_m * self.z0 * self.z0 / (self.m * gap2) * doublings
    }
}

pub const RECURSION_LIMIT: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionOutcome {
    pub measured: u64,
    pub bound: f64,
    pub holds: bool,
}

/// Iterates `z <- z + m (z - rho)^2` from `z0` until `z >= v`.
pub fn simulate_recursion(spec: &RecursionSpec) -> Result<RecursionOutcome> {
    spec.validate()?;
    let mut z = spec.z0;
    let mut t = 0u64;
    while z < spec.v {
        if t >= RECURSION_LIMIT {
            return Err(Error::NonConvergence { limit: RECURSION_LIMIT });
        }
        z += spec.m * (z - spec.rho).powi(2);
        t += 1;
    }
    let bound = spec.bound();
    Ok(RecursionOutcome {
        measured: t,
        bound,
        holds: t as f64 <= bound,
    })
}

pub fn recursion_verdict(specs: &[RecursionSpec]) -> Result<Verdict> {
    let mut worst = f64::INFINITY;
    for s in specs {
        let o = simulate_recursion(s)?;
        worst = worst.min(o.bound - o.measured as f64);
    }
    Ok(Verdict {
        check: "recursion".into(),
        params: json!({ "instances": specs.len() }),
        pass: worst >= 0.0,
        worst_slack: worst,
        iterations_checked: specs.len(),
    })
}

/// Seeded specs spread over several orders of magnitude in `m`, `v / z0`
/// and `rho / z0`.
pub fn random_recursion_specs(seed: u64, count: usize) -> Vec<RecursionSpec> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            let z0 = rng.random_range(0.05..1.0);
            let m: f64 = rng.random_range(0.1f64.ln()..10f64.ln()).exp();
            RecursionSpec {
                z0,
                rho: z0 * rng.random_range(0.0..0.9),
                m,
                big_m: m * rng.random_range(1.0..4.0),
                v: z0 * rng.random_range(0.0..100f64.ln()).exp(),
            }
        })
        .collect()
}

/// Random positive-projection weights, a filter index, and a radius inside
/// the valid range of the closed-form factor for every filter.
pub fn random_factor_instance(ds: &Dataset, filters: usize, seed: u64) -> Result<(WeightMatrix, usize, f64)> {
    let mut rng = seeded_rng(seed);
    let init = InitSpec {
        sigma_0: rng.random_range(0.01..0.3),
        seed: rng.random(),
        enforce_positive_projections: true,
    };
    let w = init_weights(&init, filters, ds.dim(), ds.basis())?;
    let j = rng.random_range(0..filters);
    let spec = ds.spec();
    let alpha = ds.fast_fraction();
    let strongest = w
        .rows()
        .map(|row| {
            let a = spec.beta_d.powi(3) * dot(row, &ds.basis().slow);
            let b = alpha * spec.beta_e.powi(3) * dot(row, &ds.basis().fast);
            a.max(b)
        })
        .fold(0.0, f64::max);
    let rho_max = 1.0 / (3.0 * strongest);
    Ok((w, j, rho_max * rng.random_range(0.05..0.9)))
}

pub fn factor_verdict(ds: &Dataset, filters: usize, count: usize, seed: u64) -> Result<(Verdict, Vec<GradientMatch>)> {
    let mut matches = Vec::with_capacity(count);
    for i in 0..count {
        let (w, j, rho_t) = random_factor_instance(ds, filters, seed.wrapping_add(i as u64))?;
        matches.push(gradient_match(&w, ds, Some(j), rho_t)?);
    }
    let worst = matches.iter().map(|m| m.relative_error).fold(0.0, f64::max);
    let k0 = upsample_factor(1.0, 1.0, ds.spec(), ds.fast_fraction(), 0.0)?;
    Ok((
        Verdict {
            check: "factor".into(),
            params: json!({ "instances": count, "tolerance": FACTOR_TOLERANCE, "k_at_zero_radius": k0 }),
            pass: worst < FACTOR_TOLERANCE && k0 == 1.0,
            worst_slack: FACTOR_TOLERANCE - worst,
            iterations_checked: count,
        },
        matches,
    ))
}

pub const FACTOR_TOLERANCE: f64 = 1e-8;

pub fn ratio_verdict(ds: &Dataset, filters: usize, count: usize, seed: u64) -> Result<Verdict> {
    let mut worst = f64::INFINITY;
    let mut pass = true;
    for i in 0..count {
        let (w, _, rho_t) = random_factor_instance(ds, filters, seed.wrapping_add(i as u64))?;
        let r = check_gradient_ratio_monotonicity(&w, ds, rho_t)?;
        worst = worst.min(r.worst_slack);
        pass &= r.pass;
    }
    Ok(Verdict {
        check: "ratio".into(),
        params: json!({ "instances": count }),
        pass,
        worst_slack: worst,
        iterations_checked: count,
    })
}

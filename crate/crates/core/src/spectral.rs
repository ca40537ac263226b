//! Top of the Hessian spectrum by Lanczos iteration on Hessian-vector products.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, scale};
use crate::model::{hessian_vector_product, HvpMode, WeightMatrix};
use crate::synthgen::{seeded_rng, Dataset};

/// A residual norm at or below this fraction of the largest tridiagonal entry
/// seen so far ends the iteration.
pub const BREAKDOWN_RTOL: f64 = 1e-10;

const QL_MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Top-k Ritz values, descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// `lambda_max / lambda_5`; absent when fewer than five values were requested.
    pub bulk_ratio: Option<f64>,
    /// Set when the fifth Ritz value is not positive, which makes the ratio meaningless.
    pub lambda5_nonpositive: bool,
    pub lanczos_steps: usize,
    pub reorthogonalized: bool,
    pub breakdown: bool,
    pub seed: u64,
    /// Largest Ritz value after each step.
    pub ritz_max_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanczosOptions {
    pub k: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "yes")]
    pub reorthogonalize: bool,
}

fn yes() -> bool {
    true
}

impl LanczosOptions {
    pub fn new(k: usize, steps: usize, seed: u64) -> Self {
        LanczosOptions {
            k,
            steps,
            seed,
            reorthogonalize: true,
        }
    }
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off` (`off[i]` couples `i` and `i + 1`), ascending.
/// Implicit QL with Wilkinson shifts.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if off.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            expected: n - 1,
            got: off.len(),
        });
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);

    for l in 0..n {
        let mut sweeps = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > QL_MAX_SWEEPS {
                return Err(Error::NonConvergence {
                    limit: QL_MAX_SWEEPS as u64,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d)
}

fn subtract_projections(basis: &[Vec<f64>], r: &mut [f64]) {
    for q in basis {
        let c = dot(q, r);
        axpy(-c, q, r);
    }
}

/// Lanczos on a symmetric operator of dimension `dim`. `apply(x, out)` must
/// write `A x` into `out`.
///
/// Stops after `steps` iterations, after `dim` iterations, or on breakdown,
/// whichever comes first; fewer than `k` Ritz values at that point is an error.
pub fn lanczos_top_k<F>(mut apply: F, dim: usize, opts: &LanczosOptions) -> Result<SpectrumReport>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if opts.k == 0 || opts.steps < opts.k {
        return Err(Error::InvalidConfig(format!(
            "need steps >= k >= 1, got k = {}, steps = {}",
            opts.k, opts.steps
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidConfig("operator dimension is 0".into()));
    }

    let mut rng = seeded_rng(opts.seed);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n0 = norm2(&q);
    scale(1.0 / n0, &mut q);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut r = vec![0.0; dim];
    let mut magnitude = 0.0f64;
    let mut breakdown = false;
    let limit = opts.steps.min(dim);

    for step in 0..limit {
        apply(&q, &mut r)?;
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let alpha = dot(&q, &r);
        axpy(-alpha, &q, &mut r);
        if let (Some(prev), Some(&b)) = (basis.last(), betas.last()) {
            axpy(-b, prev, &mut r);
        }
        basis.push(std::mem::take(&mut q));
        if opts.reorthogonalize {
            subtract_projections(&basis, &mut r);
            subtract_projections(&basis, &mut r);
        }
        alphas.push(alpha);
        let beta = norm2(&r);
        magnitude = magnitude.max(alpha.abs()).max(beta);

        let ritz = tridiagonal_eigenvalues(&alphas, &betas)?;
        history.push(*ritz.last().unwrap());

        if beta <= BREAKDOWN_RTOL * magnitude || beta == 0.0 {
            breakdown = step + 1 < limit;
            break;
        }
        if step + 1 < limit {
            betas.push(beta);
            q = r.iter().map(|x| x / beta).collect();
        }
    }

    let steps = alphas.len();
    let mut ritz = tridiagonal_eigenvalues(&alphas, &betas)?;
    if ritz.len() < opts.k {
        return Err(Error::KUnreachable {
            requested: opts.k,
            found: ritz.len(),
        });
    }
    ritz.reverse();
    ritz.truncate(opts.k);
    let lambda_max = ritz[0];
    let (bulk_ratio, lambda5_nonpositive) = match ritz.get(4) {
        Some(&l5) => (Some(lambda_max / l5), l5 <= 0.0),
        None => (None, false),
    };
    Ok(SpectrumReport {
        eigenvalues: ritz,
        lambda_max,
        bulk_ratio,
        lambda5_nonpositive,
        lanczos_steps: steps,
        reorthogonalized: opts.reorthogonalize,
        breakdown,
        seed: opts.seed,
        ritz_max_history: history,
    })
}

fn subsample(ds: &Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds.clone(),
    }
}

/// Spectrum of the empirical-loss Hessian at `w`, optionally on the first
/// `subsample` examples only.
pub fn model_spectrum(
    w: &WeightMatrix,
    ds: &Dataset,
    opts: &LanczosOptions,
    subsample_size: Option<usize>,
) -> Result<SpectrumReport> {
    let data = subsample(ds, subsample_size);
    let (filters, d) = (w.filters(), w.dim());
    let apply = |x: &[f64], out: &mut [f64]| -> Result<()> {
        let dir = WeightMatrix::from_vec(filters, d, x.to_vec())?;
        let hv = hessian_vector_product(w, &data, &dir, HvpMode::Analytic)?;
        out.copy_from_slice(hv.as_slice());
        Ok(())
    };
    lanczos_top_k(apply, filters * d, opts)
}

/// Dense Hessian, row-major, assembled column by column from analytic HVPs.
/// Only sensible for tiny models.
pub fn dense_hessian(w: &WeightMatrix, ds: &Dataset, subsample_size: Option<usize>) -> Result<Vec<f64>> {
    let data = subsample(ds, subsample_size);
    let n = w.filters() * w.dim();
    let mut h = vec![0.0; n * n];
    let mut e = WeightMatrix::zeros(w.filters(), w.dim());
    for col in 0..n {
        e.as_mut_slice()[col] = 1.0;
        let hv = hessian_vector_product(w, &data, &e, HvpMode::Analytic)?;
        e.as_mut_slice()[col] = 0.0;
        for (row, &v) in hv.as_slice().iter().enumerate() {
            h[row * n + col] = v;
        }
    }
    Ok(h)
}

//! Two-layer CNN with cubic activation, `f(x; W) = sum_j sum_p <w_j, x_p>^3`,
//! trained on the mean logistic loss.
//!
//! Gradients and Hessian-vector products are closed form. Per-example work is
//! split into fixed chunks of [`CHUNK`] examples that may run on any rayon
//! thread; chunk partials are then reduced sequentially in chunk order, so
//! the results do not depend on the thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::synthgen::{seeded_rng, Dataset, FeatureBasis, PatchedExample};

/// Examples per reduction chunk.
pub const CHUNK: usize = 256;

/// Filter bank `W = [w_1, ..., w_J]`, stored row-major (`J x d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    filters: usize,
    dim: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn zeros(filters: usize, dim: usize) -> Self {
        WeightMatrix {
            filters,
            dim,
            data: vec![0.0; filters * dim],
        }
    }

    pub fn from_vec(filters: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != filters * dim {
            return Err(Error::DimensionMismatch {
                expected: filters * dim,
                got: data.len(),
            });
        }
        Ok(WeightMatrix { filters, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(WeightMatrix {
            filters: rows.len(),
            dim,
            data,
        })
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &WeightMatrix) -> Result<()> {
        if self.filters != other.filters || self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &WeightMatrix) -> WeightMatrix {
        let mut out = self.clone();
        axpy(alpha, &other.data, &mut out.data);
        out
    }

    pub fn inner(&self, other: &WeightMatrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reorders filters: row `j` of the output is row `order[j]` of `self`.
    pub fn permute_filters(&self, order: &[usize]) -> WeightMatrix {
        let mut out = WeightMatrix::zeros(self.filters, self.dim);
        for (j, &src) in order.iter().enumerate() {
            out.row_mut(j).copy_from_slice(self.row(src));
        }
        out
    }
}

/// Default init scale `sqrt(ln(d) / d)`.
pub fn default_sigma0(d: usize) -> f64 {
    ((d as f64).ln() / d as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub sigma_0: f64,
    pub seed: u64,
    /// Flip the `v_e` and `v_d` components of every filter to be positive.
    #[serde(default)]
    pub enforce_positive_projections: bool,
}

impl InitSpec {
    pub fn new(d: usize, seed: u64) -> Self {
        InitSpec {
            sigma_0: default_sigma0(d),
            seed,
            enforce_positive_projections: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_0 > 0.0 && self.sigma_0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_0 = {} (need finite, > 0)",
                self.sigma_0
            )));
        }
        Ok(())
    }
}

/// I.i.d. `Normal(0, sigma_0^2)` filters, drawn row by row.
pub fn init_weights(init: &InitSpec, filters: usize, dim: usize, basis: &FeatureBasis) -> Result<WeightMatrix> {
    init.validate()?;
    if filters == 0 || dim == 0 {
        return Err(Error::InvalidConfig("J and d must be >= 1".into()));
    }
    if basis.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: basis.dim(),
        });
    }
    let mut rng = seeded_rng(init.seed);
    let data: Vec<f64> = (0..filters * dim)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            init.sigma_0 * g
        })
        .collect();
    let mut w = WeightMatrix { filters, dim, data };
    if init.enforce_positive_projections {
        for j in 0..filters {
            let row = w.row_mut(j);
            for v in [&basis.fast, &basis.slow] {
                let c = dot(row, v);
                if c < 0.0 {
                    axpy(-2.0 * c, v, row);
                }
            }
        }
    }
    Ok(w)
}

/// `l(z) = log(1 + exp(-z))` without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `sigmoid(-margin) = 1 / (1 + exp(margin))`, the per-example logit weight.
pub fn logit_weight(margin: f64) -> f64 {
    if margin >= 0.0 {
        let e = (-margin).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + margin.exp())
    }
}

/// Margin and logit weight of one example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerExampleState {
    pub margin: f64,
    pub logit_weight: f64,
}

impl PerExampleState {
    pub fn from_margin(margin: f64) -> Self {
        PerExampleState {
            margin,
            logit_weight: logit_weight(margin),
        }
    }
}

fn check_dims(w: &WeightMatrix, ds: &Dataset) -> Result<()> {
    if w.dim != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: w.dim,
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// `W` stored transposed (`d x J`) so that projecting a patch onto all
/// filters is a sequence of `J`-wide axpys. Each `<w_j, x>` is accumulated
/// over coordinates in index order.
struct Projector {
    filters: usize,
    wt: Vec<f64>,
}

impl Projector {
    fn new(w: &WeightMatrix) -> Self {
        let (j_count, d) = (w.filters, w.dim);
        let mut wt = vec![0.0; j_count * d];
        for j in 0..j_count {
            for k in 0..d {
                wt[k * j_count + j] = w.data[j * d + k];
            }
        }
        Projector { filters: j_count, wt }
    }

    /// `out[j] = <w_j, x>`
    #[inline]
    fn project(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                let col = &self.wt[k * self.filters..(k + 1) * self.filters];
                for (o, &wk) in out.iter_mut().zip(col) {
                    *o += xk * wk;
                }
            }
        }
    }

    /// Sum over patches and filters of `<w_j, x_p>^3`; `z` receives the
    /// projections patch-major.
    #[inline]
    fn output(&self, ex: &PatchedExample, z: &mut [f64]) -> f64 {
        let mut f = 0.0;
        for (pi, x) in ex.patches().enumerate() {
            let zp = &mut z[pi * self.filters..(pi + 1) * self.filters];
            self.project(x, zp);
            for &zz in zp.iter() {
                f += zz * zz * zz;
            }
        }
        f
    }
}

/// Accumulates `gt[k][j] += x[k] * c[j]` into a transposed (`d x J`) buffer.
#[inline]
fn scatter(x: &[f64], c: &[f64], gt: &mut [f64]) {
    let j_count = c.len();
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            let col = &mut gt[k * j_count..(k + 1) * j_count];
            for (g, &cj) in col.iter_mut().zip(c) {
                *g += xk * cj;
            }
        }
    }
}

fn untranspose(gt: &[f64], filters: usize, dim: usize) -> Vec<f64> {
    let mut data = vec![0.0; filters * dim];
    for k in 0..dim {
        for j in 0..filters {
            data[j * dim + k] = gt[k * filters + j];
        }
    }
    data
}

/// `f(x; W)`.
pub fn forward(w: &WeightMatrix, example: &PatchedExample) -> Result<f64> {
    if w.dim != example.dim() {
        return Err(Error::DimensionMismatch {
            expected: example.dim(),
            got: w.dim,
        });
    }
    let proj = Projector::new(w);
    let mut z = vec![0.0; example.num_patches() * w.filters];
    Ok(proj.output(example, &mut z))
}

/// Model outputs `f(x_i; W)` for every example.
pub fn outputs(w: &WeightMatrix, ds: &Dataset) -> Result<Vec<f64>> {
    check_dims(w, ds)?;
    let proj = Projector::new(w);
    let width = ds.spec().patches * w.filters;
    let parts: Vec<Vec<f64>> = ds
        .examples()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut z = vec![0.0; width];
            chunk.iter().map(|ex| proj.output(ex, &mut z)).collect()
        })
        .collect();
    Ok(parts.concat())
}

/// Margins `y_i f(x_i; W)`.
pub fn margins(w: &WeightMatrix, ds: &Dataset) -> Result<Vec<f64>> {
    let out = outputs(w, ds)?;
    Ok(out.into_iter().zip(ds.examples()).map(|(f, ex)| ex.y() * f).collect())
}

fn weighted_mean_loss(margins: &[f64], ds: &Dataset) -> f64 {
    let n = ds.effective_size() as f64;
    let mut total = 0.0;
    for (&m, &mult) in margins.iter().zip(ds.multiplicity()) {
        total += mult as f64 * logistic_loss(m);
    }
    total / n
}

/// Multiplicity-weighted mean logistic loss.
pub fn empirical_loss(w: &WeightMatrix, ds: &Dataset) -> Result<f64> {
    let m = margins(w, ds)?;
    Ok(weighted_mean_loss(&m, ds))
}

/// How the per-example logit weights `l_i` enter the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogitWeights {
    /// `l_i = sigmoid(-y_i f(x_i; W))`, the true gradient.
    Live,
    /// Every `l_i` frozen to the same constant (early-training linearization).
    Frozen(f64),
}

/// Loss, margins and (optionally) gradient from a single pass over the data.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub margins: Vec<f64>,
    pub loss: f64,
    pub gradient: Option<WeightMatrix>,
}

pub fn evaluate(w: &WeightMatrix, ds: &Dataset, with_gradient: bool, logits: LogitWeights) -> Result<Evaluation> {
    check_dims(w, ds)?;
    let filters = w.filters;
    let dim = w.dim;
    let p = ds.spec().patches;
    let scale = -3.0 / ds.effective_size() as f64;

    let proj = Projector::new(w);
    let partials: Vec<(Vec<f64>, Option<Vec<f64>>)> = ds
        .examples()
        .par_chunks(CHUNK)
        .zip(ds.multiplicity().par_chunks(CHUNK))
        .map(|(chunk, mults)| {
            let mut gt = with_gradient.then(|| vec![0.0; filters * dim]);
            let mut margins = Vec::with_capacity(chunk.len());
            let mut z = vec![0.0; p * filters];
            let mut c = vec![0.0; filters];
            for (ex, &mult) in chunk.iter().zip(mults) {
                let f = proj.output(ex, &mut z);
                let y = ex.y();
                let margin = y * f;
                margins.push(margin);
                if let Some(gt) = gt.as_mut() {
                    let l = match logits {
                        LogitWeights::Live => logit_weight(margin),
                        LogitWeights::Frozen(c) => c,
                    };
                    let coef = scale * mult as f64 * l * y;
                    for (pi, x) in ex.patches().enumerate() {
                        for (cj, &zz) in c.iter_mut().zip(&z[pi * filters..(pi + 1) * filters]) {
                            *cj = coef * zz * zz;
                        }
                        scatter(x, &c, gt);
                    }
                }
            }
            (margins, gt)
        })
        .collect();

    let mut margins = Vec::with_capacity(ds.len());
    let mut total = with_gradient.then(|| vec![0.0; filters * dim]);
    for (m, g) in partials {
        margins.extend(m);
        if let (Some(total), Some(g)) = (total.as_mut(), g) {
            for (t, gi) in total.iter_mut().zip(g) {
                *t += gi;
            }
        }
    }
    let gradient = total.map(|gt| untranspose(&gt, filters, dim));
    let loss = weighted_mean_loss(&margins, ds);
    Ok(Evaluation {
        margins,
        loss,
        gradient: gradient.map(|data| WeightMatrix { filters, dim, data }),
    })
}

/// `grad_{w_j} L = -(3/N) sum_i m_i l_i y_i sum_p <w_j, x_ip>^2 x_ip`.
pub fn gradient(w: &WeightMatrix, ds: &Dataset) -> Result<WeightMatrix> {
    Ok(evaluate(w, ds, true, LogitWeights::Live)?
        .gradient
        .expect("gradient requested"))
}

/// Gradient with every logit weight frozen to `l`.
pub fn frozen_logit_gradient(w: &WeightMatrix, ds: &Dataset, l: f64) -> Result<WeightMatrix> {
    Ok(evaluate(w, ds, true, LogitWeights::Frozen(l))?
        .gradient
        .expect("gradient requested"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HvpMode {
    Analytic,
    /// Central difference of gradients with step `eps`.
    FiniteDifference {
        eps: f64,
    },
}

/// Hessian of the empirical loss applied to `direction`.
pub fn hessian_vector_product(
    w: &WeightMatrix,
    ds: &Dataset,
    direction: &WeightMatrix,
    mode: HvpMode,
) -> Result<WeightMatrix> {
    check_dims(w, ds)?;
    w.same_shape(direction)?;
    match mode {
        HvpMode::Analytic => Ok(analytic_hvp(w, ds, direction)),
        HvpMode::FiniteDifference { eps } => {
            let plus = gradient(&w.add_scaled(eps, direction), ds)?;
            let minus = gradient(&w.add_scaled(-eps, direction), ds)?;
            let mut out = plus.add_scaled(-1.0, &minus);
            for x in out.as_mut_slice() {
                *x /= 2.0 * eps;
            }
            Ok(out)
        }
    }
}

// For one example with z_pj = <w_j, x_p>, u_pj = <v_j, x_p>, margin s = y f and
// l = sigmoid(-s):
//   (H v)_j = (m/N) [ l (1 - l) (grad f . v) sum_p 3 z_pj^2 x_p
//                     - l y sum_p 6 z_pj u_pj x_p ],
//   grad f . v = sum_pj 3 z_pj^2 u_pj.
fn analytic_hvp(w: &WeightMatrix, ds: &Dataset, v: &WeightMatrix) -> WeightMatrix {
    let filters = w.filters;
    let dim = w.dim;
    let p = ds.spec().patches;
    let inv_n = 1.0 / ds.effective_size() as f64;

    let proj_w = Projector::new(w);
    let proj_v = Projector::new(v);
    let partials: Vec<Vec<f64>> = ds
        .examples()
        .par_chunks(CHUNK)
        .zip(ds.multiplicity().par_chunks(CHUNK))
        .map(|(chunk, mults)| {
            let mut acc = vec![0.0; filters * dim];
            let mut z = vec![0.0; p * filters];
            let mut u = vec![0.0; p * filters];
            let mut c = vec![0.0; filters];
            for (ex, &mult) in chunk.iter().zip(mults) {
                let f = proj_w.output(ex, &mut z);
                let mut df = 0.0;
                for (pi, x) in ex.patches().enumerate() {
                    let up = &mut u[pi * filters..(pi + 1) * filters];
                    proj_v.project(x, up);
                    for (&zz, &uu) in z[pi * filters..(pi + 1) * filters].iter().zip(up.iter()) {
                        df += 3.0 * zz * zz * uu;
                    }
                }
                let y = ex.y();
                let margin = y * f;
                let l = logit_weight(margin);
                let one_minus_l = logit_weight(-margin);
                let weight = mult as f64 * inv_n;
                let curv = weight * l * one_minus_l * df;
                let bend = -weight * l * y;
                for (pi, x) in ex.patches().enumerate() {
                    let range = pi * filters..(pi + 1) * filters;
                    for ((cj, &zz), &uu) in c.iter_mut().zip(&z[range.clone()]).zip(&u[range]) {
                        *cj = curv * 3.0 * zz * zz + bend * 6.0 * zz * uu;
                    }
                    scatter(x, &c, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; filters * dim];
    for part in partials {
        for (t, x) in total.iter_mut().zip(part) {
            *t += x;
        }
    }
    let data = untranspose(&total, filters, dim);
    WeightMatrix { filters, dim, data }
}

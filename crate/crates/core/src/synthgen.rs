//! Synthetic patch data with one fast-learnable and one slow-learnable feature.
//!
//! Each example has `P` patches of dimension `d`. One patch carries the slow
//! feature `beta_d * y * v_d`, one carries the fast feature `beta_e * y * v_e`
//! (or the zero vector when masked, probability `1 - alpha`), and the rest are
//! isotropic Gaussian noise with per-coordinate variance `sigma_p^2 / d`.
//! Patch order is shuffled independently per example.
//!
//! Randomness comes from a single ChaCha20 stream ([`RNG_ALGORITHM`]) seeded
//! with `DistributionSpec::seed`; draws are consumed example by example in a
//! fixed order, so a spec always reproduces the same dataset bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, scale};

/// Identity of the random stream behind every seeded draw in this crate.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng/rand_chacha-0.9+StandardNormal/rand_distr-0.5";

/// Canonical slot of the slow-feature patch before shuffling.
pub const SLOW_SLOT: usize = 0;
/// Canonical slot of the fast-feature patch before shuffling.
pub const FAST_SLOT: usize = 1;

pub(crate) fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn default_patches() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    /// Patch dimension.
    pub d: usize,
    /// Patches per example.
    #[serde(default = "default_patches")]
    pub patches: usize,
    /// Fast-feature strength.
    pub beta_e: f64,
    /// Slow-feature strength.
    pub beta_d: f64,
    /// Probability that the fast feature is present.
    pub alpha: f64,
    /// Noise scale; each noise coordinate is `Normal(0, sigma_p^2 / d)`.
    pub sigma_p: f64,
    /// Number of examples.
    pub n: usize,
    pub seed: u64,
    /// Project every noise patch off `span{v_e, v_d}`.
    #[serde(default)]
    pub orthogonalize_noise: bool,
}

impl DistributionSpec {
    /// The toy configuration: `d = 50`, `P = 3`, `beta_e = 1`, `beta_d = 0.2`,
    /// `alpha = 0.9`, `sigma_p / sqrt(d) = 0.125`.
    pub fn toy(n: usize, seed: u64) -> Self {
        let d = 50;
        DistributionSpec {
            d,
            patches: 3,
            beta_e: 1.0,
            beta_d: 0.2,
            alpha: 0.9,
            sigma_p: 0.125 * (d as f64).sqrt(),
            n,
            seed,
            orthogonalize_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.d < 2 {
            return bad(format!("d = {} (need d >= 2)", self.d));
        }
        if self.patches < 3 {
            return bad(format!("patches = {} (need P >= 3)", self.patches));
        }
        if self.n < 1 {
            return bad("n = 0 (need n >= 1)".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if !(self.beta_d >= 0.0 && self.beta_d.is_finite()) {
            return bad(format!("beta_d = {} (need finite, >= 0)", self.beta_d));
        }
        if !self.beta_e.is_finite() {
            return bad(format!("beta_e = {} is not finite", self.beta_e));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return bad(format!("sigma_p = {} (need finite, >= 0)", self.sigma_p));
        }
        Ok(())
    }

    /// `0 <= beta_d < beta_e`, the ordering the feature-learning results assume.
    pub fn in_theory_regime(&self) -> bool {
        0.0 <= self.beta_d && self.beta_d < self.beta_e
    }

    /// Per-coordinate noise standard deviation `sigma_p / sqrt(d)`.
    pub fn noise_std(&self) -> f64 {
        self.sigma_p / (self.d as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// `v_e = e_1`, `v_d = e_2`.
    Canonical,
    /// Gram-Schmidt on two seeded Gaussian vectors.
    Rotated { seed: u64 },
}

/// Orthonormal pair `(v_e, v_d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub fast: Vec<f64>,
    pub slow: Vec<f64>,
}

impl FeatureBasis {
    pub fn dim(&self) -> usize {
        self.fast.len()
    }
}

pub fn make_basis(d: usize, mode: BasisMode) -> Result<FeatureBasis> {
    if d < 2 {
        return Err(Error::InvalidSpec(format!("basis dimension {d} < 2")));
    }
    match mode {
        BasisMode::Canonical => {
            let mut fast = vec![0.0; d];
            let mut slow = vec![0.0; d];
            fast[0] = 1.0;
            slow[1] = 1.0;
            Ok(FeatureBasis { fast, slow })
        }
        BasisMode::Rotated { seed } => {
            let mut rng = seeded_rng(seed);
            loop {
                let mut fast: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut slow: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let nf = norm2(&fast);
                if nf < 1e-8 {
                    continue;
                }
                scale(1.0 / nf, &mut fast);
                // two passes of modified Gram-Schmidt keep the residual at rounding level
                for _ in 0..2 {
                    let c = dot(&slow, &fast);
                    axpy(-c, &fast, &mut slow);
                }
                let ns = norm2(&slow);
                if ns < 1e-8 {
                    continue;
                }
                scale(1.0 / ns, &mut slow);
                return Ok(FeatureBasis { fast, slow });
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchedExample {
    /// `P * d` values, patch-major.
    pub(crate) patches: Vec<f64>,
    pub(crate) label: i8,
    pub(crate) has_fast_feature: bool,
    /// `permutation[slot]` is the position of canonical slot `slot`
    /// (0 = slow, 1 = fast, 2.. = noise) within `patches`.
    pub(crate) permutation: Vec<usize>,
}

impl PatchedExample {
    pub fn new(patches: Vec<f64>, label: i8, has_fast_feature: bool, permutation: Vec<usize>) -> Result<Self> {
        let p = permutation.len();
        if p == 0 || !patches.len().is_multiple_of(p) {
            return Err(Error::InvalidSpec(format!(
                "{} patch values do not split into {p} patches",
                patches.len()
            )));
        }
        let mut seen = vec![false; p];
        for &pos in &permutation {
            if pos >= p || seen[pos] {
                return Err(Error::InvalidSpec(format!("{permutation:?} is not a permutation")));
            }
            seen[pos] = true;
        }
        if label != 1 && label != -1 {
            return Err(Error::InvalidSpec(format!("label {label} is not +-1")));
        }
        Ok(PatchedExample {
            patches,
            label,
            has_fast_feature,
            permutation,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.permutation.len()
    }

    pub fn dim(&self) -> usize {
        self.patches.len() / self.permutation.len()
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.patches[p * d..(p + 1) * d]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.patches.chunks_exact(self.dim())
    }

    pub fn raw(&self) -> &[f64] {
        &self.patches
    }

    pub fn label(&self) -> i8 {
        self.label
    }

    pub fn y(&self) -> f64 {
        self.label as f64
    }

    pub fn has_fast_feature(&self) -> bool {
        self.has_fast_feature
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn slow_patch(&self) -> &[f64] {
        self.patch(self.permutation[SLOW_SLOT])
    }

    pub fn fast_patch(&self) -> &[f64] {
        self.patch(self.permutation[FAST_SLOT])
    }

    pub fn noise_patches(&self) -> impl Iterator<Item = &[f64]> {
        self.permutation[2..].iter().map(move |&p| self.patch(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub(crate) spec: DistributionSpec,
    pub(crate) basis: FeatureBasis,
    pub(crate) examples: Vec<PatchedExample>,
    pub(crate) multiplicity: Vec<u32>,
}

impl Dataset {
    pub fn from_parts(
        spec: DistributionSpec,
        basis: FeatureBasis,
        examples: Vec<PatchedExample>,
        multiplicity: Vec<u32>,
    ) -> Result<Self> {
        if examples.len() != multiplicity.len() {
            return Err(Error::DimensionMismatch {
                expected: examples.len(),
                got: multiplicity.len(),
            });
        }
        if multiplicity.contains(&0) {
            return Err(Error::InvalidSpec("multiplicity must be >= 1".into()));
        }
        for ex in &examples {
            if ex.num_patches() != spec.patches {
                return Err(Error::DimensionMismatch {
                    expected: spec.patches,
                    got: ex.num_patches(),
                });
            }
            if ex.dim() != spec.d {
                return Err(Error::DimensionMismatch {
                    expected: spec.d,
                    got: ex.dim(),
                });
            }
        }
        if basis.fast.len() != spec.d || basis.slow.len() != spec.d {
            return Err(Error::DimensionMismatch {
                expected: spec.d,
                got: basis.fast.len(),
            });
        }
        Ok(Dataset {
            spec,
            basis,
            examples,
            multiplicity,
        })
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn basis(&self) -> &FeatureBasis {
        &self.basis
    }

    pub fn examples(&self) -> &[PatchedExample] {
        &self.examples
    }

    pub fn multiplicity(&self) -> &[u32] {
        &self.multiplicity
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    pub fn effective_size(&self) -> u64 {
        self.multiplicity.iter().map(|&m| m as u64).sum()
    }

    /// Multiplicity-weighted fraction of examples that carry the fast feature.
    pub fn fast_fraction(&self) -> f64 {
        let present: u64 = self
            .examples
            .iter()
            .zip(&self.multiplicity)
            .filter(|(ex, _)| ex.has_fast_feature)
            .map(|(_, &m)| m as u64)
            .sum();
        present as f64 / self.effective_size() as f64
    }

    pub fn with_multiplicity(&self, multiplicity: Vec<u32>) -> Result<Self> {
        Dataset::from_parts(
            self.spec.clone(),
            self.basis.clone(),
            self.examples.clone(),
            multiplicity,
        )
    }

    /// Expands multiplicities into physical copies (each copy placed right
    /// after its original).
    pub fn flatten(&self) -> Dataset {
        let mut examples = Vec::with_capacity(self.effective_size() as usize);
        for (ex, &m) in self.examples.iter().zip(&self.multiplicity) {
            for _ in 0..m {
                examples.push(ex.clone());
            }
        }
        let multiplicity = vec![1; examples.len()];
        let mut spec = self.spec.clone();
        spec.n = examples.len();
        Dataset {
            spec,
            basis: self.basis.clone(),
            examples,
            multiplicity,
        }
    }

    /// First `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let mut spec = self.spec.clone();
        spec.n = n;
        Dataset {
            spec,
            basis: self.basis.clone(),
            examples: self.examples[..n].to_vec(),
            multiplicity: self.multiplicity[..n].to_vec(),
        }
    }

    /// Amplifies the slow feature: every slow patch becomes `k * beta_d * y * v_d`.
    pub fn amplify_slow(&self, k: f64) -> Result<Dataset> {
        if !(k >= 1.0 && k.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "amplification factor {k} (need finite k >= 1)"
            )));
        }
        Ok(self.rescale_slow(k))
    }

    pub(crate) fn rescale_slow(&self, k: f64) -> Dataset {
        let mut out = self.clone();
        let beta_d = k * self.spec.beta_d;
        out.spec.beta_d = beta_d;
        let d = self.spec.d;
        for ex in &mut out.examples {
            let coef = beta_d * ex.y();
            let pos = ex.permutation[SLOW_SLOT];
            for (x, v) in ex.patches[pos * d..(pos + 1) * d].iter_mut().zip(&self.basis.slow) {
                *x = coef * v;
            }
        }
        out
    }
}

/// Draws a dataset from the distribution described by `spec`.
pub fn generate(spec: &DistributionSpec, basis: &FeatureBasis) -> Result<Dataset> {
    spec.validate()?;
    if basis.dim() != spec.d {
        return Err(Error::DimensionMismatch {
            expected: spec.d,
            got: basis.dim(),
        });
    }
    let d = spec.d;
    let p = spec.patches;
    let noise_std = spec.noise_std();
    let mut rng = seeded_rng(spec.seed);
    let mut examples = Vec::with_capacity(spec.n);
    let mut noise = vec![0.0; (p - 2) * d];

    for _ in 0..spec.n {
        let label: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let has_fast = rng.random::<f64>() < spec.alpha;
        for z in noise.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *z = noise_std * g;
        }
        if spec.orthogonalize_noise {
            for xi in noise.chunks_exact_mut(d) {
                let ce = dot(xi, &basis.fast);
                axpy(-ce, &basis.fast, xi);
                let cd = dot(xi, &basis.slow);
                axpy(-cd, &basis.slow, xi);
            }
        }
        let mut permutation: Vec<usize> = (0..p).collect();
        permutation.shuffle(&mut rng);

        let y = label as f64;
        let mut patches = vec![0.0; p * d];
        let slow_pos = permutation[SLOW_SLOT];
        for (x, v) in patches[slow_pos * d..(slow_pos + 1) * d].iter_mut().zip(&basis.slow) {
            *x = spec.beta_d * y * v;
        }
        if has_fast {
            let fast_pos = permutation[FAST_SLOT];
            for (x, v) in patches[fast_pos * d..(fast_pos + 1) * d].iter_mut().zip(&basis.fast) {
                *x = spec.beta_e * y * v;
            }
        }
        for (slot, xi) in noise.chunks_exact(d).enumerate() {
            let pos = permutation[2 + slot];
            patches[pos * d..(pos + 1) * d].copy_from_slice(xi);
        }
        examples.push(PatchedExample {
            patches,
            label,
            has_fast_feature: has_fast,
            permutation,
        });
    }

    Ok(Dataset {
        spec: spec.clone(),
        basis: basis.clone(),
        multiplicity: vec![1; spec.n],
        examples,
    })
}

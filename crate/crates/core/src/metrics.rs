//! Measurement instruments: feature alignments, classification error, L1 norm,
//! forgetting scores and the noise-alignment monitor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{margins, WeightMatrix};
use crate::optim::{Observer, Snapshot};
use crate::synthgen::Dataset;

/// `max_j <w_j, v>`.
pub fn alignment(w: &WeightMatrix, v: &[f64]) -> f64 {
    w.rows().map(|row| dot(row, v)).fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the filter with the largest projection on `v` (first on ties).
pub fn argmax_filter(w: &WeightMatrix, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, row) in w.rows().enumerate() {
        let c = dot(row, v);
        if c > best_val {
            best = j;
            best_val = c;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub iteration: usize,
    pub fast: f64,
    pub slow: f64,
}

impl AlignmentSample {
    pub fn measure(iteration: usize, w: &WeightMatrix, ds: &Dataset) -> Self {
        AlignmentSample {
            iteration,
            fast: alignment(w, &ds.basis().fast),
            slow: alignment(w, &ds.basis().slow),
        }
    }
}

/// Weighted fraction of non-positive margins. A zero output counts as an error.
pub fn error_from_margins(margins: &[f64], multiplicity: &[u32]) -> f64 {
    let mut wrong = 0u64;
    let mut total = 0u64;
    for (&m, &mult) in margins.iter().zip(multiplicity) {
        total += mult as u64;
        if m <= 0.0 {
            wrong += mult as u64;
        }
    }
    wrong as f64 / total as f64
}

pub fn classification_error(w: &WeightMatrix, ds: &Dataset) -> Result<f64> {
    let m = margins(w, ds)?;
    Ok(error_from_margins(&m, ds.multiplicity()))
}

pub fn l1_norm(w: &WeightMatrix) -> f64 {
    w.as_slice().iter().map(|x| x.abs()).sum()
}

/// `max_{j, noise patch} |<w_j, xi>|`.
pub fn noise_alignment_monitor(w: &WeightMatrix, ds: &Dataset) -> f64 {
    let mut worst = 0.0f64;
    for ex in ds.examples() {
        for xi in ex.noise_patches() {
            for row in w.rows() {
                worst = worst.max(dot(row, xi).abs());
            }
        }
    }
    worst
}

/// Per-example correctness history and its forgetting score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub correct: Vec<bool>,
    pub score: u32,
    pub first_correct_epoch: Option<usize>,
}

fn check_rectangular(history: &[Vec<bool>]) -> Result<usize> {
    let epochs = history.first().map(Vec::len).unwrap_or(0);
    if history.is_empty() || epochs == 0 {
        return Err(Error::InvalidConfig("empty correctness history".into()));
    }
    if let Some(row) = history.iter().find(|r| r.len() != epochs) {
        return Err(Error::DimensionMismatch {
            expected: epochs,
            got: row.len(),
        });
    }
    Ok(epochs)
}

/// Counts correct-to-incorrect transitions per example. `history[i][e]` is
/// whether example `i` was classified correctly at the end of epoch `e`.
pub fn forgetting_scores(history: &[Vec<bool>]) -> Result<Vec<u32>> {
    check_rectangular(history)?;
    Ok(history
        .iter()
        .map(|bits| bits.windows(2).filter(|w| w[0] && !w[1]).count() as u32)
        .collect())
}

pub fn forgetting_records(history: &[Vec<bool>]) -> Result<Vec<ForgettingRecord>> {
    let scores = forgetting_scores(history)?;
    Ok(history
        .iter()
        .zip(scores)
        .map(|(bits, score)| ForgettingRecord {
            correct: bits.clone(),
            score,
            first_correct_epoch: bits.iter().position(|&b| b),
        })
        .collect())
}

/// Training observer that records per-example correctness after every iteration.
#[derive(Clone, Debug, Default)]
pub struct CorrectnessRecorder {
    history: Vec<Vec<bool>>,
}

impl CorrectnessRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// `history[example][epoch]`.
    pub fn history(&self) -> &[Vec<bool>] {
        &self.history
    }

    pub fn into_history(self) -> Vec<Vec<bool>> {
        self.history
    }
}

impl Observer for CorrectnessRecorder {
    fn observe(&mut self, snapshot: &Snapshot<'_>) {
        if self.history.is_empty() {
            self.history = vec![Vec::new(); snapshot.margins.len()];
        }
        for (h, &m) in self.history.iter_mut().zip(snapshot.margins) {
            h.push(m > 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, InitSpec};
    use crate::synthgen::{generate, make_basis, BasisMode, DistributionSpec};

    #[test]
    fn alignment_basics() {
        let basis = make_basis(4, BasisMode::Canonical).unwrap();
        let w = WeightMatrix::from_rows(&[
            vec![0.7, 0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![-3.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(alignment(&w, &basis.fast), 0.7);
        assert_eq!(argmax_filter(&w, &basis.fast), 0);
        assert_eq!(alignment(&WeightMatrix::zeros(3, 4), &basis.fast), 0.0);
    }

    #[test]
    fn alignment_matches_loop_and_is_homogeneous() {
        let basis = make_basis(9, BasisMode::Rotated { seed: 3 }).unwrap();
        for seed in 0..20 {
            let w = init_weights(&InitSpec::new(9, seed), 6, 9, &basis).unwrap();
            let mut brute = f64::NEG_INFINITY;
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..9 {
                    s += w.row(j)[k] * basis.slow[k];
                }
                brute = brute.max(s);
            }
            let a = alignment(&w, &basis.slow);
            assert!((a - brute).abs() < 1e-14);
            let mut scaled = w.clone();
            crate::linalg::scale(2.5, scaled.as_mut_slice());
            assert!((alignment(&scaled, &basis.slow) - 2.5 * a).abs() < 1e-13);
        }
    }

    fn toy(n: usize) -> Dataset {
        let spec = DistributionSpec::toy(n, 17);
        let basis = make_basis(spec.d, BasisMode::Canonical).unwrap();
        generate(&spec, &basis).unwrap()
    }

    #[test]
    fn zero_weights_are_all_errors() {
        let ds = toy(50);
        assert_eq!(classification_error(&WeightMatrix::zeros(2, 50), &ds).unwrap(), 1.0);
        assert_eq!(noise_alignment_monitor(&WeightMatrix::zeros(2, 50), &ds), 0.0);
    }

    #[test]
    fn aligned_filter_classifies_everything() {
        // a filter along v_d scores every example with the right sign
        let ds = toy(200);
        let mut w = WeightMatrix::zeros(1, 50);
        w.row_mut(0)[1] = 1.0;
        w.row_mut(0)[0] = 0.5;
        let zero_noise = {
            let mut spec = ds.spec().clone();
            spec.sigma_p = 0.0;
            generate(&spec, ds.basis()).unwrap()
        };
        assert_eq!(classification_error(&w, &zero_noise).unwrap(), 0.0);
    }

    #[test]
    fn error_matches_brute_force_and_flattening() {
        let ds = toy(300);
        let w = init_weights(&InitSpec::new(50, 5), 4, 50, ds.basis()).unwrap();
        let err = classification_error(&w, &ds).unwrap();
        let wrong = ds
            .examples()
            .iter()
            .filter(|ex| ex.y() * crate::model::forward(&w, ex).unwrap() <= 0.0)
            .count();
        assert_eq!(err, wrong as f64 / 300.0);

        let mult: Vec<u32> = (0..300).map(|i| 1 + (i % 3) as u32).collect();
        let up = ds.with_multiplicity(mult).unwrap();
        let a = classification_error(&w, &up).unwrap();
        let b = classification_error(&w, &up.flatten()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn l1_norm_cases() {
        assert_eq!(l1_norm(&WeightMatrix::zeros(3, 3)), 0.0);
        let mut w = WeightMatrix::zeros(2, 2);
        w.as_mut_slice()[3] = 3.5;
        assert_eq!(l1_norm(&w), 3.5);
        w.as_mut_slice()[0] = -1.25;
        assert_eq!(l1_norm(&w), 4.75);
    }

    #[test]
    fn forgetting_cases() {
        let h = vec![
            vec![true, true, true, true],
            vec![true, false, true, false],
            vec![false, false, false, false],
            vec![false, true, false, true],
        ];
        assert_eq!(forgetting_scores(&h).unwrap(), vec![0, 2, 0, 1]);
        let recs = forgetting_records(&h).unwrap();
        assert_eq!(recs[0].first_correct_epoch, Some(0));
        assert_eq!(recs[2].first_correct_epoch, None);
        assert_eq!(recs[3].first_correct_epoch, Some(1));
        assert!(forgetting_scores(&[]).is_err());
        assert!(forgetting_scores(&[vec![true], vec![true, false]]).is_err());
    }

    #[test]
    fn forgetting_invariant_under_repeated_final_epoch() {
        let h = vec![vec![true, false, true], vec![false, true, false]];
        let mut ext = h.clone();
        for row in &mut ext {
            let last = *row.last().unwrap();
            row.push(last);
        }
        assert_eq!(forgetting_scores(&h).unwrap(), forgetting_scores(&ext).unwrap());
    }
}

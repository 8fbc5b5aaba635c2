//! Training objectives over a batch of trial probabilities.
//!
//! A batch holds `P(q_lm, h_nm)` for test speaker `l`, held-out index `m` and
//! enrollment speaker `n`; the trial is a target exactly when `l == n`. Both
//! losses are sums over the batch, not means.

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before any log.
pub const PROB_CLIP: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 0.6;

/// `P(q_lm, h_nm)` stored with `n` fastest, then `m`, then `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    speakers: usize,
    tests_per_speaker: usize,
    probs: Vec<f64>,
}

impl BatchScores {
    pub fn new(speakers: usize, tests_per_speaker: usize, probs: Vec<f64>) -> Result<Self> {
        if speakers == 0 || tests_per_speaker == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch needs at least one speaker and one test per speaker, got {speakers}x{tests_per_speaker}"
            )));
        }
        let want = speakers * tests_per_speaker * speakers;
        if probs.len() != want {
            return Err(Error::Shape {
                op: "BatchScores::new",
                left: format!("{speakers}x{tests_per_speaker}x{speakers} = {want}"),
                right: format!("{} probabilities", probs.len()),
            });
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {} at index {i} outside [0, 1]",
                probs[i]
            )));
        }
        Ok(BatchScores {
            speakers,
            tests_per_speaker,
            probs,
        })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn tests_per_speaker(&self) -> usize {
        self.tests_per_speaker
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn index(&self, l: usize, m: usize, n: usize) -> usize {
        (l * self.tests_per_speaker + m) * self.speakers + n
    }

    #[inline]
    pub fn get(&self, l: usize, m: usize, n: usize) -> f64 {
        self.probs[self.index(l, m, n)]
    }

    /// Row of probabilities of test `(l, m)` against every enrollment speaker.
    fn row(&self, l: usize, m: usize) -> &[f64] {
        let start = self.index(l, m, 0);
        &self.probs[start..start + self.speakers]
    }

    pub fn pair_count(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub ge2e: f64,
    pub lambda: f64,
}

#[inline]
fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// `-Σ [1(l=n) log P + 1(l≠n) log(1-P)]` and `dL/dP`.
pub fn bce_loss(batch: &BatchScores) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; batch.probs.len()];
    for l in 0..batch.speakers {
        for m in 0..batch.tests_per_speaker {
            for n in 0..batch.speakers {
                let idx = batch.index(l, m, n);
                let p = clip(batch.probs[idx]);
                if l == n {
                    value -= p.ln();
                    grad[idx] = -1.0 / p;
                } else {
                    value -= (1.0 - p).ln();
                    grad[idx] = 1.0 / (1.0 - p);
                }
            }
        }
    }
    (value, grad)
}

/// `-Σ_{l,m} log softmax_n(P(q_lm, h_nm))[l]` and `dL/dP`.
///
/// The softmax runs over probabilities, not cosines.
pub fn ge2e_loss(batch: &BatchScores) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; batch.probs.len()];
    for l in 0..batch.speakers {
        for m in 0..batch.tests_per_speaker {
            let row = batch.row(l, m);
            let lse = log_sum_exp(row);
            value += lse - row[l];
            let start = batch.index(l, m, 0);
            for (n, &p) in row.iter().enumerate() {
                grad[start + n] = (p - lse).exp() - if n == l { 1.0 } else { 0.0 };
            }
        }
    }
    (value, grad)
}

/// `lambda * ge2e + (1 - lambda) * bce` with superposed gradients.
pub fn combined_loss(batch: &BatchScores, lambda: f64) -> Result<(LossValue, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let (bce, gb) = bce_loss(batch);
    let (ge2e, gg) = ge2e_loss(batch);
    let grad = gb
        .iter()
        .zip(&gg)
        .map(|(b, g)| lambda * g + (1.0 - lambda) * b)
        .collect();
    Ok((
        LossValue {
            total: lambda * ge2e + (1.0 - lambda) * bce,
            bce,
            ge2e,
            lambda,
        },
        grad,
    ))
}

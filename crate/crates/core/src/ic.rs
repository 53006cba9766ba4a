//! Information criteria used to pick penalty levels along a path.

use serde::{Deserialize, Serialize};

pub const DEFAULT_EBIC_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    Bic,
    /// Extended BIC with model-space exponent `gamma` over `candidates` features.
    Ebic { gamma: f64, candidates: usize },
}

impl Criterion {
    /// BIC when the candidate dimension is at most n/2, EBIC otherwise.
    pub fn for_dimension(dimension: usize, n: usize, gamma: f64, candidates: usize) -> Self {
        if 2 * dimension <= n {
            Criterion::Bic
        } else {
            Criterion::Ebic { gamma, candidates }
        }
    }

    pub fn value(&self, rss: f64, n: usize, df: usize) -> f64 {
        let nf = n as f64;
        // guard against log(0) on exact fits
        let rss = rss.max(f64::MIN_POSITIVE * nf);
        let bic = nf * (rss / nf).ln() + df as f64 * nf.ln();
        match *self {
            Criterion::Bic => bic,
            Criterion::Ebic { gamma, candidates } => {
                bic + 2.0 * gamma * df as f64 * (candidates.max(1) as f64).ln()
            }
        }
    }
}

/// Index of the minimum criterion value. `values` must be ordered from the
/// largest penalty to the smallest; ties go to the earlier (sparser) entry.
pub fn argmin_prefer_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() && v != f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `count` log-spaced values from `max` down to `max * ratio`.
pub fn log_grid(max: f64, ratio: f64, count: usize) -> Vec<f64> {
    if count <= 1 || max <= 0.0 {
        return vec![max.max(0.0)];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    (0..count)
        .map(|k| {
            if k == 0 {
                max
            } else {
                (hi + (lo - hi) * k as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

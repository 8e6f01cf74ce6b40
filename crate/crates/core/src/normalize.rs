//! Per-feature input normalization, fitted on training rows only.
//!
//! Four schemes: z-score (population std, floored), min–max, fractional-rank
//! with averaged ties and ECDF interpolation for unseen values, and the
//! tanh-estimator `0.5 (tanh(0.01 (x - mean)/std) + 1)`.  Targets are never
//! normalized here — these operate on feature matrices alone.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::mathx;

/// Floor for stds and ranges so constant features map to zero, not NaN.
pub const SPREAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Zscore,
    MinMax,
    Rank,
    Tanh,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Zscore => "zscore",
            NormKind::MinMax => "minmax",
            NormKind::Rank => "rank",
            NormKind::Tanh => "tanh",
        }
    }

    pub const ALL: [NormKind; 4] = [NormKind::Zscore, NormKind::MinMax, NormKind::Rank, NormKind::Tanh];
}

/// Fitted normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalizer {
    Zscore { mean: Vec<f64>, std: Vec<f64> },
    MinMax { lo: Vec<f64>, span: Vec<f64> },
    /// Per feature: strictly increasing distinct training values and their
    /// averaged fractional ranks `r/(n+1)`.
    Rank { knots: Vec<Vec<f64>>, ranks: Vec<Vec<f64>> },
    Tanh { mean: Vec<f64>, std: Vec<f64> },
}

fn column_mean_std(data: &Mat, c: usize) -> (f64, f64) {
    let n = data.rows() as f64;
    let mut mean = crate::metrics::Kahan::new();
    for r in 0..data.rows() {
        mean.add(data[(r, c)]);
    }
    let mean = mean.value() / n;
    let mut var = crate::metrics::Kahan::new();
    for r in 0..data.rows() {
        let d = data[(r, c)] - mean;
        var.add(d * d);
    }
    (mean, mathx::sqrt(var.value() / n))
}

impl Normalizer {
    /// Fit statistics on training rows (rows x features).
    pub fn fit(kind: NormKind, train: &Mat) -> Result<Normalizer> {
        if train.rows() == 0 {
            return Err(CoreError::InvalidConfig("cannot fit a normalizer on zero rows".into()));
        }
        if !train.is_finite() {
            return Err(CoreError::NonFinite("normalizer training data"));
        }
        let f = train.cols();
        Ok(match kind {
            NormKind::Zscore | NormKind::Tanh => {
                let mut mean = Vec::with_capacity(f);
                let mut std = Vec::with_capacity(f);
                for c in 0..f {
                    let (m, s) = column_mean_std(train, c);
                    mean.push(m);
                    std.push(mathx::max(s, SPREAD_FLOOR));
                }
                if kind == NormKind::Zscore {
                    Normalizer::Zscore { mean, std }
                } else {
                    Normalizer::Tanh { mean, std }
                }
            }
            NormKind::MinMax => {
                let mut lo = Vec::with_capacity(f);
                let mut span = Vec::with_capacity(f);
                for c in 0..f {
                    let mut mn = f64::INFINITY;
                    let mut mx = f64::NEG_INFINITY;
                    for r in 0..train.rows() {
                        mn = mathx::min(mn, train[(r, c)]);
                        mx = mathx::max(mx, train[(r, c)]);
                    }
                    lo.push(mn);
                    span.push(mathx::max(mx - mn, SPREAD_FLOOR));
                }
                Normalizer::MinMax { lo, span }
            }
            NormKind::Rank => {
                let n = train.rows();
                let denom = (n + 1) as f64;
                let mut knots = Vec::with_capacity(f);
                let mut ranks = Vec::with_capacity(f);
                for c in 0..f {
                    let mut col: Vec<f64> = (0..n).map(|r| train[(r, c)]).collect();
                    col.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
                    // Collapse ties into one knot carrying the averaged
                    // 1-based position.
                    let mut kv = Vec::new();
                    let mut rv = Vec::new();
                    let mut i = 0;
                    while i < n {
                        let mut j = i;
                        while j + 1 < n && col[j + 1] == col[i] {
                            j += 1;
                        }
                        // positions i+1 ..= j+1 average to (i + j + 2) / 2.
                        let avg_pos = (i + j + 2) as f64 / 2.0;
                        kv.push(col[i]);
                        rv.push(avg_pos / denom);
                        i = j + 1;
                    }
                    knots.push(kv);
                    ranks.push(rv);
                }
                Normalizer::Rank { knots, ranks }
            }
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            Normalizer::Zscore { .. } => NormKind::Zscore,
            Normalizer::MinMax { .. } => NormKind::MinMax,
            Normalizer::Rank { .. } => NormKind::Rank,
            Normalizer::Tanh { .. } => NormKind::Tanh,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Normalizer::Zscore { mean, .. } | Normalizer::Tanh { mean, .. } => mean.len(),
            Normalizer::MinMax { lo, .. } => lo.len(),
            Normalizer::Rank { knots, .. } => knots.len(),
        }
    }

    /// Features whose spread hit [`SPREAD_FLOOR`] (constant columns); the
    /// caller may want to surface a warning.
    pub fn degenerate_features(&self) -> Vec<usize> {
        match self {
            Normalizer::Zscore { std, .. } | Normalizer::Tanh { std, .. } => {
                std.iter().enumerate().filter(|(_, s)| **s <= SPREAD_FLOOR).map(|(i, _)| i).collect()
            }
            Normalizer::MinMax { span, .. } => span
                .iter()
                .enumerate()
                .filter(|(_, s)| **s <= SPREAD_FLOOR)
                .map(|(i, _)| i)
                .collect(),
            Normalizer::Rank { knots, .. } => knots
                .iter()
                .enumerate()
                .filter(|(_, k)| k.len() <= 1)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Map one value of feature `c`.
    pub fn apply_one(&self, c: usize, x: f64) -> f64 {
        match self {
            Normalizer::Zscore { mean, std } => (x - mean[c]) / std[c],
            Normalizer::MinMax { lo, span } => (x - lo[c]) / span[c],
            Normalizer::Tanh { mean, std } => {
                0.5 * (mathx::tanh(0.01 * (x - mean[c]) / std[c]) + 1.0)
            }
            Normalizer::Rank { knots, ranks } => {
                let (kv, rv) = (&knots[c], &ranks[c]);
                // Clamp outside the training range, interpolate within.
                if x <= kv[0] {
                    return rv[0];
                }
                let last = kv.len() - 1;
                if x >= kv[last] {
                    return rv[last];
                }
                let hi = kv.partition_point(|&k| k < x);
                if kv[hi] == x {
                    return rv[hi];
                }
                let (x0, x1) = (kv[hi - 1], kv[hi]);
                let (y0, y1) = (rv[hi - 1], rv[hi]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// Map a whole feature matrix with the frozen statistics.
    pub fn apply(&self, data: &Mat) -> Result<Mat> {
        if data.cols() != self.n_features() {
            return Err(CoreError::ShapeMismatch {
                op: "Normalizer::apply",
                lhs: data.shape(),
                rhs: (data.rows(), self.n_features()),
            });
        }
        Ok(Mat::from_fn(data.rows(), data.cols(), |r, c| self.apply_one(c, data[(r, c)])))
    }
}

/// Fit on `train`, apply to both splits.
pub fn fit_apply(kind: NormKind, train: &Mat, test: &Mat) -> Result<(Normalizer, Mat, Mat)> {
    let norm = Normalizer::fit(kind, train)?;
    let tr = norm.apply(train)?;
    let te = norm.apply(test)?;
    Ok((norm, tr, te))
}

//! Gradient descent on the unified linearized objective, and the closed-form
//! attention weights that reproduce it.
//!
//! The objective over a context set of N examples is
//!
//! ```text
//! L(W1, W2) = 1/(2N) sum_i || W1 x1_i + W2 x2_i - y_i ||^2
//! ```
//!
//! whose exact gradient step with rate eta is
//!
//! ```text
//! dW_k = -(eta/N) sum_i (W1 x1_i + W2 x2_i - y_i) (x_k_i)^T ,  k in {1, 2}
//! ```
//!
//! and whose induced prediction shift at a query is
//! `dy = dW1 x1_q + dW2 x2_q`.
//!
//! [`construct_lsa`] packs `(W1, W2, eta, N)` into linear self-attention
//! weights whose single forward pass adds exactly `dy` to the query's y-slot:
//! `W_V`'s bottom block is `[W1  W2  -I]`, `W_K = W_Q` pass the input slots
//! through, and `P` scales the y-coordinate by `-eta/N` (the placement of the
//! scale is a convention; only the product `P W_V` is observable).
//!
//! Multi-step: a stack of such layers telescopes the trajectory, but the
//! layer that realizes GD step `t` must be built from `2 W(t) - W(0)`, not
//! `W(t)`.  Each layer adds `dW(s) x_j` to *every* token, so by layer `t` the
//! context y-slots have drifted from `y_i` to `y_i + (W(t) - W(0)) x_i`; the
//! doubled weight cancels the drift and recovers the true residual
//! `W(t) x_i - y_i` inside `W_V e_i`.  Reusing one frozen layer (the shared
//! zero-initialized construction) re-applies step 0's rule against drifted
//! slots and leaves the GD trajectory after the first layer; see
//! `frozen_shared_stack_drifts_from_trajectory` below for the worked scalar
//! case.

use alloc::vec::Vec;

use crate::attention::{AttentionParams, TokenDims};
use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::mathx;
use crate::task::Episode;

/// Mean squared residual of the unified model over a context set, with the
/// 1/(2N) normalization the gradient formulas assume.
pub fn unified_loss(w1: &Mat, w2: &Mat, x1: &Mat, x2: &Mat, y: &Mat) -> f64 {
    let n = x1.rows();
    assert!(n > 0 && x2.rows() == n && y.rows() == n, "context shape mismatch");
    let mut acc = 0.0;
    for i in 0..n {
        let pred = crate::task::unified_predict(w1, w2, x1.row(i), x2.row(i));
        for (p, t) in pred.iter().zip(y.row(i)) {
            let r = p - t;
            acc += r * r;
        }
    }
    acc / (2.0 * n as f64)
}

/// One exact gradient step on [`unified_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct GdStep {
    pub dw1: Mat,
    pub dw2: Mat,
}

impl GdStep {
    /// Prediction shift `dW1 x1_q + dW2 x2_q` this step induces at a query.
    pub fn prediction_shift(&self, x1_q: &[f64], x2_q: &[f64]) -> Vec<f64> {
        crate::task::unified_predict(&self.dw1, &self.dw2, x1_q, x2_q)
    }
}

/// `dW_k = -(eta/N) sum_i r_i (x_k_i)^T` with `r_i` the current residuals.
/// Residuals are accumulated in ascending example order.
pub fn gd_step(w1: &Mat, w2: &Mat, x1: &Mat, x2: &Mat, y: &Mat, eta: f64) -> GdStep {
    let n = x1.rows();
    assert!(n > 0 && x2.rows() == n && y.rows() == n, "context shape mismatch");
    let scale = -eta / n as f64;
    let mut dw1 = Mat::zeros(w1.rows(), w1.cols());
    let mut dw2 = Mat::zeros(w2.rows(), w2.cols());
    for i in 0..n {
        let pred = crate::task::unified_predict(w1, w2, x1.row(i), x2.row(i));
        for r in 0..w1.rows() {
            let res = pred[r] - y.row(i)[r];
            for (j, &xj) in x1.row(i).iter().enumerate() {
                dw1[(r, j)] += scale * res * xj;
            }
            for (j, &xj) in x2.row(i).iter().enumerate() {
                dw2[(r, j)] += scale * res * xj;
            }
        }
    }
    GdStep { dw1, dw2 }
}

/// Weight pairs along a descent run; `weights[0]` is the start, `weights[t]`
/// the parameters after t steps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub weights: Vec<(Mat, Mat)>,
    pub eta: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.weights.len() - 1
    }

    /// Query prediction after t steps.
    pub fn query_pred(&self, t: usize, x1_q: &[f64], x2_q: &[f64]) -> Vec<f64> {
        let (w1, w2) = &self.weights[t];
        crate::task::unified_predict(w1, w2, x1_q, x2_q)
    }

    /// Prediction shifts relative to the start, one entry per step.  This is
    /// what a stacked constructed forward accumulates in the query y-slot.
    pub fn query_shifts(&self, x1_q: &[f64], x2_q: &[f64]) -> Vec<Vec<f64>> {
        let base = self.query_pred(0, x1_q, x2_q);
        (1..self.weights.len())
            .map(|t| {
                let p = self.query_pred(t, x1_q, x2_q);
                p.iter().zip(&base).map(|(a, b)| a - b).collect()
            })
            .collect()
    }
}

/// Run `k` exact gradient steps from `(w1_0, w2_0)`.
pub fn gd_trajectory(
    w1_0: &Mat,
    w2_0: &Mat,
    x1: &Mat,
    x2: &Mat,
    y: &Mat,
    eta: f64,
    k: usize,
) -> Trajectory {
    let mut weights = Vec::with_capacity(k + 1);
    weights.push((w1_0.clone(), w2_0.clone()));
    let mut w1 = w1_0.clone();
    let mut w2 = w2_0.clone();
    for _ in 0..k {
        let step = gd_step(&w1, &w2, x1, x2, y, eta);
        w1 = w1.add(&step.dw1).expect("shape");
        w2 = w2.add(&step.dw2).expect("shape");
        weights.push((w1.clone(), w2.clone()));
    }
    Trajectory { weights, eta }
}

/// Attention weights that implement one GD step, plus the ingredients they
/// were built from.
#[derive(Debug, Clone)]
pub struct ConstructedWeights {
    pub params: AttentionParams,
    pub dims: TokenDims,
    pub eta: f64,
    pub n_ctx: usize,
}

/// Closed-form single-step construction.  All blocks other than the listed
/// ones are exactly zero.
pub fn construct_lsa(
    w1: &Mat,
    w2: &Mat,
    eta: f64,
    n_ctx: usize,
    dims: TokenDims,
) -> Result<ConstructedWeights> {
    if n_ctx == 0 {
        return Err(CoreError::EmptyContext);
    }
    if w1.shape() != (dims.dy, dims.d1) {
        return Err(CoreError::ShapeMismatch { op: "construct_lsa w1", lhs: w1.shape(), rhs: (dims.dy, dims.d1) });
    }
    if w2.shape() != (dims.dy, dims.d2) {
        return Err(CoreError::ShapeMismatch { op: "construct_lsa w2", lhs: w2.shape(), rhs: (dims.dy, dims.d2) });
    }
    let td = dims.token_dim();

    // W_V bottom block [W1 W2 -I], zero elsewhere.
    let mut w_v = Mat::zeros(td, td);
    w_v.set_block(dims.y().start, dims.x1().start, w1);
    w_v.set_block(dims.y().start, dims.x2().start, w2);
    w_v.set_block(dims.y().start, dims.y().start, &Mat::eye(dims.dy).scale(-1.0));

    // W_K = W_Q pass the input slots through and drop the y-slot.
    let mut w_kq = Mat::zeros(td, td);
    w_kq.set_block(0, 0, &Mat::eye(dims.d1 + dims.d2));

    // P: -(eta/N) on the y-coordinate.
    let mut p = Mat::zeros(td, td);
    p.set_block(dims.y().start, dims.y().start, &Mat::eye(dims.dy).scale(-eta / n_ctx as f64));

    Ok(ConstructedWeights {
        params: AttentionParams::single(w_kq.clone(), w_kq, w_v, p),
        dims,
        eta,
        n_ctx,
    })
}

/// Per-layer constructed parameters whose stacked forward reproduces the
/// given trajectory's prediction shifts.  Layer `t` is built from
/// `2 W(t) - W(0)` (see the module notes on context-slot drift).
pub fn trajectory_stack_params(
    traj: &Trajectory,
    n_ctx: usize,
    dims: TokenDims,
) -> Result<Vec<AttentionParams>> {
    let (w1_0, w2_0) = &traj.weights[0];
    let mut layers = Vec::with_capacity(traj.steps());
    for t in 0..traj.steps() {
        let (w1_t, w2_t) = &traj.weights[t];
        let w1 = w1_t.scale(2.0).sub(w1_0).expect("shape");
        let w2 = w2_t.scale(2.0).sub(w2_0).expect("shape");
        layers.push(construct_lsa(&w1, &w2, traj.eta, n_ctx, dims)?.params);
    }
    Ok(layers)
}

/// `points` values log-uniform on `[lo, hi]`, endpoints included.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && points >= 2, "bad grid spec");
    let (llo, lhi) = (mathx::ln(lo), mathx::ln(hi));
    (0..points)
        .map(|i| mathx::exp(llo + (lhi - llo) * i as f64 / (points - 1) as f64))
        .collect()
}

/// Result of a learning-rate line search.
#[derive(Debug, Clone)]
pub struct LineSearch {
    pub eta: f64,
    pub grid: Vec<f64>,
    /// Mean squared query error of the k-step constructed predictor at each
    /// grid point, in grid order.
    pub mean_losses: Vec<f64>,
}

/// Pick the grid eta minimizing the mean squared query prediction error of
/// the k-step GD predictor (started from zero weights) over `t_train`
/// episodes.  Ties and non-finite means resolve to the earliest finite
/// minimum; episodes are consumed in index order with compensated sums, so
/// the result is reproducible.
pub fn line_search_eta(
    source: impl Fn(u64) -> Episode,
    t_train: u64,
    grid: &[f64],
    k: usize,
) -> Result<LineSearch> {
    if grid.is_empty() {
        return Err(CoreError::InvalidConfig("line search grid is empty".into()));
    }
    if t_train == 0 {
        return Err(CoreError::InvalidConfig("line search needs at least one task".into()));
    }
    let mut sums = alloc::vec![crate::metrics::Kahan::new(); grid.len()];
    for idx in 0..t_train {
        let ep = source(idx);
        let dims = ep.dims();
        let (x1, x2, y) = (ep.ctx_x1(), ep.ctx_x2(), ep.ctx_y());
        let w1_0 = Mat::zeros(dims.dy, dims.d1);
        let w2_0 = Mat::zeros(dims.dy, dims.d2);
        for (g, &eta) in grid.iter().enumerate() {
            let traj = gd_trajectory(&w1_0, &w2_0, &x1, &x2, &y, eta, k);
            let pred = traj.query_pred(k, ep.query_x1(), ep.query_x2());
            let mut err = 0.0;
            for (p, t) in pred.iter().zip(&ep.query_y) {
                let d = p - t;
                err += d * d;
            }
            sums[g].add(err);
        }
    }
    let mean_losses: Vec<f64> =
        sums.iter().map(|s| s.value() / t_train as f64).collect();
    let mut best = None;
    for (i, &m) in mean_losses.iter().enumerate() {
        if m.is_finite() && best.map_or(true, |(_, bm)| m < bm) {
            best = Some((i, m));
        }
    }
    let (best_i, _) =
        best.ok_or(CoreError::NonFinite("line search: no finite grid point"))?;
    Ok(LineSearch { eta: grid[best_i], grid: grid.to_vec(), mean_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{lsa_forward, stack_forward, StackParams};
    use crate::task::{sample_task, InterfaceKind, TaskConfig, TaskSampler};

    fn small_cfg(kind: InterfaceKind) -> TaskConfig {
        TaskConfig {
            n_ctx: 5,
            n_input: 3,
            docs: 2,
            d_doc: 3,
            d_y: 2,
            alpha: 1.0,
            query_alpha: 1.0,
            sigma: 1.0,
            interface: kind,
            asymmetric_m: false,
        }
    }

    /// Worked scalar example: N = 1, x1 = x2 = 1, y = 0, W1 = 2, W2 = 1.
    /// Residual 3, loss 9/2; at eta = 0.1 both weight updates are -0.3 and
    /// the query shift at x1 = x2 = 1 is -0.6.
    #[test]
    fn loss_and_step_hand_example() {
        let w1 = Mat::from_rows(&[&[2.0]]);
        let w2 = Mat::from_rows(&[&[1.0]]);
        let x = Mat::from_rows(&[&[1.0]]);
        let y = Mat::from_rows(&[&[0.0]]);
        assert_eq!(unified_loss(&w1, &w2, &x, &x, &y), 4.5);
        let step = gd_step(&w1, &w2, &x, &x, &y, 0.1);
        assert!((step.dw1[(0, 0)] + 0.3).abs() < 1e-15);
        assert!((step.dw2[(0, 0)] + 0.3).abs() < 1e-15);
        let dy = step.prediction_shift(&[1.0], &[1.0]);
        assert!((dy[0] + 0.6).abs() < 1e-15);
    }

    /// Central finite differences on the loss are the oracle for the step
    /// direction: dW must equal -eta * dL/dW entry by entry.
    #[test]
    fn gd_step_matches_finite_difference_gradient() {
        for kind in [InterfaceKind::ProjectionBased, InterfaceKind::DotProduct] {
            let task = sample_task(&small_cfg(kind), 31, 4).unwrap();
            let dims = task.dims();
            let mut r = crate::rng::stream(32, 0);
            let w1 = crate::rng::normal_mat(&mut r, dims.dy, dims.d1, 0.7);
            let w2 = crate::rng::normal_mat(&mut r, dims.dy, dims.d2, 0.7);
            let eta = 0.37;
            let step = gd_step(&w1, &w2, &task.x1, &task.x2, &task.y, eta);
            let h = 1e-6;
            for (which, dw) in [(0usize, &step.dw1), (1usize, &step.dw2)] {
                for rr in 0..dw.rows() {
                    for cc in 0..dw.cols() {
                        let mut wp1 = w1.clone();
                        let mut wm1 = w1.clone();
                        let mut wp2 = w2.clone();
                        let mut wm2 = w2.clone();
                        if which == 0 {
                            wp1[(rr, cc)] += h;
                            wm1[(rr, cc)] -= h;
                        } else {
                            wp2[(rr, cc)] += h;
                            wm2[(rr, cc)] -= h;
                        }
                        let lp = unified_loss(&wp1, &wp2, &task.x1, &task.x2, &task.y);
                        let lm = unified_loss(&wm1, &wm2, &task.x1, &task.x2, &task.y);
                        let fd = -(lp - lm) / (2.0 * h) * eta;
                        let got = dw[(rr, cc)];
                        assert!(
                            (got - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                            "{} block {which} ({rr},{cc}): step {got} vs fd {fd}",
                            kind.name()
                        );
                    }
                }
            }
        }
    }

    /// The constructed forward adds exactly the GD prediction shift to the
    /// query y-slot, for random (not just zero) carried weights, on both
    /// interfaces.  The equivalence is stated over the context tokens alone;
    /// key/value document injection belongs to the trained model's
    /// information flow and is checked separately below.
    #[test]
    fn constructed_forward_equals_gd_shift() {
        let mut worst: f64 = 0.0;
        for kind in [InterfaceKind::ProjectionBased, InterfaceKind::DotProduct] {
            for seed in 0..60u64 {
                let task = sample_task(&small_cfg(kind), 1000 + seed, seed).unwrap();
                let dims = task.dims();
                let mut r = crate::rng::stream(7000 + seed, 0);
                let w1 = crate::rng::normal_mat(&mut r, dims.dy, dims.d1, 0.5);
                let w2 = crate::rng::normal_mat(&mut r, dims.dy, dims.d2, 0.5);
                let eta = 0.05 + 0.4 * (seed as f64 / 60.0);

                let step = gd_step(&w1, &w2, &task.x1, &task.x2, &task.y, eta);
                let want = step.prediction_shift(&task.query_x1, &task.query_x2);

                let built = construct_lsa(&w1, &w2, eta, task.cfg.n_ctx, dims).unwrap();
                let out = lsa_forward(&built.params, &task.tokens(), None).unwrap();
                for (a, b) in out.query_y().iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-12, "construction deviates from GD shift by {worst:e}");
    }

    /// At the zero-weight start the value map sends injected rows (whose
    /// y-slots are zero) to zero, so documents in the key/value stream cannot
    /// move the constructed prediction.  With nonzero carried weights they
    /// can — which is exactly why the equivalence above is stated over
    /// context tokens only.
    #[test]
    fn constructed_forward_ignores_injection_at_zero_start() {
        let task = sample_task(&small_cfg(InterfaceKind::DotProduct), 55, 0).unwrap();
        let dims = task.dims();
        let w0 = Mat::zeros(dims.dy, dims.d1);
        let built = construct_lsa(&w0, &Mat::zeros(dims.dy, dims.d2), 0.3, task.cfg.n_ctx, dims)
            .unwrap();
        let tokens = task.tokens();
        let inject = task.injection();
        let with = lsa_forward(&built.params, &tokens, inject.as_ref()).unwrap();
        let without = lsa_forward(&built.params, &tokens, None).unwrap();
        assert!(with.mat.bit_eq(&without.mat));

        // Nonzero W1 reads the injected x1 slot: predictions must differ.
        let w1 = Mat::from_fn(dims.dy, dims.d1, |r, c| 0.3 + 0.1 * (r + c) as f64);
        let built =
            construct_lsa(&w1, &Mat::zeros(dims.dy, dims.d2), 0.3, task.cfg.n_ctx, dims).unwrap();
        let with = lsa_forward(&built.params, &tokens, inject.as_ref()).unwrap();
        let without = lsa_forward(&built.params, &tokens, None).unwrap();
        assert!(!with.mat.bit_eq(&without.mat));
    }

    #[test]
    fn constructed_forward_touches_only_y_slots() {
        let task = sample_task(&small_cfg(InterfaceKind::ProjectionBased), 9, 1).unwrap();
        let dims = task.dims();
        let mut r = crate::rng::stream(10, 0);
        let w1 = crate::rng::normal_mat(&mut r, dims.dy, dims.d1, 1.0);
        let w2 = crate::rng::normal_mat(&mut r, dims.dy, dims.d2, 1.0);
        let built = construct_lsa(&w1, &w2, 0.2, task.cfg.n_ctx, dims).unwrap();
        let tokens = task.tokens();
        let out = lsa_forward(&built.params, &tokens, None).unwrap();
        for row in 0..tokens.mat.rows() {
            assert_eq!(&out.mat.row(row)[dims.x1()], &tokens.mat.row(row)[dims.x1()]);
            assert_eq!(&out.mat.row(row)[dims.x2()], &tokens.mat.row(row)[dims.x2()]);
        }
        assert!(!out.mat.bit_eq(&tokens.mat));
    }

    /// With zero carried weights the construction is linear in the context
    /// targets: doubling every y_i doubles the query shift.
    #[test]
    fn constructed_shift_linear_in_targets() {
        let task = sample_task(&small_cfg(InterfaceKind::DotProduct), 71, 3).unwrap();
        let dims = task.dims();
        let built = construct_lsa(
            &Mat::zeros(dims.dy, dims.d1),
            &Mat::zeros(dims.dy, dims.d2),
            0.15,
            task.cfg.n_ctx,
            dims,
        )
        .unwrap();
        let ep = task.episode();
        let out1 = lsa_forward(&built.params, &ep.tokens, None).unwrap();

        let mut doubled = ep.tokens.clone();
        for i in 0..task.cfg.n_ctx {
            for v in &mut doubled.mat.row_mut(i)[dims.y()] {
                *v *= 2.0;
            }
        }
        let out2 = lsa_forward(&built.params, &doubled, None).unwrap();
        for (a, b) in out1.query_y().iter().zip(out2.query_y()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_composes() {
        let task = sample_task(&small_cfg(InterfaceKind::DotProduct), 12, 0).unwrap();
        let dims = task.dims();
        let w1 = Mat::zeros(dims.dy, dims.d1);
        let w2 = Mat::zeros(dims.dy, dims.d2);
        let t5 = gd_trajectory(&w1, &w2, &task.x1, &task.x2, &task.y, 0.1, 5);
        let t3 = gd_trajectory(&w1, &w2, &task.x1, &task.x2, &task.y, 0.1, 3);
        let (w1_3, w2_3) = &t3.weights[3];
        let t2 = gd_trajectory(w1_3, w2_3, &task.x1, &task.x2, &task.y, 0.1, 2);
        assert!(t5.weights[5].0.bit_eq(&t2.weights[2].0));
        assert!(t5.weights[5].1.bit_eq(&t2.weights[2].1));
        assert_eq!(t5.steps(), 5);
    }

    /// Power iteration on the stacked-input Gram matrix gives the curvature
    /// bound; below 2/L the quadratic's loss must fall monotonically.
    #[test]
    fn trajectory_monotone_below_curvature_bound() {
        let task = sample_task(&small_cfg(InterfaceKind::ProjectionBased), 99, 2).unwrap();
        let dims = task.dims();
        let n = task.cfg.n_ctx;
        // Gram of stacked inputs (x1_i; x2_i), scaled by 1/N.
        let d = dims.d1 + dims.d2;
        let mut gram = Mat::zeros(d, d);
        for i in 0..n {
            let mut xt = task.x1.row(i).to_vec();
            xt.extend_from_slice(task.x2.row(i));
            for a in 0..d {
                for b in 0..d {
                    gram[(a, b)] += xt[a] * xt[b] / n as f64;
                }
            }
        }
        // Independent largest-eigenvalue oracle.
        let mut v = alloc::vec![1.0; d];
        let mut lam = 0.0;
        for _ in 0..300 {
            let w = gram.matmul(&Mat::col_vec(&v));
            let col: Vec<f64> = (0..d).map(|i| w[(i, 0)]).collect();
            let norm = crate::mat::norm2(&col);
            lam = norm;
            for (vi, ci) in v.iter_mut().zip(&col) {
                *vi = ci / norm;
            }
        }
        let eta = 1.8 / lam;
        let w1 = Mat::zeros(dims.dy, dims.d1);
        let w2 = Mat::zeros(dims.dy, dims.d2);
        let traj = gd_trajectory(&w1, &w2, &task.x1, &task.x2, &task.y, eta, 30);
        let mut prev = f64::INFINITY;
        for (w1_t, w2_t) in &traj.weights {
            let l = unified_loss(w1_t, w2_t, &task.x1, &task.x2, &task.y);
            assert!(l <= prev + 1e-12, "loss rose under eta < 2/L");
            prev = l;
        }
        assert!(prev < unified_loss(&w1, &w2, &task.x1, &task.x2, &task.y));
    }

    /// The telescoping identity: per-step reconstructed layers, stacked,
    /// accumulate exactly the trajectory's prediction shifts.
    #[test]
    fn refreshed_stack_matches_trajectory() {
        for kind in [InterfaceKind::ProjectionBased, InterfaceKind::DotProduct] {
            for k in [2usize, 5] {
                for seed in 0..20u64 {
                    let task = sample_task(&small_cfg(kind), 400 + seed, seed).unwrap();
                    let dims = task.dims();
                    let w1 = Mat::zeros(dims.dy, dims.d1);
                    let w2 = Mat::zeros(dims.dy, dims.d2);
                    let eta = 0.2;
                    let traj =
                        gd_trajectory(&w1, &w2, &task.x1, &task.x2, &task.y, eta, k);
                    let layers = trajectory_stack_params(&traj, task.cfg.n_ctx, dims).unwrap();
                    let trace =
                        stack_forward(&StackParams::PerLayer(&layers), &task.tokens(), None)
                            .unwrap();
                    let shifts = traj.query_shifts(&task.query_x1, &task.query_x2);
                    for t in 0..k {
                        for (a, b) in trace.query_y[t].iter().zip(&shifts[t]) {
                            assert!(
                                (a - b).abs() < 1e-10,
                                "{} k={k} t={t}: stack {a} vs gd {b}",
                                kind.name()
                            );
                        }
                    }
                }
            }
        }
    }

    /// Worked drift example (N = 1, x = y = 1, eta = 0.1, start at zero):
    /// GD predictions are 0.1 then 0.19, but reusing the frozen zero-weight
    /// layer gives 0.1 then 0.21 because the context slot has drifted to 1.1.
    #[test]
    fn frozen_shared_stack_drifts_from_trajectory() {
        let dims = TokenDims::new(1, 1, 1);
        let mut tokens = crate::attention::TokenMatrix::zeros(dims, 1);
        // context (x1, x2, y) = (1, 0, 1); query (1, 0, 0).  Using only the
        // first slot keeps the arithmetic readable.
        tokens.mat.row_mut(0).copy_from_slice(&[1.0, 0.0, 1.0]);
        tokens.mat.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0]);
        let w0 = Mat::zeros(1, 1);
        let built = construct_lsa(&w0, &w0, 0.1, 1, dims).unwrap();
        let trace = stack_forward(
            &StackParams::Shared { params: &built.params, depth: 2 },
            &tokens,
            None,
        )
        .unwrap();
        assert!((trace.query_y[0][0] - 0.1).abs() < 1e-15);
        assert!((trace.query_y[1][0] - 0.21).abs() < 1e-15);
        // The refreshed two-layer stack recovers the true second step, 0.19.
        let x = Mat::from_rows(&[&[1.0]]);
        let x2 = Mat::from_rows(&[&[0.0]]);
        let y = Mat::from_rows(&[&[1.0]]);
        let traj = gd_trajectory(&w0, &w0, &x, &x2, &y, 0.1, 2);
        assert!((traj.query_pred(2, &[1.0], &[0.0])[0] - 0.19).abs() < 1e-15);
        let layers = trajectory_stack_params(&traj, 1, dims).unwrap();
        let tm = crate::attention::TokenMatrix::from_mat(dims, 1, tokens.mat.clone()).unwrap();
        let trace2 = stack_forward(&StackParams::PerLayer(&layers), &tm, None).unwrap();
        assert!((trace2.query_y[1][0] - 0.19).abs() < 1e-14);
    }

    #[test]
    fn log_grid_endpoints_and_monotone() {
        let g = log_grid(1e-4, 10.0, 25);
        assert_eq!(g.len(), 25);
        assert!((g[0] - 1e-4).abs() < 1e-16);
        assert!((g[24] - 10.0).abs() < 1e-12);
        for w in g.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    /// One scalar task makes the line-search objective an explicit quadratic
    /// in eta with analytic optimum eta* = 1; the chosen grid point must be
    /// within one log-step of it.
    #[test]
    fn line_search_matches_quadratic_optimum() {
        let dims = TokenDims::new(1, 1, 1);
        let mut tokens = crate::attention::TokenMatrix::zeros(dims, 1);
        tokens.mat.row_mut(0).copy_from_slice(&[1.0, 0.0, 1.0]);
        tokens.mat.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0]);
        let ep = Episode { tokens, inject: None, query_y: alloc::vec![1.0], shared_slots: false };
        let grid = log_grid(1e-4, 10.0, 25);
        let ls = line_search_eta(|_| ep.clone(), 4, &grid, 1).unwrap();
        // prediction(eta) = eta, so loss = (1 - eta)^2, minimized at eta* = 1.
        let log_step = mathx::ln(grid[1]) - mathx::ln(grid[0]);
        assert!(
            mathx::abs(mathx::ln(ls.eta) - mathx::ln(1.0)) <= log_step + 1e-12,
            "eta {} not within one grid step of 1.0",
            ls.eta
        );
        // Mean losses are reported per grid point in order.
        assert_eq!(ls.mean_losses.len(), grid.len());
        let idx = grid.iter().position(|&g| g == ls.eta).unwrap();
        for (i, m) in ls.mean_losses.iter().enumerate() {
            assert!(m + 1e-15 >= ls.mean_losses[idx], "grid point {i} beats the reported eta");
        }
    }

    /// Synthetic-default sanity: the line-searched one-step predictor beats
    /// the zero predictor on held-out tasks of the same family.
    #[test]
    fn line_searched_step_reduces_query_error() {
        let cfg = TaskConfig::synthetic_default(InterfaceKind::DotProduct, 5);
        let sampler = TaskSampler::new(cfg, 2024).unwrap();
        let grid = log_grid(1e-4, 10.0, 25);
        let ls = line_search_eta(|i| sampler.task(i).episode(), 200, &grid, 1).unwrap();
        let mut with_step = 0.0;
        let mut zero_pred = 0.0;
        for i in 1000..1200u64 {
            let task = sampler.task(i);
            let dims = task.dims();
            let w1 = Mat::zeros(dims.dy, dims.d1);
            let w2 = Mat::zeros(dims.dy, dims.d2);
            let traj = gd_trajectory(&w1, &w2, &task.x1, &task.x2, &task.y, ls.eta, 1);
            let p = traj.query_pred(1, &task.query_x1, &task.query_x2);
            with_step += (p[0] - task.query_y[0]).powi(2);
            zero_pred += task.query_y[0].powi(2);
        }
        assert!(
            with_step < 0.8 * zero_pred,
            "one line-searched step should cut query error ({with_step} vs {zero_pred})"
        );
    }
}

//! Alignment metrics between two predictors over a task distribution.
//!
//! For each episode we record the query prediction distance, the cosine and
//! L2 distance between input-sensitivity Jacobians, and the signed query loss
//! difference.  Means over episodes use compensated summation in index order,
//! so a parallel driver that evaluates episodes out of order and then reduces
//! in index order reproduces the sequential result.

use alloc::vec::Vec;

use crate::error::Result;
use crate::gd;
use crate::mat::Mat;
use crate::task::Episode;

/// Compensated accumulator (Kahan–Babuška / Neumaier variant, which keeps
/// the correction when a new term exceeds the running sum).
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Kahan { sum: 0.0, carry: 0.0 }
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if crate::mathx::abs(self.sum) >= crate::mathx::abs(x) {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Anything that answers a query episode with a point prediction and exposes
/// the Jacobian of that prediction with respect to the test input.
pub trait Predictor {
    fn predict(&self, ep: &Episode) -> Result<Vec<f64>>;

    /// `d prediction / d x_test`, shape `d_y x n_input`.  When the episode's
    /// query feeds both input slots (dot-product layout) the derivative flows
    /// through both.
    fn sensitivity(&self, ep: &Episode) -> Result<Mat>;
}

/// Squared error of a prediction against the episode's ground truth.
pub fn query_sq_err(pred: &[f64], truth: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        s += d * d;
    }
    s
}

/// Fixed linear map `y = W1 x1 + W2 x2`; the simplest predictor and a handy
/// reference in tests (its sensitivity is W1, plus W2 under shared slots).
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub w1: Mat,
    pub w2: Mat,
}

impl Predictor for LinearPredictor {
    fn predict(&self, ep: &Episode) -> Result<Vec<f64>> {
        Ok(crate::task::unified_predict(&self.w1, &self.w2, ep.query_x1(), ep.query_x2()))
    }

    fn sensitivity(&self, ep: &Episode) -> Result<Mat> {
        if ep.shared_slots {
            self.w1.add(&self.w2)
        } else {
            Ok(self.w1.clone())
        }
    }
}

/// K steps of exact gradient descent from zero weights on the episode's own
/// context, then predict at the query.  This is the constructed reference the
/// trained models are compared against.
#[derive(Debug, Clone, Copy)]
pub struct GdPredictor {
    pub eta: f64,
    pub k: usize,
}

impl GdPredictor {
    fn final_weights(&self, ep: &Episode) -> (Mat, Mat) {
        let dims = ep.dims();
        let w1 = Mat::zeros(dims.dy, dims.d1);
        let w2 = Mat::zeros(dims.dy, dims.d2);
        let traj = gd::gd_trajectory(
            &w1,
            &w2,
            &ep.ctx_x1(),
            &ep.ctx_x2(),
            &ep.ctx_y(),
            self.eta,
            self.k,
        );
        traj.weights.last().expect("trajectory has start").clone()
    }
}

impl Predictor for GdPredictor {
    fn predict(&self, ep: &Episode) -> Result<Vec<f64>> {
        let (w1, w2) = self.final_weights(ep);
        Ok(crate::task::unified_predict(&w1, &w2, ep.query_x1(), ep.query_x2()))
    }

    fn sensitivity(&self, ep: &Episode) -> Result<Mat> {
        let (w1, w2) = self.final_weights(ep);
        if ep.shared_slots {
            w1.add(&w2)
        } else {
            Ok(w1)
        }
    }
}

/// Per-episode comparison record.
#[derive(Debug, Clone, Copy)]
pub struct PairSample {
    pub pred_diff: f64,
    pub sens_cos: f64,
    pub sens_l2: f64,
    pub loss_a: f64,
    pub loss_b: f64,
}

/// Evaluate both predictors on one episode.
pub fn compare_one(a: &dyn Predictor, b: &dyn Predictor, ep: &Episode) -> Result<PairSample> {
    let pa = a.predict(ep)?;
    let pb = b.predict(ep)?;
    let mut pd = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let d = x - y;
        pd += d * d;
    }
    let ja = a.sensitivity(ep)?;
    let jb = b.sensitivity(ep)?;
    let diff = ja.sub(&jb)?;
    Ok(PairSample {
        pred_diff: crate::mathx::sqrt(pd),
        sens_cos: cosine(&ja, &jb),
        sens_l2: diff.frob_norm(),
        loss_a: query_sq_err(&pa, &ep.query_y),
        loss_b: query_sq_err(&pb, &ep.query_y),
    })
}

/// Cosine of the flattened Jacobians; zero if either is the zero matrix.
pub fn cosine(a: &Mat, b: &Mat) -> f64 {
    let na = a.frob_norm();
    let nb = b.frob_norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.frob_dot(b) / (na * nb)
}

/// Mean alignment metrics over a set of episodes.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentReport {
    pub n_tasks: u64,
    /// Mean L2 distance between query predictions.
    pub pred_diff: f64,
    /// Mean cosine between input-sensitivity Jacobians.
    pub sens_cos: f64,
    /// Mean Frobenius distance between Jacobians.  Also reported as the
    /// model-difference metric: for linear predictors the Jacobian *is* the
    /// effective weight matrix, so no separate probe is kept.
    pub sens_l2: f64,
    /// Mean signed loss difference (a minus b).
    pub loss_diff: f64,
    pub mean_loss_a: f64,
    pub mean_loss_b: f64,
}

impl AlignmentReport {
    /// Alias making the aliasing above explicit at call sites.
    pub fn model_diff(&self) -> f64 {
        self.sens_l2
    }
}

/// Reduce per-episode samples (in index order) to mean metrics.
pub fn reduce_samples(samples: &[PairSample]) -> AlignmentReport {
    let n = samples.len() as u64;
    assert!(n > 0, "cannot reduce zero samples");
    let mut pred = Kahan::new();
    let mut cosm = Kahan::new();
    let mut l2 = Kahan::new();
    let mut la = Kahan::new();
    let mut lb = Kahan::new();
    for s in samples {
        pred.add(s.pred_diff);
        cosm.add(s.sens_cos);
        l2.add(s.sens_l2);
        la.add(s.loss_a);
        lb.add(s.loss_b);
    }
    let nf = n as f64;
    AlignmentReport {
        n_tasks: n,
        pred_diff: pred.value() / nf,
        sens_cos: cosm.value() / nf,
        sens_l2: l2.value() / nf,
        loss_diff: (la.value() - lb.value()) / nf,
        mean_loss_a: la.value() / nf,
        mean_loss_b: lb.value() / nf,
    }
}

/// Sequential comparison over `t` episodes drawn from `source` by index.
pub fn compare(
    a: &dyn Predictor,
    b: &dyn Predictor,
    source: impl Fn(u64) -> Episode,
    t: u64,
) -> Result<AlignmentReport> {
    let mut samples = Vec::with_capacity(t as usize);
    for i in 0..t {
        samples.push(compare_one(a, b, &source(i))?);
    }
    Ok(reduce_samples(&samples))
}

/// Central-difference Jacobian of a predictor at the query input; the
/// independent oracle for [`Predictor::sensitivity`] implementations.
pub fn fd_sensitivity(p: &dyn Predictor, ep: &Episode, h: f64) -> Result<Mat> {
    let dims = ep.dims();
    let dy = dims.dy;
    let n = dims.d1;
    let mut jac = Mat::zeros(dy, n);
    for j in 0..n {
        let perturbed = |delta: f64| -> Result<Vec<f64>> {
            let mut t = ep.clone();
            t.tokens.mat.row_mut(t.tokens.n_ctx)[j] += delta;
            if t.shared_slots {
                t.tokens.mat.row_mut(t.tokens.n_ctx)[dims.x2().start + j] += delta;
            }
            p.predict(&t)
        };
        let plus = perturbed(h)?;
        let minus = perturbed(-h)?;
        for r in 0..dy {
            jac[(r, j)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{sample_task, InterfaceKind, TaskConfig};

    fn cfg(kind: InterfaceKind) -> TaskConfig {
        TaskConfig {
            n_ctx: 6,
            n_input: 4,
            docs: 2,
            d_doc: 4,
            d_y: 2,
            alpha: 1.0,
            query_alpha: 1.0,
            sigma: 1.0,
            interface: kind,
            asymmetric_m: false,
        }
    }

    #[test]
    fn kahan_recovers_cancelled_unit() {
        let mut k = Kahan::new();
        k.add(1e16);
        k.add(1.0);
        k.add(-1e16);
        assert_eq!(k.value(), 1.0);
        let naive = 1e16 + 1.0 - 1e16;
        assert_eq!(naive, 0.0);
    }

    #[test]
    fn identical_predictors_align_perfectly() {
        let t = sample_task(&cfg(InterfaceKind::DotProduct), 5, 0).unwrap();
        let p = GdPredictor { eta: 0.2, k: 1 };
        let rep = compare(&p, &p, |_| t.episode(), 8).unwrap();
        assert_eq!(rep.pred_diff, 0.0);
        assert_eq!(rep.sens_l2, 0.0);
        assert_eq!(rep.loss_diff, 0.0);
        assert!((rep.sens_cos - 1.0).abs() < 1e-15);
        assert_eq!(rep.model_diff(), rep.sens_l2);
    }

    #[test]
    fn linear_predictor_sensitivity_is_its_weights() {
        let t = sample_task(&cfg(InterfaceKind::ProjectionBased), 6, 1).unwrap();
        let dims = t.dims();
        let mut r = crate::rng::stream(2, 0);
        let lp = LinearPredictor {
            w1: crate::rng::normal_mat(&mut r, dims.dy, dims.d1, 1.0),
            w2: crate::rng::normal_mat(&mut r, dims.dy, dims.d2, 1.0),
        };
        let ep = t.episode();
        assert!(lp.sensitivity(&ep).unwrap().bit_eq(&lp.w1));

        // Dot-product episode: both slots carry the test input.
        let t2 = sample_task(&cfg(InterfaceKind::DotProduct), 6, 1).unwrap();
        let dims2 = t2.dims();
        let lp2 = LinearPredictor {
            w1: crate::rng::normal_mat(&mut r, dims2.dy, dims2.d1, 1.0),
            w2: crate::rng::normal_mat(&mut r, dims2.dy, dims2.d2, 1.0),
        };
        let want = lp2.w1.add(&lp2.w2).unwrap();
        assert!(lp2.sensitivity(&t2.episode()).unwrap().bit_eq(&want));
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        for kind in [InterfaceKind::ProjectionBased, InterfaceKind::DotProduct] {
            let t = sample_task(&cfg(kind), 9, 2).unwrap();
            let ep = t.episode();
            let p = GdPredictor { eta: 0.15, k: 3 };
            let jac = p.sensitivity(&ep).unwrap();
            let fd = fd_sensitivity(&p, &ep, 1e-5).unwrap();
            assert!(
                jac.max_abs_diff(&fd) < 1e-6 * (1.0 + jac.frob_norm()),
                "{}: analytic vs fd Jacobian",
                kind.name()
            );
        }
    }

    #[test]
    fn loss_diff_is_antisymmetric() {
        let t = sample_task(&cfg(InterfaceKind::DotProduct), 11, 3).unwrap();
        let a = GdPredictor { eta: 0.1, k: 1 };
        let b = GdPredictor { eta: 0.3, k: 2 };
        let src = |i: u64| {
            let mut task = sample_task(&cfg(InterfaceKind::DotProduct), 11, i).unwrap();
            task.cfg.n_ctx = t.cfg.n_ctx;
            task.episode()
        };
        let ab = compare(&a, &b, src, 16).unwrap();
        let ba = compare(&b, &a, src, 16).unwrap();
        assert!((ab.loss_diff + ba.loss_diff).abs() < 1e-12);
        assert!((ab.pred_diff - ba.pred_diff).abs() < 1e-15);
        assert!((ab.mean_loss_a - ba.mean_loss_b).abs() < 1e-15);
    }

    /// Means are permutation invariant up to compensated-summation slack.
    #[test]
    fn means_ignore_task_order() {
        let a = GdPredictor { eta: 0.1, k: 1 };
        let b = GdPredictor { eta: 0.5, k: 1 };
        let n = 64u64;
        let src = |i: u64| sample_task(&cfg(InterfaceKind::DotProduct), 77, i).unwrap().episode();
        let fwd = compare(&a, &b, src, n).unwrap();
        let rev = compare(&a, &b, |i| src(n - 1 - i), n).unwrap();
        assert!((fwd.pred_diff - rev.pred_diff).abs() < 1e-12);
        assert!((fwd.sens_cos - rev.sens_cos).abs() < 1e-12);
        assert!((fwd.loss_diff - rev.loss_diff).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_matrix_convention() {
        let z = Mat::zeros(2, 2);
        let m = Mat::eye(2);
        assert_eq!(cosine(&z, &m), 0.0);
        assert!((cosine(&m, &m) - 1.0).abs() < 1e-15);
        assert!((cosine(&m, &m.scale(-3.0)) + 1.0).abs() < 1e-15);
    }
}

//! Minibatch SGD over freshly sampled tasks.
//!
//! The trainer owns its model for the duration of the run.  Task identity is
//! purely index-driven: step `s`, batch slot `j` consumes episode index
//! `s*B + j` from the caller's source (or slot `j` alone when fresh sampling
//! is off), so a run is reproducible from `(init, config, sources)` alone.
//! Gradient evaluation is injectable: [`train_with`] accepts any function
//! with the same contract as [`LsaNet::batch_loss_and_grads`], which lets a
//! driver fan the batch out across threads as long as its reduction order is
//! fixed.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::{GradMode, LsaNet, ParamGrads};
use crate::task::Episode;

/// Trainer settings.  `lr`, `batch`, and `steps` defaults follow the
/// declared experiment configuration (they are reported with every result).
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Classical momentum; 0 disables the velocity buffer entirely.
    pub momentum: f64,
    /// Recorded for provenance; episode sources are seeded by the caller.
    pub seed: u64,
    /// Fresh tasks every step (index `s*B + j`) versus a fixed set (`j`).
    pub fresh_tasks: bool,
    /// Evaluate validation loss every this many steps (0 = never).
    pub val_every: u64,
    pub val_tasks: u64,
    pub grad_mode: GradMode,
    /// Abort when the batch loss exceeds this.
    pub divergence_limit: f64,
}

impl TrainConfig {
    pub fn new(steps: u64, batch: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch,
            lr,
            momentum: 0.0,
            seed,
            fresh_tasks: true,
            val_every: 0,
            val_tasks: 0,
            grad_mode: GradMode::ClosedForm,
            divergence_limit: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(CoreError::InvalidConfig("steps and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CoreError::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        if self.val_every > 0 && self.val_tasks == 0 {
            return Err(CoreError::InvalidConfig("validation enabled but val_tasks is 0".into()));
        }
        Ok(())
    }
}

/// One row of the training curve; `val_loss` only on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Parameters at the best validation point seen during the run.
#[derive(Debug, Clone)]
pub struct BestVal {
    pub step: u64,
    pub val_loss: f64,
    pub net: LsaNet,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters after the final step.
    pub net: LsaNet,
    pub curve: Vec<CurvePoint>,
    pub best_val: Option<BestVal>,
}

impl TrainResult {
    /// Best-so-far validation loss; infinity when validation never ran.
    pub fn best_val_loss(&self) -> f64 {
        self.best_val.as_ref().map_or(f64::INFINITY, |b| b.val_loss)
    }
}

/// Train with the model's own (sequential) gradient evaluation.
pub fn train(
    net: LsaNet,
    cfg: &TrainConfig,
    train_source: impl Fn(u64) -> Episode,
    val_source: impl Fn(u64) -> Episode,
) -> Result<TrainResult> {
    train_with(net, cfg, train_source, val_source, |n, eps, mode| {
        n.batch_loss_and_grads(eps, mode)
    })
}

/// Train with a caller-supplied gradient function (same contract as
/// [`LsaNet::batch_loss_and_grads`]: exact batch-mean loss and gradients).
pub fn train_with(
    mut net: LsaNet,
    cfg: &TrainConfig,
    train_source: impl Fn(u64) -> Episode,
    val_source: impl Fn(u64) -> Episode,
    grad_fn: impl Fn(&LsaNet, &[Episode], GradMode) -> Result<(f64, ParamGrads)>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut best_val: Option<BestVal> = None;
    let mut velocity: Option<ParamGrads> = None;

    let fixed_batch: Option<Vec<Episode>> = if cfg.fresh_tasks {
        None
    } else {
        Some((0..cfg.batch as u64).map(&train_source).collect())
    };

    for step in 0..cfg.steps {
        let fresh: Vec<Episode>;
        let batch: &[Episode] = match &fixed_batch {
            Some(b) => b,
            None => {
                let base = step * cfg.batch as u64;
                fresh = (0..cfg.batch as u64).map(|j| train_source(base + j)).collect();
                &fresh
            }
        };
        let (loss, grads) = grad_fn(&net, batch, cfg.grad_mode)?;
        if !loss.is_finite() || loss > cfg.divergence_limit {
            return Err(CoreError::Diverged { step, loss });
        }

        if cfg.momentum != 0.0 {
            let v = velocity.get_or_insert_with(|| ParamGrads::zeros_like(&net));
            v.scale_in_place(cfg.momentum);
            v.axpy_in_place(&grads, 1.0);
            net.sgd_update(v, cfg.lr);
        } else {
            net.sgd_update(&grads, cfg.lr);
        }

        let step1 = step + 1;
        let val_loss = if cfg.val_every > 0 && (step1 % cfg.val_every == 0 || step1 == cfg.steps)
        {
            let eps: Vec<Episode> = (0..cfg.val_tasks).map(&val_source).collect();
            let vl = net.batch_loss(&eps)?;
            if best_val.as_ref().map_or(true, |b| vl < b.val_loss) {
                best_val = Some(BestVal { step: step1, val_loss: vl, net: net.clone() });
            }
            Some(vl)
        } else {
            None
        };
        curve.push(CurvePoint { step: step1, train_loss: loss, val_loss });
    }
    Ok(TrainResult { net, curve, best_val })
}

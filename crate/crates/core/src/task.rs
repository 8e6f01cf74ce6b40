//! Synthetic retrieval-augmented regression tasks.
//!
//! A task couples a linear teacher with a retrieval interface.  Targets obey
//! the unified linear model
//!
//! ```text
//! y_i = W1 x1_i + W2_eff x2_i
//! ```
//!
//! where the second slot and the effective second weight depend on the
//! interface:
//!
//! * projection-based: `x2 = vec(docs)` (the task's whole document block,
//!   identical across examples) and `W2_eff = W1 W_d`;
//! * dot-product: `x2 = x1` and `W2_eff = W_z D M^T` with
//!   `D = sum_i d_i d_i^T` the document second moment.
//!
//! Sampling order within a task is frozen (teacher, documents, interface
//! weights, context inputs, query), so a `(seed, index)` pair reproduces a
//! task bit for bit no matter which tasks were drawn before it.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{DocInjection, TokenDims, TokenMatrix};
use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterfaceKind {
    ProjectionBased,
    DotProduct,
}

impl InterfaceKind {
    pub fn name(&self) -> &'static str {
        match self {
            InterfaceKind::ProjectionBased => "projection",
            InterfaceKind::DotProduct => "dot_product",
        }
    }
}

/// Distribution parameters for one task family.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Context examples per task (the query is extra).
    pub n_ctx: usize,
    /// Input dimension of x1.
    pub n_input: usize,
    /// Documents per task.
    pub docs: usize,
    /// Document feature dimension; for the dot-product interface this must
    /// equal `n_input` so the bilinear relevance score is well-typed.
    pub d_doc: usize,
    /// Target dimension.
    pub d_y: usize,
    /// Context inputs are i.i.d. U(-alpha, alpha) per coordinate.
    pub alpha: f64,
    /// Query inputs are i.i.d. U(-query_alpha, query_alpha); equal to `alpha`
    /// unless a distribution-shift sweep moves the test range.
    pub query_alpha: f64,
    /// Std of the interface weight entries (W_d, W_z, M).
    pub sigma: f64,
    pub interface: InterfaceKind,
    /// Keep M as drawn instead of symmetrizing.  Off by default; the
    /// symmetric form is the one the equivalence suite certifies.
    pub asymmetric_m: bool,
}

impl TaskConfig {
    /// The defaults used throughout the linear-regime experiments:
    /// N = n_input = 10, d_y = 1, alpha = 1.
    pub fn synthetic_default(interface: InterfaceKind, docs: usize) -> Self {
        TaskConfig {
            n_ctx: 10,
            n_input: 10,
            docs,
            d_doc: 10,
            d_y: 1,
            alpha: 1.0,
            query_alpha: 1.0,
            sigma: 1.0,
            interface,
            asymmetric_m: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ctx == 0 {
            return Err(CoreError::InvalidConfig("n_ctx must be positive".into()));
        }
        if self.n_input == 0 || self.d_y == 0 {
            return Err(CoreError::InvalidConfig("n_input and d_y must be positive".into()));
        }
        if self.docs == 0 || self.d_doc == 0 {
            return Err(CoreError::InvalidConfig("docs and d_doc must be positive".into()));
        }
        if !(self.alpha > 0.0) || !(self.query_alpha > 0.0) {
            return Err(CoreError::InvalidConfig("alpha must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::InvalidConfig("sigma must be positive".into()));
        }
        if self.interface == InterfaceKind::DotProduct && self.d_doc != self.n_input {
            return Err(CoreError::InvalidConfig(format!(
                "dot-product interface needs d_doc == n_input (got {} vs {})",
                self.d_doc, self.n_input
            )));
        }
        Ok(())
    }

    /// Width of the x2 slot.
    pub fn d2(&self) -> usize {
        match self.interface {
            InterfaceKind::ProjectionBased => self.docs * self.d_doc,
            InterfaceKind::DotProduct => self.n_input,
        }
    }

    pub fn token_dims(&self) -> TokenDims {
        TokenDims::new(self.n_input, self.d2(), self.d_y)
    }
}

/// Documents plus their cached second moment `D = sum_i d_i d_i^T`,
/// accumulated in ascending document order (the order is part of the
/// reproducibility contract).
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentSet {
    pub docs: Mat,
    pub second_moment: Mat,
}

impl DocumentSet {
    pub fn new(docs: Mat) -> Self {
        let second_moment = second_moment(&docs);
        DocumentSet { docs, second_moment }
    }

    pub fn n_docs(&self) -> usize {
        self.docs.rows()
    }

    pub fn d_doc(&self) -> usize {
        self.docs.cols()
    }

    /// Flattened row-major document block, the projection-based x2 slot.
    pub fn flat(&self) -> Vec<f64> {
        self.docs.as_slice().to_vec()
    }
}

/// `sum_i d_i d_i^T` over rows of `docs`, ascending index.
pub fn second_moment(docs: &Mat) -> Mat {
    let d = docs.cols();
    let mut m = Mat::zeros(d, d);
    for i in 0..docs.rows() {
        let row = docs.row(i);
        for a in 0..d {
            for b in 0..d {
                m[(a, b)] += row[a] * row[b];
            }
        }
    }
    m
}

/// Interface-specific weights drawn per task.
#[derive(Debug, Clone, PartialEq)]
pub enum RetrievalInterface {
    /// `W2_eff = W1 W_d`; `w_d` is `n_input x (docs * d_doc)`.
    ProjectionBased { w_d: Mat },
    /// `W2_eff = W_z D M^T`; `w_z` is `d_y x d_doc`, `m` is `n_input x d_doc`
    /// (square here since d_doc == n_input), symmetrized unless the config
    /// says otherwise.
    DotProduct { w_z: Mat, m: Mat },
}

impl RetrievalInterface {
    pub fn kind(&self) -> InterfaceKind {
        match self {
            RetrievalInterface::ProjectionBased { .. } => InterfaceKind::ProjectionBased,
            RetrievalInterface::DotProduct { .. } => InterfaceKind::DotProduct,
        }
    }
}

/// One sampled task: teacher, documents, interface, context set and query.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub cfg: TaskConfig,
    /// Teacher first-slot weights, `d_y x n_input`.
    pub w1: Mat,
    pub interface: RetrievalInterface,
    pub docs: DocumentSet,
    /// Context inputs, `n_ctx x n_input`.
    pub x1: Mat,
    /// Context second-slot features, `n_ctx x d2`.
    pub x2: Mat,
    /// Context targets, `n_ctx x d_y`.
    pub y: Mat,
    pub query_x1: Vec<f64>,
    pub query_x2: Vec<f64>,
    /// Ground-truth target at the query, used for loss reporting only; the
    /// query token always carries a zero y-slot.
    pub query_y: Vec<f64>,
}

impl Task {
    pub fn dims(&self) -> TokenDims {
        self.cfg.token_dims()
    }

    /// `(W1, W2_eff)` of the unified linear model this task's targets obey.
    pub fn effective_weights(&self) -> (Mat, Mat) {
        match &self.interface {
            RetrievalInterface::ProjectionBased { w_d } => (self.w1.clone(), self.w1.matmul(w_d)),
            RetrievalInterface::DotProduct { w_z, m } => (
                self.w1.clone(),
                w_z.matmul(&self.docs.second_moment).matmul(&m.transpose()),
            ),
        }
    }

    /// Token rows `(x1_i, x2_i, y_i)` for the context and `(x1_q, x2_q, 0)`
    /// for the query.
    pub fn tokens(&self) -> TokenMatrix {
        let dims = self.dims();
        let mut tm = TokenMatrix::zeros(dims, self.cfg.n_ctx);
        for i in 0..self.cfg.n_ctx {
            tm.mat.row_mut(i)[dims.x1()].copy_from_slice(self.x1.row(i));
            tm.mat.row_mut(i)[dims.x2()].copy_from_slice(self.x2.row(i));
            tm.mat.row_mut(i)[dims.y()].copy_from_slice(self.y.row(i));
        }
        let q = self.cfg.n_ctx;
        tm.mat.row_mut(q)[dims.x1()].copy_from_slice(&self.query_x1);
        tm.mat.row_mut(q)[dims.x2()].copy_from_slice(&self.query_x2);
        tm
    }

    /// Key/value injection rows for the dot-product interface (documents
    /// identity-projected into the input width).  Projection-based tasks
    /// carry their documents inside x2 and inject nothing.
    pub fn injection(&self) -> Option<DocInjection> {
        match self.cfg.interface {
            InterfaceKind::DotProduct => {
                Some(DocInjection::from_docs(&self.docs.docs, self.cfg.n_input))
            }
            InterfaceKind::ProjectionBased => None,
        }
    }
}

/// A materialized prompt: tokens, optional key/value injection, and the
/// ground-truth query target.  Everything a predictor needs, whether the
/// examples came from a synthetic teacher or from tabular rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tokens: TokenMatrix,
    pub inject: Option<DocInjection>,
    pub query_y: Vec<f64>,
    /// Both input slots of the query carry the same variable (dot-product
    /// layout), so input sensitivities must flow through x1 and x2 alike.
    pub shared_slots: bool,
}

impl Episode {
    pub fn dims(&self) -> TokenDims {
        self.tokens.dims
    }

    pub fn n_ctx(&self) -> usize {
        self.tokens.n_ctx
    }

    pub fn ctx_x1(&self) -> Mat {
        let d = self.dims();
        self.tokens.mat.block(0, self.n_ctx(), d.x1().start, d.x1().end)
    }

    pub fn ctx_x2(&self) -> Mat {
        let d = self.dims();
        self.tokens.mat.block(0, self.n_ctx(), d.x2().start, d.x2().end)
    }

    pub fn ctx_y(&self) -> Mat {
        let d = self.dims();
        self.tokens.mat.block(0, self.n_ctx(), d.y().start, d.y().end)
    }

    pub fn query_x1(&self) -> &[f64] {
        self.tokens.slot(self.n_ctx(), self.dims().x1())
    }

    pub fn query_x2(&self) -> &[f64] {
        self.tokens.slot(self.n_ctx(), self.dims().x2())
    }
}

impl Task {
    pub fn episode(&self) -> Episode {
        Episode {
            tokens: self.tokens(),
            inject: self.injection(),
            query_y: self.query_y.clone(),
            shared_slots: matches!(self.cfg.interface, InterfaceKind::DotProduct),
        }
    }
}

/// Sample a task from `cfg` using the stream addressed by
/// `(master_seed, task_index)`.
pub fn sample_task(cfg: &TaskConfig, master_seed: u64, task_index: u64) -> Result<Task> {
    cfg.validate()?;
    let mut r = rng::stream(master_seed, task_index);
    Ok(sample_with_rng(cfg, &mut r))
}

fn sample_with_rng(cfg: &TaskConfig, r: &mut impl Rng) -> Task {
    // 1. teacher
    let w1 = rng::normal_mat(r, cfg.d_y, cfg.n_input, 1.0);
    // 2. documents
    let docs = DocumentSet::new(rng::uniform_mat(r, cfg.docs, cfg.d_doc, -0.5, 0.5));
    // 3. interface weights
    let interface = match cfg.interface {
        InterfaceKind::ProjectionBased => RetrievalInterface::ProjectionBased {
            w_d: rng::normal_mat(r, cfg.n_input, cfg.docs * cfg.d_doc, cfg.sigma),
        },
        InterfaceKind::DotProduct => {
            let w_z = rng::normal_mat(r, cfg.d_y, cfg.d_doc, cfg.sigma);
            let a = rng::normal_mat(r, cfg.n_input, cfg.d_doc, cfg.sigma);
            let m = if cfg.asymmetric_m {
                a
            } else {
                // (A + A^T)/2; entrywise a_ij + a_ji is commutative, so the
                // result is symmetric in exact bits.
                a.add(&a.transpose()).expect("square").scale(0.5)
            };
            RetrievalInterface::DotProduct { w_z, m }
        }
    };
    // 4. context inputs
    let x1 = rng::uniform_mat(r, cfg.n_ctx, cfg.n_input, -cfg.alpha, cfg.alpha);
    // 5. query input
    let query_x1 = rng::uniform_vec(r, cfg.n_input, -cfg.query_alpha, cfg.query_alpha);

    let x2 = match cfg.interface {
        InterfaceKind::DotProduct => x1.clone(),
        InterfaceKind::ProjectionBased => {
            let flat = docs.flat();
            let mut m = Mat::zeros(cfg.n_ctx, flat.len());
            for i in 0..cfg.n_ctx {
                m.row_mut(i).copy_from_slice(&flat);
            }
            m
        }
    };
    let query_x2 = match cfg.interface {
        InterfaceKind::DotProduct => query_x1.clone(),
        InterfaceKind::ProjectionBased => docs.flat(),
    };

    let task_no_targets = Task {
        cfg: cfg.clone(),
        w1,
        interface,
        docs,
        x1,
        x2,
        y: Mat::zeros(cfg.n_ctx, cfg.d_y),
        query_x1,
        query_x2,
        query_y: Vec::new(),
    };
    let (w1_eff, w2_eff) = task_no_targets.effective_weights();
    let mut task = task_no_targets;
    let mut y = Mat::zeros(cfg.n_ctx, cfg.d_y);
    for i in 0..cfg.n_ctx {
        let yi = unified_predict(&w1_eff, &w2_eff, task.x1.row(i), task.x2.row(i));
        y.row_mut(i).copy_from_slice(&yi);
    }
    task.y = y;
    task.query_y = unified_predict(&w1_eff, &w2_eff, &task.query_x1, &task.query_x2);
    task
}

/// `W1 x1 + W2 x2` for row-slice inputs.
pub fn unified_predict(w1: &Mat, w2: &Mat, x1: &[f64], x2: &[f64]) -> Vec<f64> {
    let dy = w1.rows();
    let mut out = Vec::with_capacity(dy);
    for r in 0..dy {
        out.push(crate::mat::dot(w1.row(r), x1) + crate::mat::dot(w2.row(r), x2));
    }
    out
}

/// Addressable task stream: `task(i)` is independent of every other index.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub cfg: TaskConfig,
    pub master_seed: u64,
}

impl TaskSampler {
    pub fn new(cfg: TaskConfig, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(TaskSampler { cfg, master_seed })
    }

    pub fn task(&self, index: u64) -> Task {
        let mut r = rng::stream(self.master_seed, index);
        sample_with_rng(&self.cfg, &mut r)
    }
}

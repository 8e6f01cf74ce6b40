//! Amortized interface adaptation on a frozen toy generator.
//!
//! A small linear-attention generator answers retrieval-conditioned
//! regression queries.  Its backbone is frozen; the only trainable surface is
//! a low-rank additive update to the per-layer Q/K/V projections (the
//! evidence-use interface).  Three roads lead through this module:
//!
//! 1. **Base interface** `W0`: low-rank factors trained once on a source
//!    task distribution.
//! 2. **Test-time SGD**: `K` inner gradient steps on a handful of support
//!    demonstrations, run per query.
//! 3. **Amortized predictor**: a context encoder plus per-block heads that
//!    emit the update in one forward pass, trained to match the detached
//!    K-step SGD target with a cosine-plus-log-magnitude loss.
//!
//! The inner-loop target, the matching loss, and all costs are defined here;
//! wall-clock measurement and CSV output live in the lab crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::mathx;
use crate::metrics::Kahan;
use crate::rng;
use crate::train::CurvePoint;

/// Shape and distribution constants of the toy pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Query feature width; both input slots carry it (dot-product layout).
    pub d_in: usize,
    /// Target width.
    pub d_y: usize,
    /// Generator depth (independent layers).
    pub depth: usize,
    /// Rank of every interface block.
    pub rank: usize,
    /// Documents in a family's retrieval cache, injected whole.
    pub docs: usize,
    /// Demonstrations per support context.
    pub n_demos: usize,
    /// Magnitude weight in the matching loss.
    pub lambda: f64,
    /// Inner-loop SGD learning rate.
    pub inner_eta: f64,
    /// Query inputs are U(-x_alpha, x_alpha).
    pub x_alpha: f64,
    /// Demonstration inputs sit on shared anchor directions plus
    /// U(-demo_jitter, demo_jitter) noise.  Anchored demonstrations keep
    /// the K-step target close to a function of the task alone; with N
    /// tiny, fully random demonstrations would make the target mostly a
    /// function of the particular draw, which no context summary can
    /// recover.
    pub demo_jitter: f64,
    /// Frozen backbone entries are N(0, backbone_sigma^2).
    pub backbone_sigma: f64,
    /// Document entry scale before the family covariance shaping.
    pub doc_sigma: f64,
    /// Dimension of the per-task teacher latent.
    pub theta_dim: usize,
    /// Spread of the per-task teacher latent.
    pub theta_sigma: f64,
    /// Scale of family-level teacher bases.
    pub teacher_sigma: f64,
    pub n_source_families: usize,
    pub n_transfer_families: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d_in: 7,
            d_y: 2,
            depth: 2,
            rank: 4,
            docs: 24,
            n_demos: 3,
            lambda: 0.1,
            inner_eta: 1e-2,
            x_alpha: 1.05,
            demo_jitter: 0.15,
            backbone_sigma: 0.1,
            doc_sigma: 1.0,
            theta_dim: 2,
            theta_sigma: 0.5,
            teacher_sigma: 1.0,
            n_source_families: 4,
            n_transfer_families: 2,
        }
    }
}

impl ToyConfig {
    /// Token width: two input slots plus the target slot.
    pub fn token_dim(&self) -> usize {
        2 * self.d_in + self.d_y
    }

    /// Interface blocks: one per (layer, projection).
    pub fn n_blocks(&self) -> usize {
        3 * self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_y == 0 || self.depth == 0 {
            return Err(CoreError::InvalidConfig("generator dims must be positive".into()));
        }
        if self.rank == 0 || self.rank > self.token_dim() {
            return Err(CoreError::InvalidConfig("rank must be in 1..=token_dim".into()));
        }
        if self.docs == 0 || self.n_demos == 0 {
            return Err(CoreError::InvalidConfig("docs and n_demos must be positive".into()));
        }
        if self.n_source_families == 0 {
            return Err(CoreError::InvalidConfig("need at least one source family".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjKind {
    Q,
    K,
    V,
}

impl ProjKind {
    pub const ALL: [ProjKind; 3] = [ProjKind::Q, ProjKind::K, ProjKind::V];

    pub fn name(&self) -> &'static str {
        match self {
            ProjKind::Q => "q",
            ProjKind::K => "k",
            ProjKind::V => "v",
        }
    }
}

/// Block index for `(layer, projection)` under the frozen layer-major order.
pub fn block_index(layer: usize, proj: ProjKind) -> usize {
    3 * layer
        + match proj {
            ProjKind::Q => 0,
            ProjKind::K => 1,
            ProjKind::V => 2,
        }
}

/// One low-rank factor pair; the dense update is `u * v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock {
    pub u: Mat,
    pub v: Mat,
}

impl LoraBlock {
    pub fn dense(&self) -> Mat {
        self.u.matmul(&self.v.transpose())
    }
}

/// Factored updates for every (layer, projection) block, in
/// [`block_index`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraInterface {
    pub blocks: Vec<LoraBlock>,
}

impl LoraInterface {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let t = cfg.token_dim();
        let blocks = (0..cfg.n_blocks())
            .map(|_| LoraBlock { u: Mat::zeros(t, cfg.rank), v: Mat::zeros(t, cfg.rank) })
            .collect();
        LoraInterface { blocks }
    }

    pub fn validate(&self, cfg: &ToyConfig) -> Result<()> {
        if self.blocks.len() != cfg.n_blocks() {
            return Err(CoreError::InvalidConfig(format!(
                "interface has {} blocks, generator wants {}",
                self.blocks.len(),
                cfg.n_blocks()
            )));
        }
        let t = cfg.token_dim();
        for b in &self.blocks {
            if b.u.shape() != (t, cfg.rank) || b.v.shape() != (t, cfg.rank) {
                return Err(CoreError::InvalidConfig("interface block shape mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn dense_blocks(&self) -> Vec<Mat> {
        self.blocks.iter().map(|b| b.dense()).collect()
    }

    /// Rescale every factor pair so `|U|_F == |V|_F` without changing any
    /// product `U V^T`.  Gradient curvature with respect to one factor grows
    /// with the squared norm of the other, so balancing minimises the largest
    /// curvature a later fine-tuning step sees; training can otherwise leave
    /// the pair arbitrarily lopsided.
    pub fn balance(&mut self) {
        for b in &mut self.blocks {
            let (nu, nv) = (b.u.frob_norm(), b.v.frob_norm());
            if nu > 0.0 && nv > 0.0 {
                let s = (nv / nu).sqrt();
                b.u.scale_in_place(s);
                b.v.scale_in_place(1.0 / s);
            }
        }
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let layer = i / 3;
            let proj = ProjKind::ALL[i % 3].name();
            ck.push(format!("{prefix}l{layer}.{proj}.u"), b.u.clone());
            ck.push(format!("{prefix}l{layer}.{proj}.v"), b.v.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, cfg: &ToyConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks());
        for layer in 0..cfg.depth {
            for proj in ProjKind::ALL {
                let name = |f: &str| format!("{prefix}l{layer}.{}.{f}", proj.name());
                let u = ck
                    .get(&name("u"))
                    .ok_or_else(|| CoreError::BadCheckpoint(name("u")))?
                    .clone();
                let v = ck
                    .get(&name("v"))
                    .ok_or_else(|| CoreError::BadCheckpoint(name("v")))?
                    .clone();
                blocks.push(LoraBlock { u, v });
            }
        }
        let out = LoraInterface { blocks };
        out.validate(cfg)?;
        Ok(out)
    }
}

/// Dense per-block interface change, e.g. what `K` inner SGD steps did to
/// the factored interface.  Dense because the difference of two rank-r
/// products generally exceeds rank r.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceDelta {
    pub blocks: Vec<Mat>,
}

impl InterfaceDelta {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let t = cfg.token_dim();
        InterfaceDelta { blocks: (0..cfg.n_blocks()).map(|_| Mat::zeros(t, t)).collect() }
    }

    pub fn max_block_norm(&self) -> f64 {
        let mut m = 0.0;
        for b in &self.blocks {
            m = mathx::max(m, b.frob_norm());
        }
        m
    }
}

/// N demonstrations plus the retrieval cache they were answered against.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportContext {
    /// `n_demos x d_in`.
    pub demos_x: Mat,
    /// `n_demos x d_y`.
    pub demos_y: Mat,
    /// `docs x d_in`, shared by demos and query.
    pub docs: Mat,
}

/// One evaluation unit: a support context and a held-out query from the
/// same task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub ctx: SupportContext,
    pub query_x: Vec<f64>,
    pub query_y: Vec<f64>,
    pub family: usize,
    pub transfer: bool,
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Frozen per-layer projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub p: Mat,
}

/// Frozen linear-attention generator.  Every prompt row is an independent
/// query attending to the injected document rows only; re-injection delivers
/// the raw documents to every layer, so the document Gram matrix is shared
/// across layers.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    pub cfg: ToyConfig,
    layers: Vec<LayerWeights>,
}

impl ToyGenerator {
    /// Backbone from `stream(seed, 0)`; never mutated afterwards.
    pub fn new(cfg: ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.token_dim();
        let mut r = rng::stream(seed, 0);
        // Random directions, deterministic energy: each weight is rescaled to
        // the expected Frobenius norm `sigma * t`, so layer gain (and with it
        // the curvature any later fine-tuning sees) does not wander with the
        // seed.
        let mut draw = || {
            let mut w = rng::normal_mat(&mut r, t, t, cfg.backbone_sigma);
            let n = w.frob_norm();
            if n > 0.0 {
                w.scale_in_place(cfg.backbone_sigma * t as f64 / n);
            }
            w
        };
        let layers = (0..cfg.depth)
            .map(|_| LayerWeights { w_q: draw(), w_k: draw(), w_v: draw(), p: draw() })
            .collect();
        Ok(ToyGenerator { cfg, layers })
    }

    /// FNV-1a over the backbone bits; the frozen-backbone contract is
    /// checked by comparing this before and after training or deployment.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |m: &Mat| {
            for x in m.as_slice() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        };
        for l in &self.layers {
            eat(&l.w_q);
            eat(&l.w_k);
            eat(&l.w_v);
            eat(&l.p);
        }
        h
    }

    /// Start of base-interface training: `u` random, `v` zero, so the dense
    /// update starts at zero but gradients reach both factors.
    pub fn fresh_interface(&self, seed: u64) -> LoraInterface {
        let t = self.cfg.token_dim();
        let mut r = rng::stream(seed, 1);
        let scale = 1.0 / mathx::sqrt(t as f64);
        let blocks = (0..self.cfg.n_blocks())
            .map(|_| LoraBlock {
                u: rng::normal_mat(&mut r, t, self.cfg.rank, scale),
                v: Mat::zeros(t, self.cfg.rank),
            })
            .collect();
        LoraInterface { blocks }
    }

    /// Effective layer weights: frozen projections plus the interface's
    /// dense updates (and optionally a second additive dense delta).
    pub fn effective(&self, lora: &LoraInterface, extra: Option<&InterfaceDelta>) -> Vec<LayerWeights> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, base)| {
                let patch = |proj: ProjKind, frozen: &Mat| {
                    let i = block_index(l, proj);
                    let mut w = frozen.add(&lora.blocks[i].dense()).expect("shape");
                    if let Some(d) = extra {
                        w = w.add(&d.blocks[i]).expect("shape");
                    }
                    w
                };
                LayerWeights {
                    w_q: patch(ProjKind::Q, &base.w_q),
                    w_k: patch(ProjKind::K, &base.w_k),
                    w_v: patch(ProjKind::V, &base.w_v),
                    p: base.p.clone(),
                }
            })
            .collect()
    }

    /// Documents zero-padded into token width (x1 slot).
    fn padded_docs(&self, docs: &Mat) -> Mat {
        let t = self.cfg.token_dim();
        Mat::from_fn(docs.rows(), t, |i, j| if j < docs.cols() { docs[(i, j)] } else { 0.0 })
    }

    /// Token rows `(x, x, y)`; `ys = None` leaves the target slot blank.
    pub fn tokens_from(&self, xs: &Mat, ys: Option<&Mat>) -> Mat {
        let d = self.cfg.d_in;
        let t = self.cfg.token_dim();
        Mat::from_fn(xs.rows(), t, |i, j| {
            if j < d {
                xs[(i, j)]
            } else if j < 2 * d {
                xs[(i, j - d)]
            } else {
                match ys {
                    Some(y) => y[(i, j - 2 * d)],
                    None => 0.0,
                }
            }
        })
    }

    /// One full pass: every row of `e0` updated by each layer against the
    /// injected documents.  `E <- E + E (P W_V A W_K^T W_Q)^T` per layer,
    /// with `A` the padded-document Gram matrix.
    pub fn forward_rows(&self, eff: &[LayerWeights], e0: &Mat, docs: &Mat) -> Mat {
        let kv = self.padded_docs(docs);
        let gram = kv.transpose().matmul(&kv);
        let mut e = e0.clone();
        for l in eff {
            let chain = l
                .p
                .matmul(&l.w_v)
                .matmul(&gram)
                .matmul(&l.w_k.transpose())
                .matmul(&l.w_q);
            e = e.add(&e.matmul(&chain.transpose())).expect("shape");
        }
        e
    }

    /// Predictions for a batch of bare queries: forward with blank target
    /// slots, read the target slots back out.
    pub fn answer(&self, eff: &[LayerWeights], xs: &Mat, docs: &Mat) -> Mat {
        let e0 = self.tokens_from(xs, None);
        let e = self.forward_rows(eff, &e0, docs);
        let t = self.cfg.token_dim();
        e.block(0, xs.rows(), 2 * self.cfg.d_in, t)
    }

    /// Mean pooled final representation of the demonstrations, each encoded
    /// with its answer in the target slot — the context summary the update
    /// predictor conditions on.
    pub fn encode(&self, eff: &[LayerWeights], ctx: &SupportContext) -> Mat {
        let e0 = self.tokens_from(&ctx.demos_x, Some(&ctx.demos_y));
        let e = self.forward_rows(eff, &e0, &ctx.docs);
        let t = self.cfg.token_dim();
        let n = e.rows() as f64;
        Mat::from_fn(t, 1, |j, _| {
            let mut acc = Kahan::new();
            for i in 0..e.rows() {
                acc.add(e[(i, j)]);
            }
            acc.value() / n
        })
    }

    /// Mean squared prediction error over the context's demonstrations.
    pub fn demo_loss(&self, eff: &[LayerWeights], ctx: &SupportContext) -> f64 {
        let pred = self.answer(eff, &ctx.demos_x, &ctx.docs);
        let diff = pred.sub(&ctx.demos_y).expect("shape");
        diff.frob_norm_sq() / ctx.demos_x.rows() as f64
    }

    /// Squared error of a single query under the given effective weights.
    pub fn query_loss(&self, eff: &[LayerWeights], x: &[f64], y: &[f64], docs: &Mat) -> f64 {
        let xs = Mat::from_vec(1, x.len(), x.to_vec());
        let pred = self.answer(eff, &xs, docs);
        let mut s = 0.0;
        for (j, t) in y.iter().enumerate() {
            let d = pred[(0, j)] - t;
            s += d * d;
        }
        s
    }
}

/// Tape handles for the trainable factors of one interface.
struct LoraLeaves {
    us: Vec<NodeId>,
    vs: Vec<NodeId>,
}

impl LoraLeaves {
    fn record(tape: &mut Tape, lora: &LoraInterface) -> Self {
        let us = lora.blocks.iter().map(|b| tape.leaf(b.u.clone())).collect();
        let vs = lora.blocks.iter().map(|b| tape.leaf(b.v.clone())).collect();
        LoraLeaves { us, vs }
    }
}

impl ToyGenerator {
    /// Taped twin of [`ToyGenerator::forward_rows`] with the interface
    /// factors as differentiable leaves; the backbone, documents, and input
    /// rows enter as constants.
    fn taped_forward(
        &self,
        tape: &mut Tape,
        leaves: &LoraLeaves,
        e0: &Mat,
        docs: &Mat,
    ) -> NodeId {
        let kv = self.padded_docs(docs);
        let gram = tape.leaf(kv.transpose().matmul(&kv));
        let mut e = tape.leaf(e0.clone());
        for (l, w) in self.layers.iter().enumerate() {
            let eff = |tape: &mut Tape, proj: ProjKind, frozen: &Mat| {
                let i = block_index(l, proj);
                let f = tape.leaf(frozen.clone());
                let vt = tape.transpose(leaves.vs[i]);
                let uv = tape.matmul(leaves.us[i], vt);
                tape.add(f, uv)
            };
            let w_q = eff(tape, ProjKind::Q, &w.w_q);
            let w_k = eff(tape, ProjKind::K, &w.w_k);
            let w_v = eff(tape, ProjKind::V, &w.w_v);
            let p = tape.leaf(w.p.clone());
            let pv = tape.matmul(p, w_v);
            let pva = tape.matmul(pv, gram);
            let kt = tape.transpose(w_k);
            let pvak = tape.matmul(pva, kt);
            let chain = tape.matmul(pvak, w_q);
            let chain_t = tape.transpose(chain);
            let upd = tape.matmul(e, chain_t);
            e = tape.add(e, upd);
        }
        e
    }

    /// Taped mean squared demo error; scalar output.
    fn taped_demo_loss(&self, tape: &mut Tape, leaves: &LoraLeaves, ctx: &SupportContext) -> NodeId {
        let e0 = self.tokens_from(&ctx.demos_x, None);
        let e = self.taped_forward(tape, leaves, &e0, &ctx.docs);
        let n = ctx.demos_x.rows();
        let t = self.cfg.token_dim();
        let pred = tape.block(e, 0, n, 2 * self.cfg.d_in, t);
        let target = tape.leaf(ctx.demos_y.clone());
        let diff = tape.sub(pred, target);
        let ss = tape.sumsq(diff);
        tape.scale(ss, 1.0 / n as f64)
    }
}

// ---------------------------------------------------------------------------
// Inner loop and supervision target
// ---------------------------------------------------------------------------

/// `k` full-batch SGD steps on the demo loss, moving only interface factors.
pub fn inner_sgd(
    gen: &ToyGenerator,
    start: &LoraInterface,
    ctx: &SupportContext,
    eta: f64,
    k: usize,
) -> Result<LoraInterface> {
    start.validate(&gen.cfg)?;
    let mut cur = start.clone();
    for step in 0..k {
        let mut tape = Tape::new();
        let leaves = LoraLeaves::record(&mut tape, &cur);
        let loss = gen.taped_demo_loss(&mut tape, &leaves, ctx);
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(CoreError::Diverged { step: step as u64, loss: lv });
        }
        let g = tape.backward(loss);
        for (i, b) in cur.blocks.iter_mut().enumerate() {
            b.u.axpy(-eta, &g.wrt_or_zero(leaves.us[i], b.u.rows(), b.u.cols()));
            b.v.axpy(-eta, &g.wrt_or_zero(leaves.vs[i], b.v.rows(), b.v.cols()));
        }
    }
    Ok(cur)
}

/// The detached supervision target: the dense per-block change `k` inner
/// SGD steps make to the interface.  `k = 0` is exactly zero.
pub fn gd_target(
    gen: &ToyGenerator,
    base: &LoraInterface,
    ctx: &SupportContext,
    eta: f64,
    k: usize,
) -> Result<InterfaceDelta> {
    let adapted = inner_sgd(gen, base, ctx, eta, k)?;
    let blocks = adapted
        .blocks
        .iter()
        .zip(&base.blocks)
        .map(|(a, b)| a.dense().sub(&b.dense()).expect("shape"))
        .collect();
    Ok(InterfaceDelta { blocks })
}

// ---------------------------------------------------------------------------
// Matching loss
// ---------------------------------------------------------------------------

/// Direction-plus-scale matching over dense blocks:
/// `sum_b [1 - cos_F(pred_b, target_b) + lambda |ln(|pred_b| / |target_b|)|]`.
///
/// A zero-norm block on either side has no direction; it contributes the
/// maximal cosine penalty 1 and skips the magnitude term (the ratio is
/// undefined there).
pub fn matching_loss(pred: &[Mat], target: &InterfaceDelta, lambda: f64) -> f64 {
    assert_eq!(pred.len(), target.blocks.len(), "block count");
    let mut total = Kahan::new();
    for (p, t) in pred.iter().zip(&target.blocks) {
        let (np, nt) = (p.frob_norm(), t.frob_norm());
        if np == 0.0 || nt == 0.0 {
            total.add(1.0);
            continue;
        }
        let cos = p.frob_dot(t) / (np * nt);
        total.add(1.0 - cos + lambda * mathx::abs(mathx::ln(np / nt)));
    }
    total.value()
}

/// Taped matching loss against a constant target, for predictor training.
/// Zero-norm target blocks contribute a constant 1 (no gradient, as in the
/// plain version); predictions are assumed nonzero, which the surrounding
/// trainer guards with its divergence check.
fn taped_matching_loss(
    tape: &mut Tape,
    pred: &[NodeId],
    target: &InterfaceDelta,
    lambda: f64,
) -> NodeId {
    let mut total = tape.scalar_leaf(0.0);
    for (p, t) in pred.iter().zip(&target.blocks) {
        let nt = t.frob_norm();
        if nt == 0.0 {
            let one = tape.scalar_leaf(1.0);
            total = tape.add(total, one);
            continue;
        }
        let tconst = tape.leaf(t.clone());
        let fd = tape.frob_dot(*p, tconst);
        let ss = tape.sumsq(*p);
        let np = tape.sqrt(ss);
        let denom = tape.scale(np, nt);
        let cos = tape.div(fd, denom);
        let one = tape.scalar_leaf(1.0);
        let dir = tape.sub(one, cos);
        let ratio = tape.scale(np, 1.0 / nt);
        let lr = tape.ln(ratio);
        let mag = tape.abs(lr);
        let mag = tape.scale(mag, lambda);
        let block = tape.add(dir, mag);
        total = tape.add(total, block);
    }
    total
}

// ---------------------------------------------------------------------------
// Task families
// ---------------------------------------------------------------------------

/// A task family: a retrieval cache with its own document covariance, a
/// teacher base, and a low-dimensional basis along which tasks vary.
#[derive(Debug, Clone)]
pub struct FamilySpec {
    pub id: usize,
    pub transfer: bool,
    pub docs: Mat,
    /// Family teacher plus the retrieval-derived term; a task adds
    /// `sum_a theta_a basis_a`.
    teacher_base: Mat,
    basis: Vec<Mat>,
}

impl FamilySpec {
    /// Everything family-level comes from `stream(seed, 1000 + id)`, in a
    /// frozen order: doc shaping, docs, teacher weights, retrieval weights,
    /// variation basis.
    pub fn sample(cfg: &ToyConfig, seed: u64, id: usize, transfer: bool) -> Self {
        let mut r = rng::stream(seed, 1000 + id as u64);
        // Document covariance: identity plus a family-specific rotation.
        // The mixture keeps the attention pathway's conditioning similar
        // across families while leaving the cache second moment (and hence
        // the retrieval-derived teacher term) family-identifying.
        let g = rng::normal_mat(&mut r, cfg.d_in, cfg.d_in, 1.0 / mathx::sqrt(cfg.d_in as f64));
        let shape = Mat::from_fn(cfg.d_in, cfg.d_in, |i, j| {
            let id_part = if i == j { 1.0 } else { 0.0 };
            0.8 * id_part + 0.4 * g[(i, j)]
        });
        let raw = rng::normal_mat(&mut r, cfg.docs, cfg.d_in, cfg.doc_sigma / mathx::sqrt(cfg.docs as f64));
        let mut docs = raw.matmul(&shape.transpose());
        // Pin the cache's total energy; family identity lives in the shape of
        // the second moment, not in a lucky overall scale (which would feed
        // straight into attention-path curvature).
        let n = docs.frob_norm();
        docs.scale_in_place(cfg.doc_sigma * mathx::sqrt(cfg.d_in as f64) / n);
        let w1 = rng::normal_mat(&mut r, cfg.d_y, cfg.d_in, cfg.teacher_sigma);
        let w_z = rng::normal_mat(&mut r, cfg.d_y, cfg.d_in, cfg.teacher_sigma);
        let m_raw = rng::normal_mat(&mut r, cfg.d_in, cfg.d_in, 1.0);
        let m = m_raw.add(&m_raw.transpose()).expect("shape").scale(0.5);
        let second_moment = crate::task::second_moment(&docs);
        // The cache-derived teacher component, rescaled to the same
        // expected Frobenius norm as the dense component so evidence
        // carries real weight without dominating the conditioning.
        let raw = w_z.matmul(&second_moment).matmul(&m.transpose());
        let want = cfg.teacher_sigma * mathx::sqrt((cfg.d_y * cfg.d_in) as f64);
        let retrieval = raw.scale(want / raw.frob_norm());
        let mut teacher_base = w1.add(&retrieval).expect("shape");
        // Pin the combined norm as well: families should differ in which map
        // they compute, not in how hard their outputs are to regress.
        let n = teacher_base.frob_norm();
        teacher_base.scale_in_place(want * mathx::sqrt(2.0) / n);
        let basis = (0..cfg.theta_dim)
            .map(|_| {
                let b = rng::normal_mat(&mut r, cfg.d_y, cfg.d_in, 1.0);
                let n = b.frob_norm();
                b.scale(1.0 / n)
            })
            .collect();
        FamilySpec { id, transfer, docs, teacher_base, basis }
    }

    /// Total answer map of a task at latent `theta`.
    pub fn teacher(&self, theta: &[f64]) -> Mat {
        let mut t = self.teacher_base.clone();
        for (a, b) in theta.iter().zip(&self.basis) {
            t.axpy(*a, b);
        }
        t
    }
}

/// The closed world of the toy study: source families plus held-out
/// transfer families that neither training stage ever samples.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub cfg: ToyConfig,
    pub families: Vec<FamilySpec>,
    /// Shared demonstration anchors, `n_demos x d_in`, drawn once per world.
    pub anchors: Mat,
}

/// Stream id bases; keeps every sampling purpose on a disjoint ChaCha
/// stream of the master seed.
const STREAM_STAGE1: u64 = 1 << 20;
const STREAM_CONTEXT: u64 = 2 << 20;
const STREAM_HELDOUT: u64 = 3 << 20;
const STREAM_EVAL: u64 = 4 << 20;

impl ToyWorld {
    pub fn new(cfg: ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut families = Vec::new();
        for id in 0..cfg.n_source_families {
            families.push(FamilySpec::sample(&cfg, seed, id, false));
        }
        for j in 0..cfg.n_transfer_families {
            let id = cfg.n_source_families + j;
            families.push(FamilySpec::sample(&cfg, seed, id, true));
        }
        let mut r = rng::stream(seed, 999);
        // Orthogonal anchors with the typical input norm condition the
        // inner-loop problem: demonstrations probe independent directions,
        // so one inner step corrects them at comparable rates.
        let raw = rng::normal_mat(&mut r, cfg.n_demos, cfg.d_in, 1.0);
        let want = cfg.x_alpha * mathx::sqrt(cfg.d_in as f64 / 3.0);
        let mut anchors = Mat::zeros(cfg.n_demos, cfg.d_in);
        for i in 0..cfg.n_demos {
            let mut v = raw.row(i).to_vec();
            for j in 0..i {
                let prev = anchors.row(j);
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                let nj: f64 = prev.iter().map(|x| x * x).sum();
                if nj > 0.0 {
                    for (vk, pk) in v.iter_mut().zip(prev) {
                        *vk -= dot / nj * pk;
                    }
                }
            }
            let n: f64 = mathx::sqrt(v.iter().map(|x| x * x).sum());
            assert!(n > 1e-9, "anchor degenerate; need n_demos <= d_in");
            for (dst, vk) in anchors.row_mut(i).iter_mut().zip(&v) {
                *dst = vk / n * want;
            }
        }
        Ok(ToyWorld { cfg, families, anchors })
    }

    fn source(&self, i: usize) -> &FamilySpec {
        &self.families[i % self.cfg.n_source_families]
    }

    fn transfer(&self, i: usize) -> &FamilySpec {
        &self.families[self.cfg.n_source_families + i % self.cfg.n_transfer_families]
    }

    fn theta(&self, r: &mut impl Rng) -> Vec<f64> {
        // Uniform with the same variance a normal of `theta_sigma` would
        // have, but bounded: task scale then cannot stray into the regime
        // where a fixed-step inner loop stops contracting.
        let b = self.cfg.theta_sigma * mathx::sqrt(3.0);
        rng::uniform_vec(r, self.cfg.theta_dim, -b, b)
    }

    fn demos(&self, fam: &FamilySpec, teacher: &Mat, r: &mut impl Rng) -> SupportContext {
        let j = self.cfg.demo_jitter;
        let noise = rng::uniform_mat(r, self.cfg.n_demos, self.cfg.d_in, -j, j);
        let mut xs = self.anchors.clone();
        xs.axpy(1.0, &noise);
        let ys = xs.matmul(&teacher.transpose());
        SupportContext { demos_x: xs, demos_y: ys, docs: fam.docs.clone() }
    }

    /// Training batch for the base interface: one fresh task, `batch`
    /// labelled examples against its family cache.
    pub fn example_batch(&self, seed: u64, step: usize, batch: usize) -> (Mat, Mat, Mat) {
        let mut r = rng::stream(seed, STREAM_STAGE1 + step as u64);
        let fam = self.source(step);
        let teacher = fam.teacher(&self.theta(&mut r));
        let a = self.cfg.x_alpha;
        let xs = rng::uniform_mat(&mut r, batch, self.cfg.d_in, -a, a);
        let ys = xs.matmul(&teacher.transpose());
        (xs, ys, fam.docs.clone())
    }

    /// Meta-training context `index` (source families only).
    pub fn context(&self, seed: u64, index: u64) -> SupportContext {
        let mut r = rng::stream(seed, STREAM_CONTEXT + index);
        let fam = self.source(index as usize);
        let teacher = fam.teacher(&self.theta(&mut r));
        self.demos(fam, &teacher, &mut r)
    }

    /// Held-out context `index`: fresh tasks from source families, on a
    /// stream no trainer touches.
    pub fn heldout_context(&self, seed: u64, index: u64) -> SupportContext {
        let mut r = rng::stream(seed, STREAM_HELDOUT + index);
        let fam = self.source(index as usize);
        let teacher = fam.teacher(&self.theta(&mut r));
        self.demos(fam, &teacher, &mut r)
    }

    /// Evaluation episode: support context plus one held-out query from the
    /// same task; `transfer` selects the held-out families.
    pub fn episode(&self, seed: u64, index: u64, transfer: bool) -> EvalEpisode {
        let mut r = rng::stream(seed, STREAM_EVAL + 2 * index + transfer as u64);
        let fam = if transfer { self.transfer(index as usize) } else { self.source(index as usize) };
        let teacher = fam.teacher(&self.theta(&mut r));
        let ctx = self.demos(fam, &teacher, &mut r);
        let a = self.cfg.x_alpha;
        let qx = rng::uniform_vec(&mut r, self.cfg.d_in, -a, a);
        let qm = Mat::from_vec(1, self.cfg.d_in, qx.clone());
        let qy = qm.matmul(&teacher.transpose());
        EvalEpisode { ctx, query_x: qx, query_y: qy.as_slice().to_vec(), family: fam.id, transfer }
    }

    pub fn episodes(&self, seed: u64, count: usize, transfer: bool) -> Vec<EvalEpisode> {
        (0..count as u64).map(|i| self.episode(seed, i, transfer)).collect()
    }
}

// ---------------------------------------------------------------------------
// Base interface training (stage 1)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// The step size decays geometrically to `lr * lr_decay` by the last
    /// step; 1 keeps it constant.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Rescale each step's gradient so its global Frobenius norm stays at or
    /// below this; tames curvature spikes without touching typical steps.
    pub grad_clip: f64,
    pub seed: u64,
    /// Abort when the batch loss exceeds this.
    pub divergence_limit: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            steps: 8000,
            batch: 16,
            lr: 4.5e-3,
            lr_decay: 0.25,
            momentum: 0.9,
            grad_clip: 25.0,
            seed: 0,
            divergence_limit: 1e6,
        }
    }
}

/// Geometric interpolation from `lr` to `lr * decay` across `steps`.
fn lr_at(lr: f64, decay: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 || decay == 1.0 {
        return lr;
    }
    lr * mathx::powf(decay, step as f64 / (steps - 1) as f64)
}

/// SGD with classical momentum on the interface factors over fresh source
/// tasks.  Returns the trained interface and the batch-loss curve.
pub fn train_base(
    gen: &ToyGenerator,
    world: &ToyWorld,
    cfg: &BaseTrainConfig,
) -> Result<(LoraInterface, Vec<CurvePoint>)> {
    let mut cur = gen.fresh_interface(cfg.seed);
    let t = gen.cfg.token_dim();
    let r = gen.cfg.rank;
    let mut vel_u = vec![Mat::zeros(t, r); cur.blocks.len()];
    let mut vel_v = vec![Mat::zeros(t, r); cur.blocks.len()];
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let (xs, ys, docs) = world.example_batch(cfg.seed, step, cfg.batch);
        let ctx = SupportContext { demos_x: xs, demos_y: ys, docs };
        let mut tape = Tape::new();
        let leaves = LoraLeaves::record(&mut tape, &cur);
        let loss = gen.taped_demo_loss(&mut tape, &leaves, &ctx);
        let lv = tape.scalar(loss);
        if !lv.is_finite() || lv > cfg.divergence_limit {
            return Err(CoreError::Diverged { step: step as u64, loss: lv });
        }
        if step % 10 == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint { step: step as u64, train_loss: lv, val_loss: None });
        }
        let g = tape.backward(loss);
        let grads: Vec<(Mat, Mat)> = (0..cur.blocks.len())
            .map(|i| (g.wrt_or_zero(leaves.us[i], t, r), g.wrt_or_zero(leaves.vs[i], t, r)))
            .collect();
        let gnorm = grads
            .iter()
            .map(|(gu, gv)| {
                let (a, b) = (gu.frob_norm(), gv.frob_norm());
                a * a + b * b
            })
            .sum::<f64>()
            .sqrt();
        let clip = if gnorm > cfg.grad_clip { cfg.grad_clip / gnorm } else { 1.0 };
        let lr = lr_at(cfg.lr, cfg.lr_decay, step, cfg.steps);
        for (i, b) in cur.blocks.iter_mut().enumerate() {
            vel_u[i].scale_in_place(cfg.momentum);
            vel_u[i].axpy(clip, &grads[i].0);
            vel_v[i].scale_in_place(cfg.momentum);
            vel_v[i].axpy(clip, &grads[i].1);
            b.u.axpy(-lr, &vel_u[i]);
            b.v.axpy(-lr, &vel_v[i]);
        }
    }
    // Balanced factors give every block the same inner-step curvature profile
    // regardless of how lopsided optimisation left the pairs.
    cur.balance();
    Ok((cur, curve))
}

// ---------------------------------------------------------------------------
// Update predictor
// ---------------------------------------------------------------------------

/// Context-conditioned update predictor: a two-layer trunk over the pooled
/// demonstration encoding, then one linear head per interface block
/// emitting stacked `(U, V)` factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    /// One `(weight, bias)` pair per block; output length `2 * d * r`.
    pub heads: Vec<(Mat, Mat)>,
    d: usize,
    rank: usize,
}

pub const TRUNK_HIDDEN: usize = 256;
pub const TRUNK_OUT: usize = 64;

impl Predictor {
    /// Parameters from `stream(seed, 2)`; trunk layers at 1/sqrt(fan-in),
    /// heads deliberately small so initial update norms start below the
    /// targets rather than orders of magnitude above.
    pub fn new(cfg: &ToyConfig, seed: u64) -> Self {
        let t = cfg.token_dim();
        let mut r = rng::stream(seed, 2);
        let w1 = rng::normal_mat(&mut r, TRUNK_HIDDEN, t, 1.0 / mathx::sqrt(t as f64));
        let b1 = Mat::zeros(TRUNK_HIDDEN, 1);
        let w2 = rng::normal_mat(&mut r, TRUNK_OUT, TRUNK_HIDDEN, 1.0 / mathx::sqrt(TRUNK_HIDDEN as f64));
        let b2 = Mat::zeros(TRUNK_OUT, 1);
        let out = 2 * t * cfg.rank;
        let heads = (0..cfg.n_blocks())
            .map(|_| {
                (
                    rng::normal_mat(&mut r, out, TRUNK_OUT, 1e-2 / mathx::sqrt(TRUNK_OUT as f64)),
                    Mat::zeros(out, 1),
                )
            })
            .collect();
        Predictor { w1, b1, w2, b2, heads, d: t, rank: cfg.rank }
    }

    pub fn n_blocks(&self) -> usize {
        self.heads.len()
    }

    /// Per-sample standardisation of the pooled encoding.  The encoding's
    /// scale depends on the generator draw; without this the trunk's tanh
    /// can start saturated on some worlds and never recover.
    fn standardize(hbar: &Mat) -> Mat {
        let n = (hbar.rows() * hbar.cols()) as f64;
        let mean = hbar.as_slice().iter().sum::<f64>() / n;
        let var = hbar.as_slice().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / (mathx::sqrt(var) + 1e-8);
        hbar.map(|x| (x - mean) * inv)
    }

    /// One forward pass: pooled encoding to factored per-block updates.
    pub fn forward(&self, hbar: &Mat) -> LoraInterface {
        let hbar = Self::standardize(hbar);
        let z1 = self.w1.matmul(&hbar).add(&self.b1).expect("shape").map(mathx::tanh);
        let z2 = self.w2.matmul(&z1).add(&self.b2).expect("shape");
        let dr = self.d * self.rank;
        let blocks = self
            .heads
            .iter()
            .map(|(w, b)| {
                let o = w.matmul(&z2).add(b).expect("shape");
                let u = Mat::from_vec(self.d, self.rank, o.as_slice()[..dr].to_vec());
                let v = Mat::from_vec(self.d, self.rank, o.as_slice()[dr..].to_vec());
                LoraBlock { u, v }
            })
            .collect();
        LoraInterface { blocks }
    }

    /// Parameters in a frozen order, shared by the optimizer and the
    /// checkpoint format.
    fn params(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = vec![&self.w1, &self.b1, &self.w2, &self.b2];
        for (w, b) in &self.heads {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        for (w, b) in &mut self.heads {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn param_names(&self) -> Vec<alloc::string::String> {
        let mut names = vec![
            alloc::string::String::from("trunk.w1"),
            alloc::string::String::from("trunk.b1"),
            alloc::string::String::from("trunk.w2"),
            alloc::string::String::from("trunk.b2"),
        ];
        for i in 0..self.heads.len() {
            names.push(format!("head{i}.w"));
            names.push(format!("head{i}.b"));
        }
        names
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, m) in self.param_names().iter().zip(self.params()) {
            ck.push(format!("{prefix}{name}"), (*m).clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, cfg: &ToyConfig) -> Result<Self> {
        let mut out = Predictor::new(cfg, 0);
        let names = out.param_names();
        for (name, slot) in names.iter().zip(out.params_mut()) {
            let key = format!("{prefix}{name}");
            let m = ck.get(&key).ok_or_else(|| CoreError::BadCheckpoint(key.clone()))?;
            if m.shape() != slot.shape() {
                return Err(CoreError::BadCheckpoint(format!("{key}: wrong shape")));
            }
            *slot = m.clone();
        }
        Ok(out)
    }

    /// Taped forward returning dense per-block update nodes plus the
    /// parameter leaves in [`Predictor::params`] order.
    fn taped_dense(&self, tape: &mut Tape, hbar: &Mat) -> (Vec<NodeId>, Vec<NodeId>) {
        let w1 = tape.leaf(self.w1.clone());
        let b1 = tape.leaf(self.b1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let b2 = tape.leaf(self.b2.clone());
        // The encoding is an input, not a parameter: standardise outside the
        // tape, exactly as [`Predictor::forward`] does.
        let h = tape.leaf(Self::standardize(hbar));
        let a1 = tape.matmul(w1, h);
        let a1b = tape.add(a1, b1);
        let z1 = tape.tanh(a1b);
        let a2 = tape.matmul(w2, z1);
        let z2 = tape.add(a2, b2);
        let mut leaves = vec![w1, b1, w2, b2];
        let dr = self.d * self.rank;
        let mut dense = Vec::with_capacity(self.heads.len());
        for (w, b) in &self.heads {
            let wl = tape.leaf(w.clone());
            let bl = tape.leaf(b.clone());
            let o = tape.matmul(wl, z2);
            let o = tape.add(o, bl);
            let uflat = tape.block(o, 0, dr, 0, 1);
            let vflat = tape.block(o, dr, 2 * dr, 0, 1);
            let u = tape.reshape(uflat, self.d, self.rank);
            let v = tape.reshape(vflat, self.d, self.rank);
            let vt = tape.transpose(v);
            dense.push(tape.matmul(u, vt));
            leaves.push(wl);
            leaves.push(bl);
        }
        (dense, leaves)
    }
}

// ---------------------------------------------------------------------------
// Predictor meta-training (stage 2)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PredictorTrainConfig {
    pub steps: usize,
    /// Contexts averaged per optimizer step.
    pub accum: usize,
    pub lr: f64,
    /// Geometric decay target, as in [`BaseTrainConfig::lr_decay`].
    pub lr_decay: f64,
    pub seed: u64,
    pub inner_eta: f64,
    pub inner_k: usize,
    pub divergence_limit: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            steps: 10000,
            accum: 4,
            lr: 1e-3,
            lr_decay: 0.2,
            seed: 0,
            inner_eta: 1e-2,
            inner_k: 1,
            divergence_limit: 1e6,
        }
    }
}

/// Adam state over a flat parameter list.
struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: usize,
    pub lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[&Mat], lr: f64) -> Self {
        let m = shapes.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        let v = shapes.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Adam { m, v, t: 0, lr }
    }

    fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - mathx::powf(Self::B1, self.t as f64);
        let bc2 = 1.0 - mathx::powf(Self::B2, self.t as f64);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for ((pi, gi), (mi, vi)) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()))
            {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (mathx::sqrt(vhat) + Self::EPS);
            }
        }
    }
}

/// Meta-train the predictor against detached inner-SGD targets on fresh
/// source contexts.  Returns the training curve (mean matching loss per
/// recorded step).
pub fn train_predictor(
    gen: &ToyGenerator,
    base: &LoraInterface,
    world: &ToyWorld,
    pred: &mut Predictor,
    cfg: &PredictorTrainConfig,
) -> Result<Vec<CurvePoint>> {
    let eff = gen.effective(base, None);
    let mut adam = Adam::new(&pred.params(), cfg.lr);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let mut acc: Option<Vec<Mat>> = None;
        let mut loss_acc = Kahan::new();
        for j in 0..cfg.accum {
            let idx = (step * cfg.accum + j) as u64;
            let ctx = world.context(cfg.seed, idx);
            let target = gd_target(gen, base, &ctx, cfg.inner_eta, cfg.inner_k)?;
            let hbar = gen.encode(&eff, &ctx);
            let mut tape = Tape::new();
            let (dense, leaves) = pred.taped_dense(&mut tape, &hbar);
            let loss = taped_matching_loss(&mut tape, &dense, &target, gen.cfg.lambda);
            let lv = tape.scalar(loss);
            if !lv.is_finite() || lv > cfg.divergence_limit {
                return Err(CoreError::Diverged { step: step as u64, loss: lv });
            }
            loss_acc.add(lv);
            let g = tape.backward(loss);
            let gs: Vec<Mat> = leaves
                .iter()
                .zip(pred.params())
                .map(|(l, p)| g.wrt_or_zero(*l, p.rows(), p.cols()))
                .collect();
            match &mut acc {
                None => acc = Some(gs),
                Some(a) => {
                    for (ai, gi) in a.iter_mut().zip(&gs) {
                        ai.axpy(1.0, gi);
                    }
                }
            }
        }
        let mut gs = acc.expect("accum >= 1");
        for g in &mut gs {
            g.scale_in_place(1.0 / cfg.accum as f64);
        }
        adam.lr = lr_at(cfg.lr, cfg.lr_decay, step, cfg.steps);
        adam.step(pred.params_mut(), &gs);
        if step % 10 == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint {
                step: step as u64,
                train_loss: loss_acc.value() / cfg.accum as f64,
                val_loss: None,
            });
        }
    }
    Ok(curve)
}

/// Mean matching loss of a predictor over held-out contexts.
pub fn matching_eval(
    gen: &ToyGenerator,
    base: &LoraInterface,
    pred: &Predictor,
    world: &ToyWorld,
    seed: u64,
    n: usize,
    eta: f64,
    k: usize,
) -> Result<f64> {
    let eff = gen.effective(base, None);
    let mut acc = Kahan::new();
    for i in 0..n as u64 {
        let ctx = world.heldout_context(seed, i);
        let target = gd_target(gen, base, &ctx, eta, k)?;
        let hbar = gen.encode(&eff, &ctx);
        let out = pred.forward(&hbar);
        acc.add(matching_loss(&out.dense_blocks(), &target, gen.cfg.lambda));
    }
    Ok(acc.value() / n as f64)
}

// ---------------------------------------------------------------------------
// Deployment and evaluation
// ---------------------------------------------------------------------------

/// Forward-only adaptation: encode the context, predict the update, answer
/// the query with the patched interface.  No gradient computation anywhere.
pub fn deploy(
    gen: &ToyGenerator,
    base: &LoraInterface,
    pred: &Predictor,
    ctx: &SupportContext,
    query_x: &[f64],
) -> Vec<f64> {
    let base_eff = gen.effective(base, None);
    let hbar = gen.encode(&base_eff, ctx);
    let upd = pred.forward(&hbar);
    let delta = InterfaceDelta { blocks: upd.dense_blocks() };
    let eff = gen.effective(base, Some(&delta));
    let xs = Mat::from_vec(1, query_x.len(), query_x.to_vec());
    gen.answer(&eff, &xs, &ctx.docs).as_slice().to_vec()
}

/// Analytic per-query cost model.  Counts multiply–add FLOPs (`2 m k n` per
/// `m x k · k x n` product) exactly as the implementation computes things:
/// the document Gram is rebuilt per forward pass; backward costs twice the
/// differentiated forward matmuls; the base interface's effective weights
/// are composed once and shared across queries.
pub mod cost {
    use super::ToyConfig;

    pub fn mm(m: usize, k: usize, n: usize) -> u64 {
        2 * (m as u64) * (k as u64) * (n as u64)
    }

    /// Padded-document Gram matrix.
    pub fn gram(cfg: &ToyConfig) -> u64 {
        let t = cfg.token_dim();
        mm(t, cfg.docs, t)
    }

    /// One generator pass over `rows` prompt rows, effective weights given.
    pub fn forward(cfg: &ToyConfig, rows: usize) -> u64 {
        let t = cfg.token_dim();
        let per_layer = 4 * mm(t, t, t) + mm(rows, t, t) + (rows * t) as u64;
        gram(cfg) + cfg.depth as u64 * per_layer
    }

    /// Composing effective weights from factored blocks: one `U V^T` plus
    /// one add per block.
    pub fn eff_build(cfg: &ToyConfig) -> u64 {
        let t = cfg.token_dim();
        cfg.n_blocks() as u64 * (mm(t, cfg.rank, t) + (t * t) as u64)
    }

    /// Predictor forward: trunk, tanh, and per-block heads.
    pub fn predictor(cfg: &ToyConfig) -> u64 {
        let t = cfg.token_dim();
        let out = 2 * t * cfg.rank;
        let trunk = mm(super::TRUNK_HIDDEN, t, 1)
            + 2 * super::TRUNK_HIDDEN as u64
            + mm(super::TRUNK_OUT, super::TRUNK_HIDDEN, 1)
            + super::TRUNK_OUT as u64;
        let heads = cfg.n_blocks() as u64 * (mm(out, super::TRUNK_OUT, 1) + out as u64);
        trunk + heads
    }

    /// Base interface, effective weights amortized across queries.
    pub fn per_query_base(cfg: &ToyConfig) -> u64 {
        forward(cfg, 1)
    }

    /// K taped inner steps (forward plus double-cost backward over the
    /// differentiated part) and one answer with the adapted factors.
    pub fn per_query_ttsgd(cfg: &ToyConfig, k: usize) -> u64 {
        let fwd_diff = eff_build(cfg) + forward(cfg, cfg.n_demos) - gram(cfg);
        let step = gram(cfg) + 3 * fwd_diff;
        k as u64 * step + eff_build(cfg) + forward(cfg, 1)
    }

    /// Encode demos with the cached base weights, one predictor pass,
    /// compose the patched weights, answer.
    pub fn per_query_amortized(cfg: &ToyConfig) -> u64 {
        let t = cfg.token_dim();
        let compose = cfg.n_blocks() as u64 * (mm(t, cfg.rank, t) + 2 * (t * t) as u64);
        forward(cfg, cfg.n_demos) + predictor(cfg) + compose + forward(cfg, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Base,
    TtSgd,
    Amortized,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::TtSgd => "tt_sgd",
            Method::Amortized => "amortized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: Method,
    pub k: usize,
    pub eta: f64,
    pub eval_loss: f64,
    pub flops_per_query: u64,
    pub transfer: bool,
    pub n_episodes: usize,
}

/// Mean held-out query loss and analytic per-query cost for the base
/// interface, test-time SGD, and the amortized predictor over one episode
/// set.  All episodes must share the `transfer` flag.
pub fn evaluate_suite(
    gen: &ToyGenerator,
    base: &LoraInterface,
    pred: &Predictor,
    episodes: &[EvalEpisode],
    eta: f64,
    k: usize,
) -> Result<Vec<EvalRow>> {
    if episodes.is_empty() {
        return Err(CoreError::InvalidConfig("empty evaluation set".into()));
    }
    let transfer = episodes[0].transfer;
    if episodes.iter().any(|e| e.transfer != transfer) {
        return Err(CoreError::InvalidConfig("mixed transfer flags in one suite".into()));
    }
    let base_eff = gen.effective(base, None);
    let (mut l_base, mut l_tt, mut l_am) = (Kahan::new(), Kahan::new(), Kahan::new());
    for ep in episodes {
        l_base.add(gen.query_loss(&base_eff, &ep.query_x, &ep.query_y, &ep.ctx.docs));
        let adapted = inner_sgd(gen, base, &ep.ctx, eta, k)?;
        let tt_eff = gen.effective(&adapted, None);
        l_tt.add(gen.query_loss(&tt_eff, &ep.query_x, &ep.query_y, &ep.ctx.docs));
        let out = deploy(gen, base, pred, &ep.ctx, &ep.query_x);
        let mut s = 0.0;
        for (p, t) in out.iter().zip(&ep.query_y) {
            s += (p - t) * (p - t);
        }
        l_am.add(s);
    }
    let n = episodes.len();
    let mean = |k: Kahan| k.value() / n as f64;
    Ok(vec![
        EvalRow {
            method: Method::Base,
            k: 0,
            eta,
            eval_loss: mean(l_base),
            flops_per_query: cost::per_query_base(&gen.cfg),
            transfer,
            n_episodes: n,
        },
        EvalRow {
            method: Method::TtSgd,
            k,
            eta,
            eval_loss: mean(l_tt),
            flops_per_query: cost::per_query_ttsgd(&gen.cfg, k),
            transfer,
            n_episodes: n,
        },
        EvalRow {
            method: Method::Amortized,
            k,
            eta,
            eval_loss: mean(l_am),
            flops_per_query: cost::per_query_amortized(&gen.cfg),
            transfer,
            n_episodes: n,
        },
    ])
}

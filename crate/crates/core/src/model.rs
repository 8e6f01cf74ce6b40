//! Trainable attention models: a single linear self-attention layer, the
//! shared-parameter stack, and the MLP-embedded nonlinear variant — one
//! struct, three regimes.
//!
//! Gradients come in two modes.  `ClosedForm` is a hand-derived chain for the
//! single-layer identity-embedding case (the hot path during training
//! sweeps); `ReverseMode` replays the same forward on a [`Tape`] and works
//! for every regime, including shared-parameter stacks (whose gradients
//! accumulate across depth occurrences of the same leaf).  The two modes
//! agree to rounding on their common domain, and both are pinned to central
//! finite differences in the tests.
//!
//! Injected key/value document rows pass into attention untransformed — the
//! input embedding applies to tokens, not to the fixed document projection.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::attention::{
    embed_forward, stack_forward, Activation, AttentionParams, EmbedMlp, StackParams, TokenDims,
};
use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::metrics::Predictor;
use crate::task::Episode;

/// How batch gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Hand-derived single-layer chain; requires depth 1 and identity embed.
    ClosedForm,
    /// Tape replay of the forward; any depth, any embedding.
    ReverseMode,
}

/// A trainable attention network over fixed token dims: `depth` applications
/// of one shared single-head layer, optionally preceded by a weight-shared
/// MLP on the input slots.
#[derive(Debug, Clone)]
pub struct LsaNet {
    pub dims: TokenDims,
    pub depth: usize,
    pub embed: EmbedMlp,
    pub params: AttentionParams,
}

/// Gradient (or update direction) for every trainable matrix of an
/// [`LsaNet`], shape-matched to the model.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w_k: Mat,
    pub w_q: Mat,
    pub w_v: Mat,
    pub p: Mat,
    pub embed_w: Vec<Mat>,
    pub embed_b: Vec<Mat>,
}

impl ParamGrads {
    pub fn zeros_like(net: &LsaNet) -> Self {
        let td = net.dims.token_dim();
        ParamGrads {
            w_k: Mat::zeros(td, td),
            w_q: Mat::zeros(td, td),
            w_v: Mat::zeros(td, td),
            p: Mat::zeros(td, td),
            embed_w: net.embed.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
            embed_b: net.embed.biases.iter().map(|b| Mat::zeros(b.rows(), b.cols())).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for m in self.iter_mut() {
            *m = m.scale(s);
        }
    }

    /// `self += other * s`.
    pub fn axpy_in_place(&mut self, other: &ParamGrads, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.axpy(s, b);
        }
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.iter().map(|m| m.frob_norm_sq()).sum()
    }

    fn iter(&self) -> impl Iterator<Item = &Mat> {
        [&self.w_k, &self.w_q, &self.w_v, &self.p]
            .into_iter()
            .chain(self.embed_w.iter())
            .chain(self.embed_b.iter())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        [&mut self.w_k, &mut self.w_q, &mut self.w_v, &mut self.p]
            .into_iter()
            .chain(self.embed_w.iter_mut())
            .chain(self.embed_b.iter_mut())
    }
}

/// Tape leaves for every trainable matrix, in the same order as
/// [`ParamGrads`].
struct TapeLeaves {
    w_k: NodeId,
    w_q: NodeId,
    w_v: NodeId,
    p: NodeId,
    embed_w: Vec<NodeId>,
    embed_b: Vec<NodeId>,
}

impl LsaNet {
    /// Single layer, identity embedding, all four matrices `N(0, scale^2)`.
    pub fn new_lsa(dims: TokenDims, scale: f64, seed: u64) -> Self {
        Self::new_stacked(dims, 1, scale, seed)
    }

    /// Shared-parameter stack of `depth` layers.
    pub fn new_stacked(dims: TokenDims, depth: usize, scale: f64, seed: u64) -> Self {
        assert!(depth >= 1, "depth must be at least 1");
        let td = dims.token_dim();
        let mut r = crate::rng::stream(seed, 0);
        let mut m = || crate::rng::normal_mat(&mut r, td, td, scale);
        let (w_k, w_q, w_v, p) = (m(), m(), m(), m());
        LsaNet {
            dims,
            depth,
            embed: EmbedMlp::identity(),
            params: AttentionParams::single(w_k, w_q, w_v, p),
        }
    }

    /// Single layer behind a weight-shared input MLP with the given hidden
    /// widths (input and output widths are `dims.d1`, which must equal
    /// `dims.d2`).
    pub fn new_mlp(
        dims: TokenDims,
        hidden: &[usize],
        act: Activation,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if dims.d1 != dims.d2 {
            return Err(CoreError::InvalidConfig(
                "embedded model needs matching x1/x2 widths".into(),
            ));
        }
        let mut net = Self::new_lsa(dims, scale, seed);
        let mut r = crate::rng::stream(seed, 1);
        let mut widths = vec![dims.d1];
        widths.extend_from_slice(hidden);
        widths.push(dims.d1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in widths.windows(2) {
            let (from, to) = (win[0], win[1]);
            let w_scale = 1.0 / crate::mathx::sqrt(from as f64);
            weights.push(crate::rng::normal_mat(&mut r, to, from, w_scale));
            biases.push(Mat::zeros(to, 1));
        }
        net.embed = EmbedMlp { weights, biases, act };
        net.embed.validate(dims.d1)?;
        Ok(net)
    }

    pub fn token_dim(&self) -> usize {
        self.dims.token_dim()
    }

    /// Forward prediction: embed, run the stack, read the query y-slot.
    pub fn forward(&self, ep: &Episode) -> Result<Vec<f64>> {
        let tokens = embed_forward(&self.embed, &ep.tokens)?;
        let trace = stack_forward(
            &StackParams::Shared { params: &self.params, depth: self.depth },
            &tokens,
            ep.inject.as_ref(),
        )?;
        Ok(trace.tokens.query_y().to_vec())
    }

    /// Mean squared query loss over a batch.
    pub fn batch_loss(&self, eps: &[Episode]) -> Result<f64> {
        let mut acc = crate::metrics::Kahan::new();
        for ep in eps {
            let pred = self.forward(ep)?;
            acc.add(crate::metrics::query_sq_err(&pred, &ep.query_y));
        }
        Ok(acc.value() / eps.len() as f64)
    }

    /// Batch loss and exact gradients of it for every trainable matrix.
    pub fn batch_loss_and_grads(
        &self,
        eps: &[Episode],
        mode: GradMode,
    ) -> Result<(f64, ParamGrads)> {
        if eps.is_empty() {
            return Err(CoreError::InvalidConfig("empty batch".into()));
        }
        match mode {
            GradMode::ClosedForm => self.closed_form_grads(eps),
            GradMode::ReverseMode => self.reverse_mode_grads(eps),
        }
    }

    // ---- closed form ------------------------------------------------------

    /// Single-layer chain.  Token-space forward at the query is
    /// `pred = y_slot(e_q + P W_V A W_K^T W_Q e_q)` with `A = S^T S` the
    /// key/value Gram matrix; each link's adjoint is an outer product.
    fn closed_form_grads(&self, eps: &[Episode]) -> Result<(f64, ParamGrads)> {
        if self.depth != 1 || !self.embed.is_identity() {
            return Err(CoreError::InvalidConfig(
                "closed-form gradients cover only the single-layer identity-embed model".into(),
            ));
        }
        let h = self.params.head();
        let td = self.token_dim();
        let ys = self.dims.y();
        let mut grads = ParamGrads::zeros_like(self);
        let mut loss = crate::metrics::Kahan::new();
        for ep in eps {
            let kv = crate::attention::kv_source(&ep.tokens, ep.inject.as_ref())?;
            // A = sum_i s_i s_i^T, ascending row order.
            let mut a = Mat::zeros(td, td);
            for i in 0..kv.rows() {
                let s = kv.row(i);
                for r in 0..td {
                    if s[r] == 0.0 {
                        continue;
                    }
                    for c in 0..td {
                        a[(r, c)] += s[r] * s[c];
                    }
                }
            }
            let e_q = ep.tokens.query_row();
            debug_assert!(e_q[ys.clone()].iter().all(|&v| v == 0.0), "query y-slot starts zero");
            let q1 = mat_vec(&h.w_q, e_q);
            let k1 = mat_t_vec(&h.w_k, &q1);
            let a1 = mat_vec(&a, &k1);
            let v1 = mat_vec(&h.w_v, &a1);
            let p1 = mat_vec(&h.p, &v1);

            // Prediction and residual gradient, lifted back to token space.
            let mut g_p1 = vec![0.0; td];
            let mut err = 0.0;
            for (slot, truth) in ys.clone().zip(&ep.query_y) {
                let pred = e_q[slot] + p1[slot];
                let d = pred - truth;
                err += d * d;
                g_p1[slot] = 2.0 * d;
            }
            loss.add(err);

            outer_acc(&mut grads.p, &g_p1, &v1);
            let g_v1 = mat_t_vec(&h.p, &g_p1);
            outer_acc(&mut grads.w_v, &g_v1, &a1);
            let g_a1 = mat_t_vec(&h.w_v, &g_v1);
            let g_k1 = mat_t_vec(&a, &g_a1);
            outer_acc(&mut grads.w_k, &q1, &g_k1);
            let g_q1 = mat_vec(&h.w_k, &g_k1);
            outer_acc(&mut grads.w_q, &g_q1, e_q);
        }
        let inv = 1.0 / eps.len() as f64;
        grads.scale_in_place(inv);
        Ok((loss.value() * inv, grads))
    }

    // ---- reverse mode ------------------------------------------------------

    fn leaves(&self, t: &mut Tape) -> TapeLeaves {
        let h = self.params.head();
        TapeLeaves {
            w_k: t.leaf(h.w_k.clone()),
            w_q: t.leaf(h.w_q.clone()),
            w_v: t.leaf(h.w_v.clone()),
            p: t.leaf(h.p.clone()),
            embed_w: self.embed.weights.iter().map(|m| t.leaf(m.clone())).collect(),
            embed_b: self.embed.biases.iter().map(|m| t.leaf(m.clone())).collect(),
        }
    }

    /// Taped forward for one episode; `query_x` optionally replaces the
    /// query's input slots with a differentiable 1 x d1 leaf (the sensitivity
    /// probe).  Returns the 1 x d_y query prediction node.
    fn tape_forward(
        &self,
        t: &mut Tape,
        lv: &TapeLeaves,
        ep: &Episode,
        query_x: Option<NodeId>,
    ) -> Result<NodeId> {
        let dims = self.dims;
        let td = dims.token_dim();
        let n_ctx = ep.n_ctx();
        self.embed.validate_for(dims)?;

        let ctx = t.leaf(ep.tokens.mat.block(0, n_ctx, 0, td));
        let qrow = match query_x {
            Some(x) => {
                assert_eq!(t.value(x).shape(), (1, dims.d1), "query probe shape");
                let mut base = Mat::zeros(1, td);
                if !ep.shared_slots {
                    for (i, c) in dims.x2().enumerate() {
                        base[(0, c)] = ep.query_x2()[i];
                    }
                }
                let base = t.leaf(base);
                let x1 = t.pad_into(x, 1, td, 0, dims.x1().start);
                let mut row = t.add(base, x1);
                if ep.shared_slots {
                    let x2 = t.pad_into(x, 1, td, 0, dims.x2().start);
                    row = t.add(row, x2);
                }
                row
            }
            None => t.leaf(ep.tokens.mat.block(n_ctx, n_ctx + 1, 0, td)),
        };
        let mut tokens = t.vstack(ctx, qrow);

        if !self.embed.is_identity() {
            let rows = n_ctx + 1;
            let mut slot_out = Vec::new();
            for range in [dims.x1(), dims.x2()] {
                let mut cur = t.block(tokens, 0, rows, range.start, range.end);
                let n_layers = self.embed.weights.len();
                for li in 0..n_layers {
                    let wt = t.transpose(lv.embed_w[li]);
                    let pre = t.matmul(cur, wt);
                    let bt = t.transpose(lv.embed_b[li]);
                    let bias = t.repeat_rows(bt, rows);
                    cur = t.add(pre, bias);
                    if li + 1 < n_layers {
                        cur = match self.embed.act {
                            Activation::Identity => cur,
                            Activation::Relu => t.relu(cur),
                            Activation::Tanh => t.tanh(cur),
                        };
                    }
                }
                slot_out.push(t.pad_into(cur, rows, td, 0, range.start));
            }
            let y = t.block(tokens, 0, rows, dims.y().start, dims.y().end);
            let y = t.pad_into(y, rows, td, 0, dims.y().start);
            let x12 = t.add(slot_out[0], slot_out[1]);
            tokens = t.add(x12, y);
        }

        let inject = match &ep.inject {
            Some(inj) => Some(t.leaf(inj.padded_rows(dims)?)),
            None => None,
        };
        for _ in 0..self.depth {
            let mut kv = t.block(tokens, 0, n_ctx, 0, td);
            if let Some(inj) = inject {
                kv = t.vstack(kv, inj);
            }
            let wkt = t.transpose(lv.w_k);
            let k = t.matmul(kv, wkt);
            let wvt = t.transpose(lv.w_v);
            let v = t.matmul(kv, wvt);
            let wqt = t.transpose(lv.w_q);
            let q = t.matmul(tokens, wqt);
            let kt = t.transpose(k);
            let scores = t.matmul(q, kt);
            let sv = t.matmul(scores, v);
            let pt = t.transpose(lv.p);
            let upd = t.matmul(sv, pt);
            tokens = t.add(tokens, upd);
        }
        Ok(t.block(tokens, n_ctx, n_ctx + 1, dims.y().start, dims.y().end))
    }

    fn reverse_mode_grads(&self, eps: &[Episode]) -> Result<(f64, ParamGrads)> {
        let mut t = Tape::new();
        let lv = self.leaves(&mut t);
        let mut total: Option<NodeId> = None;
        for ep in eps {
            let pred = self.tape_forward(&mut t, &lv, ep, None)?;
            let truth = t.leaf(Mat::from_vec(1, ep.query_y.len(), ep.query_y.clone()));
            let resid = t.sub(pred, truth);
            let l = t.sumsq(resid);
            total = Some(match total {
                Some(acc) => t.add(acc, l),
                None => l,
            });
        }
        let mean = t.scale(total.expect("nonempty batch"), 1.0 / eps.len() as f64);
        let loss = t.scalar(mean);
        if !loss.is_finite() {
            return Err(CoreError::NonFinite("batch loss"));
        }
        let g = t.backward(mean);
        let td = self.token_dim();
        let grads = ParamGrads {
            w_k: g.wrt_or_zero(lv.w_k, td, td),
            w_q: g.wrt_or_zero(lv.w_q, td, td),
            w_v: g.wrt_or_zero(lv.w_v, td, td),
            p: g.wrt_or_zero(lv.p, td, td),
            embed_w: self
                .embed
                .weights
                .iter()
                .zip(&lv.embed_w)
                .map(|(m, id)| g.wrt_or_zero(*id, m.rows(), m.cols()))
                .collect(),
            embed_b: self
                .embed
                .biases
                .iter()
                .zip(&lv.embed_b)
                .map(|(m, id)| g.wrt_or_zero(*id, m.rows(), m.cols()))
                .collect(),
        };
        Ok((loss, grads))
    }

    /// Apply a plain SGD update `params -= lr * grads`.
    pub fn sgd_update(&mut self, grads: &ParamGrads, lr: f64) {
        let h = &mut self.params.heads[0];
        h.w_k.axpy(-lr, &grads.w_k);
        h.w_q.axpy(-lr, &grads.w_q);
        h.w_v.axpy(-lr, &grads.w_v);
        h.p.axpy(-lr, &grads.p);
        for (w, g) in self.embed.weights.iter_mut().zip(&grads.embed_w) {
            w.axpy(-lr, g);
        }
        for (b, g) in self.embed.biases.iter_mut().zip(&grads.embed_b) {
            b.axpy(-lr, g);
        }
    }

    // ---- persistence -------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let meta = Mat::from_vec(
            1,
            5,
            vec![
                self.dims.d1 as f64,
                self.dims.d2 as f64,
                self.dims.dy as f64,
                self.depth as f64,
                match self.embed.act {
                    Activation::Identity => 0.0,
                    Activation::Relu => 1.0,
                    Activation::Tanh => 2.0,
                },
            ],
        );
        ck.push(String::from("meta"), meta);
        let params = self.params.to_checkpoint("lsa.");
        for name in params.names() {
            ck.push(String::from(name), params.get(name).expect("own entry").clone());
        }
        for (i, w) in self.embed.weights.iter().enumerate() {
            ck.push(format!("embed.w{i}"), w.clone());
        }
        for (i, b) in self.embed.biases.iter().enumerate() {
            ck.push(format!("embed.b{i}"), b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get("meta").ok_or(CoreError::BadCheckpoint("missing meta".into()))?;
        if meta.shape() != (1, 5) {
            return Err(CoreError::BadCheckpoint("meta must be 1x5".into()));
        }
        let dims = TokenDims::new(meta[(0, 0)] as usize, meta[(0, 1)] as usize, meta[(0, 2)] as usize);
        let depth = meta[(0, 3)] as usize;
        let act = match meta[(0, 4)] as i64 {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            other => {
                return Err(CoreError::BadCheckpoint(format!("unknown activation code {other}")))
            }
        };
        let params = AttentionParams::from_checkpoint(ck, "lsa.")?;
        params.validate(dims.token_dim())?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0.. {
            match (ck.get(&format!("embed.w{i}")), ck.get(&format!("embed.b{i}"))) {
                (Some(w), Some(b)) => {
                    weights.push(w.clone());
                    biases.push(b.clone());
                }
                (None, None) => break,
                _ => return Err(CoreError::BadCheckpoint("embed layer half missing".into())),
            }
        }
        let embed = EmbedMlp { weights, biases, act };
        if !embed.is_identity() {
            embed.validate(dims.d1)?;
        }
        if depth < 1 {
            return Err(CoreError::BadCheckpoint("depth must be >= 1".into()));
        }
        Ok(LsaNet { dims, depth, embed, params })
    }
}

impl EmbedMlp {
    fn validate_for(&self, dims: TokenDims) -> Result<()> {
        if self.is_identity() {
            return Ok(());
        }
        if dims.d1 != dims.d2 {
            return Err(CoreError::InvalidConfig(
                "embedded model needs matching x1/x2 widths".into(),
            ));
        }
        self.validate(dims.d1)
    }
}

impl Predictor for LsaNet {
    fn predict(&self, ep: &Episode) -> Result<Vec<f64>> {
        self.forward(ep)
    }

    /// Analytic Jacobian via one tape backward per output component, with
    /// the query's input slots as the differentiable leaf.
    fn sensitivity(&self, ep: &Episode) -> Result<Mat> {
        let mut t = Tape::new();
        let lv = self.leaves(&mut t);
        let x = t.leaf(Mat::from_vec(1, self.dims.d1, ep.query_x1().to_vec()));
        let pred = self.tape_forward(&mut t, &lv, ep, Some(x))?;
        if !t.value(pred).is_finite() {
            return Err(CoreError::NonFinite("sensitivity forward"));
        }
        let dy = self.dims.dy;
        let mut jac = Mat::zeros(dy, self.dims.d1);
        for r in 0..dy {
            let comp = t.block(pred, 0, 1, r, r + 1);
            let g = t.backward(comp);
            let row = g.wrt_or_zero(x, 1, self.dims.d1);
            for c in 0..self.dims.d1 {
                jac[(r, c)] = row[(0, c)];
            }
        }
        Ok(jac)
    }
}

fn mat_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), x.len(), "mat_vec shape");
    (0..m.rows()).map(|r| crate::mat::dot(m.row(r), x)).collect()
}

/// `m^T x` without materializing the transpose.
fn mat_t_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.rows(), x.len(), "mat_t_vec shape");
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (c, v) in m.row(r).iter().enumerate() {
            out[c] += xr * v;
        }
    }
    out
}

fn outer_acc(m: &mut Mat, a: &[f64], b: &[f64]) {
    assert_eq!(m.shape(), (a.len(), b.len()), "outer shape");
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        for (c, &bc) in b.iter().enumerate() {
            m[(r, c)] += ar * bc;
        }
    }
}

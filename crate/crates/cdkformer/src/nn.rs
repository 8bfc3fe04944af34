//! Neural layers built on the tape: linear/MLP, multihead attention,
//! pre-norm transformer encoder layers, mixture-of-experts feed-forwards,
//! and the multistream decoder block.

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::rng::RngStream;

/// Per-forward context: the tape under construction, the parameters backing
/// it, and dropout state (None rng = evaluation mode, dropout disabled).
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub dropout_rate: f64,
    pub rng: Option<&'a mut RngStream>,
}

impl<'a> Fwd<'a> {
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Fwd { tape, store, dropout_rate: 0.0, rng: None }
    }

    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, rate: f64, rng: &'a mut RngStream) -> Self {
        Fwd { tape, store, dropout_rate: rate, rng: Some(rng) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, v: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout_rate > 0.0 => self.tape.dropout(v, self.dropout_rate, rng),
            _ => v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), d_in, d_out, Init::Xavier, rng);
        let b = bias.then(|| store.register(&format!("{name}.b"), 1, d_out, Init::Zeros, rng));
        Linear { w, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.w);
        let y = f.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = f.param(b);
                f.tape.add_row_broadcast(y, bv)
            }
            None => y,
        }
    }
}

/// Feed-forward stack with ReLU between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(store, rng, &format!("{name}.l{i}"), dims[i], dims[i + 1], true))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h);
            if i + 1 < self.layers.len() {
                h = f.tape.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormP {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, d: usize) -> Self {
        LayerNormP {
            gain: store.register(&format!("{name}.gain"), 1, d, Init::Ones, rng),
            bias: store.register(&format!("{name}.bias"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        f.tape.layer_norm(x, g, b)
    }
}

/// Multihead scaled dot-product attention with per-head split along the
/// feature axis and a final output projection. Projections carry no bias.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d % heads == 0, "feature dim {d} not divisible by {heads} heads");
        Attention {
            wq: store.register(&format!("{name}.wq"), d, d, Init::Xavier, rng),
            wk: store.register(&format!("{name}.wk"), d, d, Init::Xavier, rng),
            wv: store.register(&format!("{name}.wv"), d, d, Init::Xavier, rng),
            wo: store.register(&format!("{name}.wo"), d, d, Init::Xavier, rng),
            heads,
            d,
        }
    }

    pub fn forward(&self, f: &mut Fwd, q_in: Var, k_in: Var, v_in: Var, key_mask: Option<&[bool]>) -> Var {
        self.forward_with_weights(f, q_in, k_in, v_in, key_mask).0
    }

    /// Also returns the per-head attention weight matrices, for tests.
    pub fn forward_with_weights(
        &self,
        f: &mut Fwd,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let dh = self.d / self.heads;
        let wq = f.param(self.wq);
        let wk = f.param(self.wk);
        let wv = f.param(self.wv);
        let q = f.tape.matmul(q_in, wq);
        let k = f.tape.matmul(k_in, wk);
        let v = f.tape.matmul(v_in, wv);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = f.tape.slice_cols(q, h * dh, dh);
            let kh = f.tape.slice_cols(k, h * dh, dh);
            let vh = f.tape.slice_cols(v, h * dh, dh);
            let kt = f.tape.transpose(kh);
            let scores = f.tape.matmul(qh, kt);
            let scaled = f.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = f.tape.softmax_rows(scaled, key_mask);
            weights.push(attn);
            outs.push(f.tape.matmul(attn, vh));
        }
        let merged = f.tape.concat_cols_all(&outs);
        let wo = f.param(self.wo);
        (f.tape.matmul(merged, wo), weights)
    }
}

/// Standard pre-norm transformer encoder layer:
/// x + Attn(LN(x)) followed by x + MLP(LN(x)), dropout on both residuals.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNormP,
    pub attn: Attention,
    pub ln2: LayerNormP,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNormP::new(store, rng, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNormP::new(store, rng, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[d, d_ff, d]),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, key_mask: Option<&[bool]>) -> Var {
        let n = self.ln1.forward(f, x);
        let a = self.attn.forward(f, n, n, n, key_mask);
        let a = f.dropout(a);
        let x = f.tape.add(x, a);
        let n = self.ln2.forward(f, x);
        let m = self.mlp.forward(f, n);
        let m = f.dropout(m);
        f.tape.add(x, m)
    }
}

/// Dense mixture-of-experts feed-forward: every expert is a two-layer ReLU
/// MLP, the softmax gate mixes all expert outputs per row.
#[derive(Debug, Clone)]
pub struct MoeFf {
    pub experts: Vec<(Linear, Linear)>,
    pub gate: Linear,
    pub n_experts: usize,
}

impl MoeFf {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        d_hidden: usize,
        n_experts: usize,
    ) -> Self {
        assert!(n_experts >= 1);
        let experts = (0..n_experts)
            .map(|k| {
                (
                    Linear::new(store, rng, &format!("{name}.e{k}.up"), d, d_hidden, true),
                    Linear::new(store, rng, &format!("{name}.e{k}.down"), d_hidden, d, true),
                )
            })
            .collect();
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d, n_experts, true);
        MoeFf { experts, gate, n_experts }
    }

    pub fn forward(&self, f: &mut Fwd, q: Var) -> Var {
        self.forward_with_gate(f, q).0
    }

    pub fn forward_with_gate(&self, f: &mut Fwd, q: Var) -> (Var, Var) {
        let logits = self.gate.forward(f, q);
        let gates = f.tape.softmax_rows(logits, None);
        let mut out: Option<Var> = None;
        for (k, (up, down)) in self.experts.iter().enumerate() {
            let h = up.forward(f, q);
            let h = f.tape.relu(h);
            let e = down.forward(f, h);
            let gk = f.tape.slice_cols(gates, k, 1);
            let weighted = f.tape.mul_col_broadcast(e, gk);
            out = Some(match out {
                Some(acc) => f.tape.add(acc, weighted),
                None => weighted,
            });
        }
        (out.unwrap(), gates)
    }
}

/// Relative order of the cross-attention streams and the self-attention
/// phase inside a multistream block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StreamOrder {
    DeviationContextSelf,
    ContextDeviationSelf,
    SelfDeviationContext,
}

impl StreamOrder {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dev-ctx-self" => Some(StreamOrder::DeviationContextSelf),
            "ctx-dev-self" => Some(StreamOrder::ContextDeviationSelf),
            "self-dev-ctx" => Some(StreamOrder::SelfDeviationContext),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StreamOrder::DeviationContextSelf => "dev-ctx-self",
            StreamOrder::ContextDeviationSelf => "ctx-dev-self",
            StreamOrder::SelfDeviationContext => "self-dev-ctx",
        }
    }

    /// True when the self-attention phase runs before the cross streams.
    pub fn self_first(&self) -> bool {
        matches!(self, StreamOrder::SelfDeviationContext)
    }

    /// True when the stream tuple (deviation, context) should be swapped.
    pub fn swap_streams(&self) -> bool {
        matches!(self, StreamOrder::ContextDeviationSelf)
    }
}

struct StreamStage {
    ln_q: LayerNormP,
    ln_mem: LayerNormP,
    attn: Attention,
    moe: MoeFf,
}

/// Multistream decoder block. For each memory stream in turn: pre-norm
/// cross-attention with residual dropout, then a MoE feed-forward with
/// residual dropout. A self-attention phase plus a final pre-norm MLP close
/// the block; with no streams the block reduces to plain pre-norm
/// self-attention + MLP.
pub struct MultistreamBlock {
    stages: Vec<StreamStage>,
    ln_self: LayerNormP,
    self_attn: Attention,
    ln_mlp: LayerNormP,
    mlp: Mlp,
}

impl MultistreamBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        d: usize,
        heads: usize,
        n_streams: usize,
        n_experts: usize,
        d_ff: usize,
    ) -> Self {
        let stages = (0..n_streams)
            .map(|s| StreamStage {
                ln_q: LayerNormP::new(store, rng, &format!("{name}.s{s}.ln_q"), d),
                ln_mem: LayerNormP::new(store, rng, &format!("{name}.s{s}.ln_mem"), d),
                attn: Attention::new(store, rng, &format!("{name}.s{s}.attn"), d, heads),
                moe: MoeFf::new(store, rng, &format!("{name}.s{s}.moe"), d, d, n_experts),
            })
            .collect();
        MultistreamBlock {
            stages,
            ln_self: LayerNormP::new(store, rng, &format!("{name}.self.ln"), d),
            self_attn: Attention::new(store, rng, &format!("{name}.self.attn"), d, heads),
            ln_mlp: LayerNormP::new(store, rng, &format!("{name}.mlp_ln"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[d, d_ff, d]),
        }
    }

    pub fn n_streams(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(&self, f: &mut Fwd, q: Var, streams: &[Var], self_first: bool) -> Var {
        assert!(
            streams.len() <= self.stages.len(),
            "block built for {} streams, got {}",
            self.stages.len(),
            streams.len()
        );
        let mut q = q;
        if self_first {
            q = self.self_phase(f, q);
        }
        for (stage, &mem) in self.stages.iter().zip(streams) {
            let qn = stage.ln_q.forward(f, q);
            let mn = stage.ln_mem.forward(f, mem);
            let attn = stage.attn.forward(f, qn, mn, mn, None);
            let attn = f.dropout(attn);
            q = f.tape.add(q, attn);
            let moe = stage.moe.forward(f, q);
            let moe = f.dropout(moe);
            q = f.tape.add(q, moe);
        }
        if !self_first {
            q = self.self_phase(f, q);
        }
        let qn = self.ln_mlp.forward(f, q);
        let m = self.mlp.forward(f, qn);
        let m = f.dropout(m);
        f.tape.add(q, m)
    }

    fn self_phase(&self, f: &mut Fwd, q: Var) -> Var {
        let qn = self.ln_self.forward(f, q);
        let attn = self.self_attn.forward(f, qn, qn, qn, None);
        let attn = f.dropout(attn);
        f.tape.add(q, attn)
    }
}

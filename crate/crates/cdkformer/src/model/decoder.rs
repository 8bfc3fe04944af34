//! Dual query-based decoding: mode and regular/tail future queries refined
//! by multistream block stacks, a learned gating router combining the dual
//! futures, scene-query construction, axial refinement, and the heads.

use super::{row_scores_to_probs, DecoderModules, EncodedScene, ModelConfig, ModelInputs, PredictionSet};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{EncoderLayer, Fwd, MultistreamBlock};

pub struct DecoderOutputs {
    /// (K * t_fut) x 2 final trajectories, mode-major.
    pub final_traj: Var,
    /// 1 x K final mode probabilities.
    pub final_probs: Var,
    /// K x (2 * t_fut) auxiliary mode-head trajectories.
    pub mode_trajs: Var,
    /// 1 x K auxiliary mode-head probabilities.
    pub mode_probs: Var,
    /// t_fut x 2 regular-head trajectory.
    pub regular_traj: Var,
    /// t_fut x 2 tail-head trajectory.
    pub tail_traj: Var,
    /// n_agents x (2 * t_fut) neighbor trajectories from the context rows.
    pub group_trajs: Var,
    /// t_fut x d router gate, None when a dual query is ablated away.
    pub gamma: Option<Var>,
    /// Refined queries, exposed for inspection and tests.
    pub q_mode: Var,
    pub q_regular: Var,
    pub q_tail: Var,
    pub q_dual: Var,
    /// Scene query right after the broadcast sum, before refinement.
    pub q_scene: Var,
}

fn run_stack(
    f: &mut Fwd,
    stack: &[MultistreamBlock],
    q0: Var,
    streams: &[Var],
    self_first: bool,
) -> Var {
    let mut q = q0;
    for block in stack {
        q = block.forward(f, q, streams, self_first);
    }
    q
}

/// Turn per-step displacement predictions into positions: cumulative sum via
/// a lower-triangular ones matmul, anchored at a start position.
fn integrate_displacements(f: &mut Fwd, offsets: Var, anchor: [f64; 2]) -> Var {
    let t = f.tape.rows(offsets);
    let mut tri = vec![0.0; t * t];
    for r in 0..t {
        for c in 0..=r {
            tri[r * t + c] = 1.0;
        }
    }
    let tri = f.tape.leaf(t, t, tri);
    let cum = f.tape.matmul(tri, offsets);
    let anchor = f.tape.leaf(1, 2, anchor.to_vec());
    f.tape.add_row_broadcast(cum, anchor)
}

/// Axial self-attention over the time axis (per mode), then the modality
/// axis (per timestep), on a mode-major (K * t_fut) x d scene query.
fn axial_attention(
    f: &mut Fwd,
    q: Var,
    time_layer: &EncoderLayer,
    mode_layer: &EncoderLayer,
    k_modes: usize,
    t_fut: usize,
) -> Var {
    let mut time_rows = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let rows = f.tape.slice_rows(q, k * t_fut, t_fut);
        time_rows.push(time_layer.forward(f, rows, None));
    }
    let q = f.tape.concat_rows_all(&time_rows);

    let mut mode_groups = Vec::with_capacity(t_fut);
    for t in 0..t_fut {
        let idx: Vec<usize> = (0..k_modes).map(|k| k * t_fut + t).collect();
        let group = f.tape.gather_rows(q, &idx);
        mode_groups.push(mode_layer.forward(f, group, None));
    }
    let stacked = f.tape.concat_rows_all(&mode_groups); // t-major
    // Back to mode-major ordering.
    let idx: Vec<usize> = (0..k_modes * t_fut)
        .map(|i| {
            let (k, t) = (i / t_fut, i % t_fut);
            t * k_modes + k
        })
        .collect();
    f.tape.gather_rows(stacked, &idx)
}

pub(crate) fn decode(
    dec: &DecoderModules,
    cfg: &ModelConfig,
    f: &mut Fwd,
    enc: &EncodedScene,
    inputs: &ModelInputs,
) -> DecoderOutputs {
    let (k_modes, t_fut, d) = (cfg.k_modes, cfg.horizon.t_fut, cfg.d);
    let order = cfg.stream_order;
    let self_first = order.self_first();
    let dual_streams = if order.swap_streams() {
        vec![enc.c_ctx, enc.c_dev]
    } else {
        vec![enc.c_dev, enc.c_ctx]
    };

    // Query refinement. The tail path reads only the deviation stream.
    let q_mode = if cfg.ablation.no_mode_query {
        f.tape.leaf(k_modes, d, vec![0.0; k_modes * d])
    } else {
        let q0 = f.param(dec.q_mode);
        run_stack(f, &dec.mode_stack, q0, &dual_streams, self_first)
    };
    let q_regular = {
        let q0 = f.param(dec.q_regular);
        run_stack(f, &dec.regular_stack, q0, &dual_streams, self_first)
    };
    let q_tail = {
        let q0 = f.param(dec.q_tail);
        run_stack(f, &dec.tail_stack, q0, &[enc.c_dev], self_first)
    };

    // Dual combination through the sigmoid router; an ablated side short
    // circuits to the surviving query.
    let (q_dual, gamma) = if cfg.ablation.no_tail_query {
        (q_regular, None)
    } else if cfg.ablation.no_regular_query {
        (q_tail, None)
    } else {
        let cat = f.tape.concat_cols(q_regular, q_tail);
        let logits = dec.router.forward(f, cat);
        let g = f.tape.sigmoid(logits);
        let t_term = f.tape.mul(g, q_tail);
        let ones = f.tape.leaf(t_fut, d, vec![1.0; t_fut * d]);
        let inv = f.tape.sub(ones, g);
        let r_term = f.tape.mul(inv, q_regular);
        (f.tape.add(t_term, r_term), Some(g))
    };

    // Scene query: broadcast sum of mode rows and the dual future sequence.
    let mut parts = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let row = f.tape.slice_rows(q_mode, k, 1);
        let spread = f.tape.broadcast_row(row, t_fut);
        parts.push(f.tape.add(spread, q_dual));
    }
    let q_scene = f.tape.concat_rows_all(&parts);
    let mut q = q_scene;

    // Refinement: axial attention, one multistream block over the dense
    // (K * t_fut) x d feature, axial attention again.
    q = axial_attention(f, q, &dec.time_attn_pre, &dec.mode_attn_pre, k_modes, t_fut);
    q = dec.refine_block.forward(f, q, &dual_streams, self_first);
    q = axial_attention(f, q, &dec.time_attn_post, &dec.mode_attn_post, k_modes, t_fut);

    // Heads. Every trajectory head predicts per-step displacements that are
    // integrated from the owning agent's last observed position.
    let tgt_anchor = inputs.agent_last_pos[inputs.target_idx];
    let final_offsets = dec.traj_head.forward(f, q);
    let mut final_parts = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let rows = f.tape.slice_rows(final_offsets, k * t_fut, t_fut);
        final_parts.push(integrate_displacements(f, rows, tgt_anchor));
    }
    let final_traj = f.tape.concat_rows_all(&final_parts);
    let mut pooled = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let rows = f.tape.slice_rows(q, k * t_fut, t_fut);
        pooled.push(f.tape.mean_rows(rows));
    }
    let pooled = f.tape.concat_rows_all(&pooled);
    let scores = dec.score_head.forward(f, pooled);
    let final_probs = row_scores_to_probs(f, scores);

    let mode_offsets = dec.mode_traj_head.forward(f, q_mode);
    let mut mode_parts = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let row = f.tape.slice_rows(mode_offsets, k, 1);
        let steps = f.tape.reshape(row, t_fut, 2);
        let traj = integrate_displacements(f, steps, tgt_anchor);
        mode_parts.push(f.tape.reshape(traj, 1, 2 * t_fut));
    }
    let mode_trajs = f.tape.concat_rows_all(&mode_parts);
    let mode_scores = dec.mode_score_head.forward(f, q_mode);
    let mode_probs = row_scores_to_probs(f, mode_scores);
    let regular_offsets = dec.regular_head.forward(f, q_regular);
    let regular_traj = integrate_displacements(f, regular_offsets, tgt_anchor);
    let tail_offsets = dec.tail_head.forward(f, q_tail);
    let tail_traj = integrate_displacements(f, tail_offsets, tgt_anchor);
    let ctx_agents = f.tape.slice_rows(enc.c_ctx, 0, inputs.n_agents);
    let group_offsets = dec.group_head.forward(f, ctx_agents);
    let mut group_parts = Vec::with_capacity(inputs.n_agents);
    for n in 0..inputs.n_agents {
        let row = f.tape.slice_rows(group_offsets, n, 1);
        let steps = f.tape.reshape(row, t_fut, 2);
        let traj = integrate_displacements(f, steps, inputs.agent_last_pos[n]);
        group_parts.push(f.tape.reshape(traj, 1, 2 * t_fut));
    }
    let group_trajs = f.tape.concat_rows_all(&group_parts);

    DecoderOutputs {
        final_traj,
        final_probs,
        mode_trajs,
        mode_probs,
        regular_traj,
        tail_traj,
        group_trajs,
        gamma,
        q_mode,
        q_regular,
        q_tail,
        q_dual,
        q_scene,
    }
}

/// Read the final head off the tape as a world-frame prediction set.
pub(crate) fn extract_predictions(
    tape: &Tape,
    out: &DecoderOutputs,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
) -> Result<PredictionSet> {
    let t_fut = cfg.horizon.t_fut;
    let traj = tape.data(out.final_traj);
    let probs = tape.data(out.final_probs).to_vec();
    let mut trajectories = Vec::with_capacity(cfg.k_modes);
    for k in 0..cfg.k_modes {
        let mut tr = Vec::with_capacity(t_fut);
        for t in 0..t_fut {
            let i = (k * t_fut + t) * 2;
            tr.push(inputs.to_world([traj[i], traj[i + 1]]));
        }
        trajectories.push(tr);
    }
    Ok(PredictionSet { trajectories, probs })
}

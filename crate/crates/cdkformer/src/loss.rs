//! Multicomponent training loss: winner-takes-all regression + mode
//! classification for the multimodal heads, single-trajectory regression for
//! the regular and tail future heads (the latter weighted by the smoothed
//! tail score), and the neighbor-trajectory group term.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Ablation, DecoderOutputs, ModelInputs};
use crate::scene::AgentKind;

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l_mode_reg: f64,
    pub l_mode_cls: f64,
    pub l_future_r: f64,
    /// Tail-head regression before the smoothed-score weight.
    pub l_future_t_pre: f64,
    /// After multiplying by the smoothed tail score.
    pub l_future_t: f64,
    pub l_scene_reg: f64,
    pub l_scene_cls: f64,
    pub l_group: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l_mode(&self) -> f64 {
        self.l_mode_reg + self.l_mode_cls
    }

    pub fn l_scene(&self) -> f64 {
        self.l_scene_reg + self.l_scene_cls
    }
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub total: Var,
}

/// Index of the candidate whose final position lands closest to the
/// ground-truth endpoint; ties resolve to the lowest index.
fn fde_winner(endpoints: &[[f64; 2]], gt_end: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in endpoints.iter().enumerate() {
        let d = (e[0] - gt_end[0]).powi(2) + (e[1] - gt_end[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &mut Tape,
    out: &DecoderOutputs,
    inputs: &ModelInputs,
    s_tilde: f64,
    alpha: f64,
    ablation: &Ablation,
    k_modes: usize,
    agent_kinds: &[AgentKind],
) -> Result<LossOutput> {
    let future = inputs
        .future
        .as_ref()
        .ok_or_else(|| Error::validation(format!("scenario '{}': no ground truth for loss", inputs.id)))?;
    let t_fut = inputs.t_fut;
    let gt = tape.leaf(t_fut, 2, future.clone());
    let gt_end = [future[(t_fut - 1) * 2], future[(t_fut - 1) * 2 + 1]];
    let zero = tape.leaf_scalar(0.0);

    // Scene head: winner by final displacement over the K stacked futures.
    let (l_scene_reg, l_scene_cls) = {
        let data = tape.data(out.final_traj);
        let endpoints: Vec<[f64; 2]> = (0..k_modes)
            .map(|k| {
                let i = (k * t_fut + t_fut - 1) * 2;
                [data[i], data[i + 1]]
            })
            .collect();
        let k_star = fde_winner(&endpoints, gt_end);
        let winner = tape.slice_rows(out.final_traj, k_star * t_fut, t_fut);
        let reg = tape.smooth_l1(winner, gt);
        let mut one_hot = vec![0.0; k_modes];
        one_hot[k_star] = 1.0;
        let target = tape.leaf(1, k_modes, one_hot);
        let cls = tape.cross_entropy_probs(out.final_probs, target);
        (reg, cls)
    };

    // Mode head: independent winner on its own trajectories.
    let (l_mode_reg, l_mode_cls) = if ablation.no_mode_query {
        (zero, zero)
    } else {
        let data = tape.data(out.mode_trajs);
        let endpoints: Vec<[f64; 2]> = (0..k_modes)
            .map(|k| {
                let i = k * 2 * t_fut + (t_fut - 1) * 2;
                [data[i], data[i + 1]]
            })
            .collect();
        let k_star = fde_winner(&endpoints, gt_end);
        let row = tape.slice_rows(out.mode_trajs, k_star, 1);
        let winner = tape.reshape(row, t_fut, 2);
        let reg = tape.smooth_l1(winner, gt);
        let mut one_hot = vec![0.0; k_modes];
        one_hot[k_star] = 1.0;
        let target = tape.leaf(1, k_modes, one_hot);
        let cls = tape.cross_entropy_probs(out.mode_probs, target);
        (reg, cls)
    };

    let l_future_r = if ablation.no_regular_query {
        zero
    } else {
        tape.smooth_l1(out.regular_traj, gt)
    };
    let (l_future_t_pre, l_future_t) = if ablation.no_tail_query {
        (zero, zero)
    } else {
        let pre = tape.smooth_l1(out.tail_traj, gt);
        (pre, tape.scale(pre, s_tilde))
    };

    // Group term: neighbors that carry a ground-truth future.
    let mut l_group = zero;
    for (n, kind) in agent_kinds.iter().enumerate() {
        if *kind != AgentKind::Neighbor {
            continue;
        }
        if let Some(fut) = &inputs.agent_futures[n] {
            let row = tape.slice_rows(out.group_trajs, n, 1);
            let pred = tape.reshape(row, t_fut, 2);
            let gt_n = tape.leaf(t_fut, 2, fut.clone());
            let term = tape.smooth_l1(pred, gt_n);
            l_group = tape.add(l_group, term);
        }
    }

    let l_mode = tape.add(l_mode_reg, l_mode_cls);
    let l_scene = tape.add(l_scene_reg, l_scene_cls);
    let weighted_tail = tape.scale(l_future_t, alpha);
    let mut total = tape.add(l_mode, l_future_r);
    total = tape.add(total, weighted_tail);
    total = tape.add(total, l_scene);
    total = tape.add(total, l_group);

    let breakdown = LossBreakdown {
        l_mode_reg: tape.scalar(l_mode_reg),
        l_mode_cls: tape.scalar(l_mode_cls),
        l_future_r: tape.scalar(l_future_r),
        l_future_t_pre: tape.scalar(l_future_t_pre),
        l_future_t: tape.scalar(l_future_t),
        l_scene_reg: tape.scalar(l_scene_reg),
        l_scene_cls: tape.scalar(l_scene_cls),
        l_group: tape.scalar(l_group),
        total: tape.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::runtime(format!(
            "scenario '{}': non-finite loss {}",
            inputs.id, breakdown.total
        )));
    }
    Ok(LossOutput { breakdown, total })
}

//! Scene encoder: per-agent temporal encoding, PointNet-style polyline
//! pooling, spatially embedded context fusion, and deviation-feature fusion.

use super::{EncodedScene, EncoderModules, ModelConfig, ModelInputs};
use crate::autodiff::Var;
use crate::nn::Fwd;

pub(crate) fn encode(
    enc: &EncoderModules,
    cfg: &ModelConfig,
    f: &mut Fwd,
    inputs: &ModelInputs,
) -> EncodedScene {
    let (c_a, x_tgt) = encode_agents(enc, cfg, f, inputs);
    let c_m = encode_map(enc, f, inputs);
    let c_ctx = fuse_scene_context(enc, cfg, f, inputs, c_a, c_m);
    let c_dev = fuse_deviation(enc, f, inputs, x_tgt);
    EncodedScene { c_ctx, c_dev, c_a, x_tgt }
}

/// Fourier embed + MLP per step, then temporal self-attention per agent.
/// Returns every agent's last-step feature stacked (N_a x d) and the
/// target's full sequence (t_obs x d).
fn encode_agents(
    enc: &EncoderModules,
    cfg: &ModelConfig,
    f: &mut Fwd,
    inputs: &ModelInputs,
) -> (Var, Var) {
    let t_obs = inputs.t_obs;
    let mut last_rows = Vec::with_capacity(inputs.n_agents);
    let mut x_tgt = None;
    for (a, feats) in inputs.agent_feats.iter().enumerate() {
        let x = f.tape.leaf(t_obs, 6, feats.clone());
        let emb = f.tape.fourier(x, cfg.fourier_bands);
        let mut seq = enc.motion_embed.forward(f, emb);
        let mask = &inputs.agent_masks[a];
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask.as_slice()) };
        for layer in &enc.temporal {
            seq = layer.forward(f, seq, key_mask);
        }
        last_rows.push(f.tape.slice_rows(seq, t_obs - 1, 1));
        if a == inputs.target_idx {
            x_tgt = Some(seq);
        }
    }
    let c_a = f.tape.concat_rows_all(&last_rows);
    (c_a, x_tgt.expect("target agent present"))
}

/// Two rounds of point-wise MLP, max-pool, and global broadcast-add, then a
/// final max-pool per polyline.
fn encode_map(enc: &EncoderModules, f: &mut Fwd, inputs: &ModelInputs) -> Var {
    let mut rows = Vec::with_capacity(inputs.polyline_feats.len());
    for (l_m, feats) in &inputs.polyline_feats {
        let mut local = f.tape.leaf(*l_m, 4, feats.clone());
        for round in &enc.map_rounds {
            local = round.forward(f, local);
            let global = f.tape.max_pool_rows(local);
            let spread = f.tape.broadcast_row(global, *l_m);
            local = f.tape.add(local, spread);
        }
        rows.push(f.tape.max_pool_rows(local));
    }
    f.tape.concat_rows_all(&rows)
}

/// Concatenate agent and map tokens, add Fourier spatial embeddings of the
/// token centers, and run the fusion encoder stack over all tokens.
fn fuse_scene_context(
    enc: &EncoderModules,
    cfg: &ModelConfig,
    f: &mut Fwd,
    inputs: &ModelInputs,
    c_a: Var,
    c_m: Var,
) -> Var {
    let n_tokens = inputs.n_agents + inputs.polyline_feats.len();
    let mut tokens = f.tape.concat_rows(c_a, c_m);
    let centers = f.tape.leaf(n_tokens, 2, inputs.centers.clone());
    let emb = f.tape.fourier(centers, cfg.fourier_bands);
    let spatial = enc.spatial_embed.forward(f, emb);
    tokens = f.tape.add(tokens, spatial);
    for layer in &enc.fusion {
        tokens = layer.forward(f, tokens, None);
    }
    tokens
}

/// Project individual and group deviation streams to d and add, concatenate
/// with the target motion sequence, fuse with an MLP, and run one encoder
/// layer over time.
fn fuse_deviation(enc: &EncoderModules, f: &mut Fwd, inputs: &ModelInputs, x_tgt: Var) -> Var {
    let t_obs = inputs.t_obs;
    let ind = f.tape.leaf(t_obs, 6, inputs.dev_individual.clone());
    let grp = f.tape.leaf(t_obs, 2, inputs.dev_group.clone());
    let ind_d = enc.dev_individual.forward(f, ind);
    let grp_d = enc.dev_group.forward(f, grp);
    let x_dev = f.tape.add(ind_d, grp_d);
    let cat = f.tape.concat_cols(x_dev, x_tgt);
    let fused = enc.dev_fuser.forward(f, cat);
    enc.dev_encoder.forward(f, fused, None)
}

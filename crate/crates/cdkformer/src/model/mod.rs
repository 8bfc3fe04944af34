//! The forecaster: scene encoder (agent motion, map polylines, scene-context
//! fusion, deviation-feature fusion) and the dual query-based decoder with
//! multistream blocks, a gating router, and the prediction heads.

mod decoder;
mod encoder;

pub use decoder::DecoderOutputs;

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::deviation::DeviationBundle;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Fwd, Mlp, MultistreamBlock, StreamOrder};
use crate::rng::RngStream;
use crate::scene::{HorizonConfig, Scenario};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub no_individual: bool,
    pub no_group: bool,
    pub no_mode_query: bool,
    pub no_regular_query: bool,
    pub no_tail_query: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub k_modes: usize,
    pub n_experts: usize,
    pub fourier_bands: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub stream_order: StreamOrder,
    pub ablation: Ablation,
    pub horizon: HorizonConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            k_modes: 6,
            n_experts: 8,
            fourier_bands: 8,
            d_ff: 128,
            dropout: 0.1,
            stream_order: StreamOrder::DeviationContextSelf,
            ablation: Ablation::default(),
            horizon: HorizonConfig::desk(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(Error::validation(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(1..=3).contains(&self.dec_layers) {
            return Err(Error::validation("decoder stack depth must be 1..=3"));
        }
        if self.k_modes == 0 || self.n_experts == 0 || self.fourier_bands == 0 {
            return Err(Error::validation("k_modes, n_experts, fourier_bands must be >= 1"));
        }
        if self.ablation.no_regular_query && self.ablation.no_tail_query {
            return Err(Error::validation("cannot ablate both future queries"));
        }
        Ok(())
    }
}

pub(crate) struct EncoderModules {
    pub motion_embed: Mlp,
    pub temporal: Vec<EncoderLayer>,
    pub map_rounds: Vec<Mlp>,
    pub spatial_embed: Mlp,
    pub fusion: Vec<EncoderLayer>,
    pub dev_individual: Mlp,
    pub dev_group: Mlp,
    pub dev_fuser: Mlp,
    pub dev_encoder: EncoderLayer,
}

pub(crate) struct DecoderModules {
    pub q_mode: ParamId,
    pub q_regular: ParamId,
    pub q_tail: ParamId,
    pub mode_stack: Vec<MultistreamBlock>,
    pub regular_stack: Vec<MultistreamBlock>,
    pub tail_stack: Vec<MultistreamBlock>,
    pub router: Mlp,
    pub time_attn_pre: EncoderLayer,
    pub mode_attn_pre: EncoderLayer,
    pub refine_block: MultistreamBlock,
    pub time_attn_post: EncoderLayer,
    pub mode_attn_post: EncoderLayer,
    pub traj_head: Mlp,
    pub score_head: Mlp,
    pub mode_traj_head: Mlp,
    pub mode_score_head: Mlp,
    pub regular_head: Mlp,
    pub tail_head: Mlp,
    pub group_head: Mlp,
}

pub struct CdkFormer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) enc: EncoderModules,
    pub(crate) dec: DecoderModules,
}

impl CdkFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).substream(0x1417);
        let mut store = ParamStore::new();
        let (d, h, ff, ne) = (config.d, config.heads, config.d_ff, config.n_experts);
        let t_fut = config.horizon.t_fut;

        let enc = EncoderModules {
            motion_embed: Mlp::new(&mut store, &mut rng, "enc.motion", &[2 * config.fourier_bands * 6, d, d]),
            temporal: (0..config.enc_layers)
                .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("enc.temporal.{i}"), d, h, ff))
                .collect(),
            map_rounds: vec![
                Mlp::new(&mut store, &mut rng, "enc.map.round0", &[4, d, d]),
                Mlp::new(&mut store, &mut rng, "enc.map.round1", &[d, d, d]),
            ],
            spatial_embed: Mlp::new(&mut store, &mut rng, "enc.spatial", &[2 * config.fourier_bands * 2, d, d]),
            fusion: (0..config.enc_layers)
                .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("enc.fusion.{i}"), d, h, ff))
                .collect(),
            dev_individual: Mlp::new(&mut store, &mut rng, "enc.dev.individual", &[6, d, d]),
            dev_group: Mlp::new(&mut store, &mut rng, "enc.dev.group", &[2, d, d]),
            dev_fuser: Mlp::new(&mut store, &mut rng, "enc.dev.fuser", &[2 * d, d, d]),
            dev_encoder: EncoderLayer::new(&mut store, &mut rng, "enc.dev.encoder", d, h, ff),
        };

        let stack = |store: &mut ParamStore, rng: &mut RngStream, name: &str, streams: usize| {
            (0..config.dec_layers)
                .map(|i| MultistreamBlock::new(store, rng, &format!("{name}.{i}"), d, h, streams, ne, ff))
                .collect::<Vec<_>>()
        };
        let dec = DecoderModules {
            q_mode: store.register("dec.q_mode", config.k_modes, d, Init::Normal(0.02), &mut rng),
            q_regular: store.register("dec.q_regular", t_fut, d, Init::Normal(0.02), &mut rng),
            q_tail: store.register("dec.q_tail", t_fut, d, Init::Normal(0.02), &mut rng),
            mode_stack: stack(&mut store, &mut rng, "dec.mode", 2),
            regular_stack: stack(&mut store, &mut rng, "dec.regular", 2),
            tail_stack: stack(&mut store, &mut rng, "dec.tail", 1),
            router: Mlp::new(&mut store, &mut rng, "dec.router", &[2 * d, d, d]),
            time_attn_pre: EncoderLayer::new(&mut store, &mut rng, "dec.refine.time_pre", d, h, ff),
            mode_attn_pre: EncoderLayer::new(&mut store, &mut rng, "dec.refine.mode_pre", d, h, ff),
            refine_block: MultistreamBlock::new(&mut store, &mut rng, "dec.refine.block", d, h, 2, ne, ff),
            time_attn_post: EncoderLayer::new(&mut store, &mut rng, "dec.refine.time_post", d, h, ff),
            mode_attn_post: EncoderLayer::new(&mut store, &mut rng, "dec.refine.mode_post", d, h, ff),
            traj_head: Mlp::new(&mut store, &mut rng, "head.traj", &[d, ff, 2]),
            score_head: Mlp::new(&mut store, &mut rng, "head.score", &[d, d, 1]),
            mode_traj_head: Mlp::new(&mut store, &mut rng, "head.mode_traj", &[d, ff, 2 * t_fut]),
            mode_score_head: Mlp::new(&mut store, &mut rng, "head.mode_score", &[d, d, 1]),
            regular_head: Mlp::new(&mut store, &mut rng, "head.regular", &[d, d, 2]),
            tail_head: Mlp::new(&mut store, &mut rng, "head.tail", &[d, d, 2]),
            group_head: Mlp::new(&mut store, &mut rng, "head.group", &[d, ff, 2 * t_fut]),
        };

        Ok(CdkFormer { config, store, enc, dec })
    }

    pub fn n_params(&self) -> usize {
        self.store.total_len()
    }
}

/// Position-like inputs are scaled to roughly unit range before the Fourier
/// embedding; speeds likewise.
pub const POS_SCALE: f64 = 0.05;
pub const SPEED_SCALE: f64 = 0.1;

/// Plain per-scenario arrays feeding one forward pass, already in the
/// normalized frame and with ablations applied.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub id: String,
    pub n_agents: usize,
    pub target_idx: usize,
    pub t_obs: usize,
    pub t_fut: usize,
    /// Per agent, row-major t_obs x 6: position, displacement, displacement
    /// magnitude, speed.
    pub agent_feats: Vec<Vec<f64>>,
    pub agent_masks: Vec<Vec<bool>>,
    /// Per polyline, row-major l_m x 4: point, displacement.
    pub polyline_feats: Vec<(usize, Vec<f64>)>,
    /// (n_agents + n_polylines) x 2 token centers.
    pub centers: Vec<f64>,
    /// t_obs x 6 individual deviation (zeroed under ablation).
    pub dev_individual: Vec<f64>,
    /// t_obs x 2 group deviation (zeroed under ablation).
    pub dev_group: Vec<f64>,
    /// t_fut x 2 target ground truth, when present.
    pub future: Option<Vec<f64>>,
    /// Per agent ground-truth future, when present.
    pub agent_futures: Vec<Option<Vec<f64>>>,
    /// Per agent last observed position in the normalized frame; trajectory
    /// heads integrate predicted displacements from here.
    pub agent_last_pos: Vec<[f64; 2]>,
    /// Inverse of the normalization transform: rotation angle and origin.
    pub frame_phi: f64,
    pub frame_origin: [f64; 2],
}

impl ModelInputs {
    /// Build from a world-frame scenario: normalize, extract the 6D motion
    /// layout, compute deviation descriptors, apply input ablations.
    pub fn from_scenario(scenario: &Scenario, config: &ModelConfig) -> Result<Self> {
        let h = &config.horizon;
        scenario.validate(h)?;
        let tgt = scenario.target();
        let lv = tgt.last_valid().unwrap();
        let fv = tgt.first_valid().unwrap();
        let travel = ((tgt.positions[lv][0] - tgt.positions[fv][0]).powi(2)
            + (tgt.positions[lv][1] - tgt.positions[fv][1]).powi(2))
        .sqrt();
        let frame_phi = if travel < 1e-9 { 0.0 } else { tgt.headings[lv] };
        let frame_origin = tgt.positions[lv];

        let norm = scenario.normalize_frame();
        let bundle = DeviationBundle::compute(&norm);

        let mut agent_feats = Vec::with_capacity(norm.agents.len());
        let mut agent_masks = Vec::with_capacity(norm.agents.len());
        let mut agent_futures = Vec::with_capacity(norm.agents.len());
        let mut agent_last_pos = Vec::with_capacity(norm.agents.len());
        let mut centers = Vec::new();
        for a in &norm.agents {
            let mut feats = Vec::with_capacity(h.t_obs * 6);
            for t in 0..h.t_obs {
                let d = a.displacements[t];
                let mag = (d[0] * d[0] + d[1] * d[1]).sqrt();
                feats.extend_from_slice(&[
                    a.positions[t][0] * POS_SCALE,
                    a.positions[t][1] * POS_SCALE,
                    d[0],
                    d[1],
                    mag,
                    a.velocities[t] * SPEED_SCALE,
                ]);
            }
            agent_feats.push(feats);
            agent_masks.push(a.mask.clone());
            agent_futures.push(
                a.future.as_ref().map(|f| f.iter().flat_map(|p| [p[0], p[1]]).collect()),
            );
            let last = a.last_valid().unwrap();
            agent_last_pos.push(a.positions[last]);
            centers.extend_from_slice(&[a.positions[last][0] * POS_SCALE, a.positions[last][1] * POS_SCALE]);
        }
        let mut polyline_feats = Vec::with_capacity(norm.polylines.len());
        for p in &norm.polylines {
            let mut feats = Vec::with_capacity(p.points.len() * 4);
            for (q, d) in p.points.iter().zip(&p.displacements) {
                feats.extend_from_slice(&[
                    q[0] * POS_SCALE,
                    q[1] * POS_SCALE,
                    d[0] * POS_SCALE,
                    d[1] * POS_SCALE,
                ]);
            }
            polyline_feats.push((p.points.len(), feats));
            let c = p.centroid();
            centers.extend_from_slice(&[c[0] * POS_SCALE, c[1] * POS_SCALE]);
        }

        let mut dev_individual = Vec::with_capacity(h.t_obs * 6);
        let mut dev_group = Vec::with_capacity(h.t_obs * 2);
        for t in 0..h.t_obs {
            if config.ablation.no_individual {
                dev_individual.extend_from_slice(&[0.0; 6]);
            } else {
                dev_individual.extend_from_slice(&bundle.individual[t]);
            }
            if config.ablation.no_group {
                dev_group.extend_from_slice(&[0.0; 2]);
            } else {
                dev_group.extend_from_slice(&bundle.group[t]);
            }
        }

        Ok(ModelInputs {
            id: norm.id.clone(),
            n_agents: norm.agents.len(),
            target_idx: norm.target_index(),
            t_obs: h.t_obs,
            t_fut: h.t_fut,
            agent_feats,
            agent_masks,
            polyline_feats,
            centers,
            dev_individual,
            dev_group,
            future: norm.future.as_ref().map(|f| f.iter().flat_map(|p| [p[0], p[1]]).collect()),
            agent_futures,
            agent_last_pos,
            frame_phi,
            frame_origin,
        })
    }

    /// Map a normalized-frame point back to the world frame.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.frame_phi.sin_cos();
        [
            c * p[0] - s * p[1] + self.frame_origin[0],
            s * p[0] + c * p[1] + self.frame_origin[1],
        ]
    }
}

/// Scene encodings handed to the decoder.
pub struct EncodedScene {
    /// (n_agents + n_polylines) x d fused scene context.
    pub c_ctx: Var,
    /// t_obs x d deviation feature.
    pub c_dev: Var,
    /// n_agents x d last-step agent motion features.
    pub c_a: Var,
    /// t_obs x d target motion sequence.
    pub x_tgt: Var,
}

/// K candidate futures with mode probabilities, in the frame the model ran in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        if k == 0 || k != self.probs.len() {
            return Err(Error::validation("prediction set: K mismatch between trajectories and probs"));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.probs.iter().any(|p| *p < 0.0) {
            return Err(Error::validation(format!("prediction set: probs sum to {sum}")));
        }
        for tr in &self.trajectories {
            if tr.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::validation("prediction set: non-finite trajectory"));
            }
        }
        Ok(())
    }
}

impl CdkFormer {
    /// Full forward pass. `rng` enables dropout (training); None runs eval.
    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        rng: Option<&mut RngStream>,
    ) -> (EncodedScene, DecoderOutputs) {
        let mut f = match rng {
            Some(r) => Fwd::train(tape, &self.store, self.config.dropout, r),
            None => Fwd::eval(tape, &self.store),
        };
        let enc = encoder::encode(&self.enc, &self.config, &mut f, inputs);
        let out = decoder::decode(&self.dec, &self.config, &mut f, &enc, inputs);
        (enc, out)
    }

    /// Forward pass with a hook that may swap encoded-scene tensors before
    /// decoding (ablated and perturbed-input experiments).
    pub fn forward_perturbed(
        &self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        perturb: impl FnOnce(&mut Tape, &mut EncodedScene),
    ) -> (EncodedScene, DecoderOutputs) {
        let mut enc = {
            let mut f = Fwd::eval(&mut *tape, &self.store);
            encoder::encode(&self.enc, &self.config, &mut f, inputs)
        };
        perturb(tape, &mut enc);
        let mut f = Fwd::eval(tape, &self.store);
        let out = decoder::decode(&self.dec, &self.config, &mut f, &enc, inputs);
        (enc, out)
    }

    /// Eval-mode prediction in the world frame.
    pub fn predict(&self, scenario: &Scenario) -> Result<PredictionSet> {
        let inputs = ModelInputs::from_scenario(scenario, &self.config)?;
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, &inputs, None);
        let set = decoder::extract_predictions(&tape, &out, &self.config, &inputs)?;
        set.validate()?;
        Ok(set)
    }
}

/// Helper for heads that score rows: (rows x 1) -> (1 x rows) probabilities.
pub(crate) fn row_scores_to_probs(f: &mut Fwd, scores_col: Var) -> Var {
    let row = f.tape.transpose(scores_col);
    f.tape.softmax_rows(row, None)
}

//! Training loop: Adam with decoupled weight decay, cosine learning-rate
//! decay over epochs, global-norm gradient clipping, winner-takes-all loss,
//! and per-epoch checkpointing. Batch gradients reduce in a fixed order so a
//! run is reproducible for a given seed and thread count.

use crate::autodiff::{Grads, Tape};
use crate::error::{Error, Result};
use crate::loss::{compute_loss, LossBreakdown};
use crate::model::{CdkFormer, ModelConfig, ModelInputs};
use crate::rng::RngStream;
use crate::scene::{AgentKind, Scenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Tail loss weight.
    pub alpha: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub threads: usize,
    /// Train with all smoothed tail weights forced to 1.
    pub uniform_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            alpha: 0.1,
            seed: 0,
            clip_norm: 5.0,
            threads: 1,
            uniform_weights: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l_mode: f64,
    pub l_future_r: f64,
    pub l_future_t: f64,
    pub l_scene: f64,
    pub l_group: f64,
    pub wall_s: f64,
}

pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(model: &CdkFormer) -> Self {
        let shapes: Vec<usize> = model.store.entries.iter().map(|e| e.data.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    fn step(&mut self, model: &mut CdkFormer, grads: &Grads, lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (e, entry) in model.store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[e], &mut self.v[e]);
            for (j, p) in entry.data.iter_mut().enumerate() {
                let g = grads.buffers[e][j];
                m[j] = B1 * m[j] + (1.0 - B1) * g;
                v[j] = B2 * v[j] + (1.0 - B2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + EPS) + wd * *p);
            }
        }
    }
}

/// One scenario's forward/backward contribution, accumulated into `grads`
/// with weight 1/batch_size.
#[allow(clippy::too_many_arguments)]
fn scenario_step(
    model: &CdkFormer,
    inputs: &ModelInputs,
    kinds: &[AgentKind],
    weight: f64,
    alpha: f64,
    dropout_rng: &mut RngStream,
    grads: &mut Grads,
    inv_batch: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, out) = model.forward(&mut tape, inputs, Some(dropout_rng));
    let loss = compute_loss(
        &mut tape,
        &out,
        inputs,
        weight,
        alpha,
        &model.config.ablation,
        model.config.k_modes,
        kinds,
    )?;
    tape.backward(loss.total, inv_batch);
    tape.export_grads(grads, 1.0);
    Ok(loss.breakdown)
}

/// Train in place; `per_epoch` runs after each epoch (checkpointing, logs).
/// `weights` are the per-scenario smoothed tail scores aligned with `corpus`.
pub fn train(
    model: &mut CdkFormer,
    corpus: &[Scenario],
    weights: &[f64],
    cfg: &TrainConfig,
    mut per_epoch: impl FnMut(usize, &CdkFormer, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if corpus.is_empty() {
        return Err(Error::validation("train: empty corpus"));
    }
    if corpus.len() != weights.len() {
        return Err(Error::validation("train: weights not aligned with corpus"));
    }
    let inputs: Vec<ModelInputs> = corpus
        .iter()
        .map(|s| ModelInputs::from_scenario(s, &model.config))
        .collect::<Result<_>>()?;
    let kinds: Vec<Vec<AgentKind>> =
        corpus.iter().map(|s| s.agents.iter().map(|a| a.kind).collect()).collect();
    let weights: Vec<f64> =
        if cfg.uniform_weights { vec![1.0; corpus.len()] } else { weights.to_vec() };

    let pool = (cfg.threads > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::runtime(format!("thread pool: {e}")))
        })
        .transpose()?;

    let mut adam = AdamState::new(model);
    let shuffle_rng = RngStream::new(cfg.seed).substream(0x5f0f);
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut erng = shuffle_rng.substream(epoch as u64);
        erng.shuffle(&mut order);

        let mut sums = LossBreakdown::default();
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inv_batch = 1.0 / batch.len() as f64;
            let mut grads = model.store.zero_grads();

            let run_chunk = |chunk: &[usize]| -> Result<(Grads, Vec<LossBreakdown>)> {
                let mut g = model.store.zero_grads();
                let mut bds = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut drng = RngStream::new(cfg.seed)
                        .substream(0xd0_0000 + epoch as u64)
                        .substream(i as u64);
                    bds.push(scenario_step(
                        model, &inputs[i], &kinds[i], weights[i], cfg.alpha, &mut drng, &mut g,
                        inv_batch,
                    )?);
                }
                Ok((g, bds))
            };

            let results: Vec<(Grads, Vec<LossBreakdown>)> = match &pool {
                Some(pool) => {
                    let chunk_len = batch.len().div_ceil(cfg.threads);
                    let chunks: Vec<&[usize]> = batch.chunks(chunk_len).collect();
                    pool.install(|| chunks.par_iter().map(|c| run_chunk(c)).collect::<Result<_>>())?
                }
                None => vec![run_chunk(batch)?],
            };
            for (g, bds) in results {
                grads.add_from(&g);
                for b in bds {
                    if !b.total.is_finite() {
                        return Err(Error::runtime(format!(
                            "diverged at epoch {epoch} batch {batch_no}"
                        )));
                    }
                    sums.l_mode_reg += b.l_mode_reg;
                    sums.l_mode_cls += b.l_mode_cls;
                    sums.l_future_r += b.l_future_r;
                    sums.l_future_t += b.l_future_t;
                    sums.l_scene_reg += b.l_scene_reg;
                    sums.l_scene_cls += b.l_scene_cls;
                    sums.l_group += b.l_group;
                    sums.total += b.total;
                }
            }

            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.step(model, &grads, lr, cfg.weight_decay);
        }

        let n = corpus.len() as f64;
        let es = EpochStats {
            epoch,
            lr,
            total: sums.total / n,
            l_mode: (sums.l_mode_reg + sums.l_mode_cls) / n,
            l_future_r: sums.l_future_r / n,
            l_future_t: sums.l_future_t / n,
            l_scene: (sums.l_scene_reg + sums.l_scene_cls) / n,
            l_group: sums.l_group / n,
            wall_s: start.elapsed().as_secs_f64(),
        };
        per_epoch(epoch, model, &es)?;
        stats.push(es);
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "cdk-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamDump {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    config_hash: String,
    model: ModelConfig,
    params: Vec<ParamDump>,
}

pub fn save_checkpoint(path: &Path, model: &CdkFormer, seed: u64, config_hash: &str) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        model: model.config.clone(),
        params: model
            .store
            .entries
            .iter()
            .map(|e| ParamDump { name: e.name.clone(), rows: e.rows, cols: e.cols, data: e.data.clone() })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Rebuild the model from its config and overwrite every parameter by name.
pub fn load_checkpoint(path: &Path) -> Result<(CdkFormer, u64, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open checkpoint '{}': {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::validation(format!("checkpoint format '{}' unsupported", file.format)));
    }
    let mut model = CdkFormer::new(file.model.clone(), file.seed)?;
    if file.params.len() != model.store.entries.len() {
        return Err(Error::validation(format!(
            "checkpoint has {} parameter arrays, model expects {}",
            file.params.len(),
            model.store.entries.len()
        )));
    }
    for (entry, dump) in model.store.entries.iter_mut().zip(file.params) {
        if entry.name != dump.name || entry.rows != dump.rows || entry.cols != dump.cols {
            return Err(Error::validation(format!(
                "checkpoint parameter '{}' ({}x{}) does not match model '{}' ({}x{})",
                dump.name, dump.rows, dump.cols, entry.name, entry.rows, entry.cols
            )));
        }
        entry.data = dump.data;
    }
    Ok((model, file.seed, file.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, ModelConfig};
    use crate::nn::StreamOrder;
    use crate::scene::HorizonConfig;
    use crate::synth::{generate_synthetic, GenConfig};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            k_modes: 3,
            n_experts: 2,
            fourier_bands: 2,
            d_ff: 32,
            dropout: 0.1,
            stream_order: StreamOrder::DeviationContextSelf,
            ablation: Ablation::default(),
            horizon: HorizonConfig { t_obs: 8, t_fut: 10, hz: 10.0 },
        }
    }

    fn tiny_corpus(n: usize, seed: u64) -> Vec<Scenario> {
        let cfg = GenConfig {
            horizon: HorizonConfig { t_obs: 8, t_fut: 10, hz: 10.0 },
            ..Default::default()
        };
        let mut rng = RngStream::new(seed);
        generate_synthetic(n, 0.5, &mut rng, &cfg)
    }

    #[test]
    fn cosine_schedule_decays() {
        let first = cosine_lr(3e-3, 0, 30);
        let last = cosine_lr(3e-3, 29, 30);
        assert_eq!(first, 3e-3);
        assert!(last < first && last > 0.0);
    }

    #[test]
    fn single_step_at_small_lr_decreases_loss() {
        let corpus = tiny_corpus(1, 3);
        let mut model = CdkFormer::new(tiny_model_config(), 5).unwrap();
        let inputs = ModelInputs::from_scenario(&corpus[0], &model.config).unwrap();
        let kinds: Vec<AgentKind> = corpus[0].agents.iter().map(|a| a.kind).collect();

        let eval_loss = |model: &CdkFormer| {
            let mut tape = Tape::new();
            let (_, out) = model.forward(&mut tape, &inputs, None);
            compute_loss(&mut tape, &out, &inputs, 1.0, 0.1, &model.config.ablation, 3, &kinds)
                .unwrap()
                .breakdown
                .total
        };
        let before = eval_loss(&model);

        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-5,
            weight_decay: 0.0,
            threads: 1,
            seed: 5,
            ..Default::default()
        };
        // One epoch over one scenario is exactly one optimizer step; dropout
        // noise is acceptable because the eval pass runs without it.
        train(&mut model, &corpus, &[1.0], &cfg, |_, _, _| Ok(())).unwrap();
        let after = eval_loss(&model);
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn same_seed_same_checkpoint_bitwise() {
        let corpus = tiny_corpus(4, 7);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            seed: 11,
            threads: 1,
            ..Default::default()
        };
        let run = || {
            let mut model = CdkFormer::new(tiny_model_config(), 11).unwrap();
            train(&mut model, &corpus, &[1.0; 4], &cfg, |_, _, _| Ok(())).unwrap();
            model
        };
        let a = run();
        let b = run();
        for (ea, eb) in a.store.entries.iter().zip(&b.store.entries) {
            assert_eq!(ea.data, eb.data, "parameter {} diverged across reruns", ea.name);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = CdkFormer::new(tiny_model_config(), 13).unwrap();
        save_checkpoint(&path, &model, 13, "h").unwrap();
        let (loaded, seed, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 13);
        assert_eq!(hash, "h");
        for (a, b) in model.store.entries.iter().zip(&loaded.store.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupted_params_abort_with_batch_id() {
        let corpus = tiny_corpus(2, 17);
        let mut model = CdkFormer::new(tiny_model_config(), 17).unwrap();
        model.store.entries[0].data[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, batch_size: 2, seed: 17, ..Default::default() };
        let err = train(&mut model, &corpus, &[1.0; 2], &cfg, |_, _, _| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite") || msg.contains("diverged"), "{msg}");
    }

    #[test]
    fn misaligned_weights_rejected() {
        let corpus = tiny_corpus(2, 19);
        let mut model = CdkFormer::new(tiny_model_config(), 19).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&mut model, &corpus, &[1.0], &cfg, |_, _, _| Ok(())).is_err());
    }
}

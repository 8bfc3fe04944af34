//! Per-scenario tail scores: difficulty (constant-velocity Kalman error),
//! spatial rarity (endpoint GMM NLL), temporal rarity (FPCA-score GMM NLL),
//! their combination, and the smoothed training weight.

use crate::error::{Error, Result};
use crate::fpca::{fpca_fit, fpca_scores, FpcaBasis};
use crate::gmm::{fit_gmm, fit_gmm_bic, GmmModel};
use crate::kalman::difficulty_score;
use crate::rng::RngStream;
use crate::scene::{Scenario, Split};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GmmComponents {
    Fixed(usize),
    /// Select by minimizing BIC over 1..=max.
    Bic(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailConfig {
    pub gmm_components: GmmComponents,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub lds_bins: usize,
    pub lds_sigma: f64,
}

impl TailConfig {
    /// Ten components matches the full-scale setting; desk-scale corpora
    /// (< 500 scenarios) default to four.
    pub fn for_corpus(n: usize) -> Self {
        TailConfig {
            gmm_components: GmmComponents::Fixed(if n < 500 { 4 } else { 10 }),
            em_max_iter: 100,
            em_tol: 1e-8,
            lds_bins: 50,
            lds_sigma: 2.0,
        }
    }
}

/// Min-max range captured on the training corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn of(values: &[f64]) -> Self {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MinMax { min, max }
    }

    /// Normalize into [0, 1], clamping out-of-range values; a zero range
    /// maps everything to zero.
    pub fn apply(&self, v: f64) -> f64 {
        if self.max - self.min <= 0.0 {
            0.0
        } else {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }
}

/// Min-max normalize a value vector; constant vectors map to all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let mm = MinMax::of(values);
    values.iter().map(|&v| mm.apply(v)).collect()
}

/// Combined tail score from normalized difficulty and rarity.
pub fn tail_score(s_d: f64, s_r: f64) -> f64 {
    debug_assert!(s_d >= 0.0 && s_r >= 0.0);
    (s_d * s_r).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RarityModels {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub endpoint_gmm: GmmModel,
    pub fpc_gmm: GmmModel,
    pub basis: FpcaBasis,
    pub norm_sd: MinMax,
    pub norm_srs: MinMax,
    pub norm_srt: MinMax,
}

pub const MODELS_FORMAT: &str = "cdk-models";
pub const MODELS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub s_d: f64,
    pub s_rs: f64,
    pub s_rt: f64,
    pub s_r: f64,
    pub s: f64,
    pub s_tilde: f64,
}

/// The target's full normalized-frame trajectory: observed positions then
/// the ground-truth future.
fn full_trajectory(scenario: &Scenario) -> Result<Vec<[f64; 2]>> {
    let future = scenario
        .future
        .as_ref()
        .ok_or_else(|| Error::validation(format!("scenario '{}': no future for scoring", scenario.id)))?;
    let mut tr = scenario.target().positions.clone();
    tr.extend_from_slice(future);
    Ok(tr)
}

/// Fit rarity models on the training split and score every scenario.
/// Returns the models plus aligned score rows.
pub fn fit_and_score(
    corpus: &[Scenario],
    dt: f64,
    cfg: &TailConfig,
    seed: u64,
    config_hash: &str,
) -> Result<(RarityModels, Vec<ScoreRow>)> {
    let train: Vec<&Scenario> = corpus.iter().filter(|s| s.split == Split::Train).collect();
    if train.len() < 2 {
        return Err(Error::validation("scoring: need at least 2 training scenarios"));
    }
    let normalized: Vec<Scenario> = corpus.iter().map(|s| s.normalize_frame()).collect();
    let train_idx: Vec<usize> =
        (0..corpus.len()).filter(|&i| corpus[i].split == Split::Train).collect();

    let train_trajs: Vec<Vec<[f64; 2]>> = train_idx
        .iter()
        .map(|&i| full_trajectory(&normalized[i]))
        .collect::<Result<_>>()?;
    let endpoints: Vec<Vec<f64>> =
        train_trajs.iter().map(|t| vec![t[t.len() - 1][0], t[t.len() - 1][1]]).collect();

    let mut rng = RngStream::new(seed).substream(0x7a11);
    let fit = |points: &[Vec<f64>], rng: &mut RngStream| -> Result<GmmModel> {
        match cfg.gmm_components {
            GmmComponents::Fixed(k) => fit_gmm(points, k, rng, cfg.em_max_iter, cfg.em_tol),
            GmmComponents::Bic(max_k) => fit_gmm_bic(points, max_k, rng, cfg.em_max_iter, cfg.em_tol),
        }
    };
    let endpoint_gmm = fit(&endpoints, &mut rng)?;

    let basis = fpca_fit(&train_trajs)?;
    let fpc_points: Vec<Vec<f64>> =
        train_trajs.iter().map(|t| fpca_scores(&basis, t)).collect::<Result<_>>()?;
    let fpc_gmm = fit(&fpc_points, &mut rng)?;

    // Raw scores on the training split define the normalization ranges.
    let raw_of = |i: usize| -> Result<(f64, f64, f64)> {
        let tr = full_trajectory(&normalized[i])?;
        let end = vec![tr[tr.len() - 1][0], tr[tr.len() - 1][1]];
        let s_d = difficulty_score(&normalized[i], dt)?;
        let s_rs = endpoint_gmm.nll(&end)?;
        let s_rt = fpc_gmm.nll(&fpca_scores(&basis, &tr)?)?;
        Ok((s_d, s_rs, s_rt))
    };
    let mut raw_train = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        raw_train.push(raw_of(i)?);
    }
    let models = RarityModels {
        format: MODELS_FORMAT.to_string(),
        version: MODELS_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        endpoint_gmm,
        fpc_gmm,
        basis,
        norm_sd: MinMax::of(&raw_train.iter().map(|r| r.0).collect::<Vec<_>>()),
        norm_srs: MinMax::of(&raw_train.iter().map(|r| r.1).collect::<Vec<_>>()),
        norm_srt: MinMax::of(&raw_train.iter().map(|r| r.2).collect::<Vec<_>>()),
    };

    let rows = score_corpus(&models, corpus, dt, cfg)?;
    Ok((models, rows))
}

/// Score scenarios against already-fitted models.
pub fn score_corpus(
    models: &RarityModels,
    corpus: &[Scenario],
    dt: f64,
    cfg: &TailConfig,
) -> Result<Vec<ScoreRow>> {
    if corpus.is_empty() {
        return Err(Error::validation("scoring: empty corpus"));
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for s in corpus {
        let n = s.normalize_frame();
        let tr = full_trajectory(&n)?;
        let end = vec![tr[tr.len() - 1][0], tr[tr.len() - 1][1]];
        let s_d = models.norm_sd.apply(difficulty_score(&n, dt)?);
        let s_rs = models.norm_srs.apply(models.endpoint_gmm.nll(&end)?);
        let s_rt = models.norm_srt.apply(models.fpc_gmm.nll(&fpca_scores(&models.basis, &tr)?)?);
        let s_r = (s_rs * s_rt).sqrt();
        let score = tail_score(s_d, s_r);
        rows.push(ScoreRow { id: s.id.clone(), s_d, s_rs, s_rt, s_r, s: score, s_tilde: 0.0 });
    }
    let weights = smooth_scores(
        &rows.iter().map(|r| r.s).collect::<Vec<_>>(),
        cfg.lds_bins,
        cfg.lds_sigma,
    )?;
    for (r, w) in rows.iter_mut().zip(weights) {
        r.s_tilde = w;
    }
    Ok(rows)
}

/// Label-distribution-smoothing weights: histogram the scores, convolve the
/// bin counts with a Gaussian kernel (truncated at 3 sigma), invert the
/// smoothed density at each sample's own bin, and renormalize to mean 1.
pub fn smooth_scores(scores: &[f64], bins: usize, kernel_sigma: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::validation("smooth_scores: empty corpus"));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::validation("smooth_scores: scores must lie in [0, 1]"));
    }
    let bin_of = |s: f64| ((s * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0.0; bins];
    for &s in scores {
        counts[bin_of(s)] += 1.0;
    }
    let radius = (3.0 * kernel_sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * kernel_sigma * kernel_sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let mut smoothed = vec![0.0; bins];
    for b in 0..bins as isize {
        let mut acc = 0.0;
        for (ki, k) in (-radius..=radius).enumerate() {
            let src = b + k;
            if src >= 0 && src < bins as isize {
                acc += kernel[ki] * counts[src as usize];
            }
        }
        smoothed[b as usize] = acc / ksum;
    }
    let mut weights: Vec<f64> = scores.iter().map(|&s| 1.0 / smoothed[bin_of(s)]).collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    for w in &mut weights {
        *w /= mean;
    }
    Ok(weights)
}

pub const SCORES_FORMAT: &str = "cdk-scores";

pub fn save_scores(path: &Path, rows: &[ScoreRow], seed: u64, config_hash: &str) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# format={SCORES_FORMAT} version=1 seed={seed} config={config_hash}")?;
    writeln!(w, "id,S_d,S_rs,S_rt,S_r,S,S_tilde")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.id, r.s_d, r.s_rs, r.s_rt, r.s_r, r.s, r.s_tilde)?;
    }
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open scores '{}': {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("id,") || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::validation(format!("scores line {}: expected 7 columns", i + 1)));
        }
        let num = |j: usize| -> Result<f64> {
            parts[j]
                .parse()
                .map_err(|_| Error::validation(format!("scores line {}: bad number '{}'", i + 1, parts[j])))
        };
        rows.push(ScoreRow {
            id: parts[0].to_string(),
            s_d: num(1)?,
            s_rs: num(2)?,
            s_rt: num(3)?,
            s_r: num(4)?,
            s: num(5)?,
            s_tilde: num(6)?,
        });
    }
    Ok(rows)
}

pub fn save_models(path: &Path, models: &RarityModels) -> Result<()> {
    let json = serde_json::to_string(models)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_models(path: &Path) -> Result<RarityModels> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open models '{}': {e}", path.display())))?;
    let models: RarityModels = serde_json::from_str(&text)?;
    if models.format != MODELS_FORMAT {
        return Err(Error::validation(format!("models format '{}' unsupported", models.format)));
    }
    Ok(models)
}

//! Forecasting metrics (minADE, minFDE, brier-minFDE, miss rate), CVaR tail
//! analysis, and tail-sliced / feature-binned reporting.

use crate::deviation::{DeviationBundle, COHORT_METRICS};
use crate::error::{Error, Result};
use crate::model::PredictionSet;
use crate::scene::Scenario;

pub const MISS_THRESHOLD_M: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub b_min_fde: f64,
    pub miss: bool,
}

/// Brier-style probability penalty convention for b-minFDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrierPenalty {
    /// minFDE + (1/K) * sum_k (p_hat_k - p_k)^2 with p one-hot at the FDE
    /// winner.
    MeanSquared,
    /// The common benchmark variant minFDE + (1 - p_hat_winner)^2, for
    /// cross-checking.
    OneMinusP,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn displacement_metrics(
    pred: &PredictionSet,
    gt: &[[f64; 2]],
    threshold_m: f64,
    penalty: BrierPenalty,
) -> Result<DisplacementMetrics> {
    pred.validate()?;
    let k = pred.trajectories.len();
    let t_fut = gt.len();
    if t_fut == 0 || pred.trajectories.iter().any(|tr| tr.len() != t_fut) {
        return Err(Error::validation("displacement_metrics: horizon mismatch"));
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut fde_winner = 0;
    for (ki, tr) in pred.trajectories.iter().enumerate() {
        let ade = tr.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / t_fut as f64;
        let fde = dist(tr[t_fut - 1], gt[t_fut - 1]);
        min_ade = min_ade.min(ade);
        if fde < min_fde {
            min_fde = fde;
            fde_winner = ki;
        }
    }
    let b_min_fde = match penalty {
        BrierPenalty::MeanSquared => {
            let penalty: f64 = pred
                .probs
                .iter()
                .enumerate()
                .map(|(ki, p)| {
                    let target = if ki == fde_winner { 1.0 } else { 0.0 };
                    (p - target).powi(2)
                })
                .sum::<f64>()
                / k as f64;
            min_fde + penalty
        }
        BrierPenalty::OneMinusP => min_fde + (1.0 - pred.probs[fde_winner]).powi(2),
    };
    Ok(DisplacementMetrics { min_ade, min_fde, b_min_fde, miss: min_fde > threshold_m })
}

/// Conditional value at risk: the mean of the worst (100 - alpha)% of the
/// error distribution, by position in the sorted list (nearest-rank limits:
/// alpha -> 0 gives the mean, alpha at the top gives the max).
pub fn cvar(errors: &[f64], alpha_percent: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::validation("cvar: empty error list"));
    }
    if !(0.0..100.0).contains(&alpha_percent) {
        return Err(Error::validation("cvar: alpha must lie in [0, 100)"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let cut = ((alpha_percent / 100.0) * n as f64).floor() as usize;
    let keep = (n - cut).max(1);
    Ok(sorted[n - keep..].iter().sum::<f64>() / keep as f64)
}

#[derive(Debug, Clone)]
pub struct SliceRow {
    pub slice: String,
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub b_min_fde: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone)]
pub struct FeatureBinRow {
    pub feature: String,
    pub bin: usize,
    pub median_feature: f64,
    pub mean_min_ade: f64,
    pub std_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub slices: Vec<SliceRow>,
    pub feature_bins: Vec<FeatureBinRow>,
    pub cvar_min_fde: Vec<(u32, f64)>,
}

fn aggregate(name: &str, rows: &[DisplacementMetrics]) -> Result<SliceRow> {
    if rows.is_empty() {
        return Err(Error::validation(format!("slice '{name}' has zero scenarios")));
    }
    let n = rows.len() as f64;
    Ok(SliceRow {
        slice: name.to_string(),
        count: rows.len(),
        min_ade: rows.iter().map(|m| m.min_ade).sum::<f64>() / n,
        min_fde: rows.iter().map(|m| m.min_fde).sum::<f64>() / n,
        b_min_fde: rows.iter().map(|m| m.b_min_fde).sum::<f64>() / n,
        miss_rate: rows.iter().filter(|m| m.miss).count() as f64 / n,
    })
}

/// Metrics per slice ("all" plus top tail fractions by score when scores are
/// available), per-feature quantile-binned minADE, and the CVaR table over
/// minFDE.
pub fn sliced_report(
    corpus: &[Scenario],
    predictions: &[PredictionSet],
    scores: Option<&[f64]>,
    tail_fractions: &[f64],
    penalty: BrierPenalty,
) -> Result<MetricsReport> {
    if corpus.len() != predictions.len() {
        return Err(Error::validation("report: predictions not aligned with corpus"));
    }
    if corpus.is_empty() {
        return Err(Error::validation("report: empty corpus"));
    }
    let per: Vec<DisplacementMetrics> = corpus
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            let gt = s.future.as_ref().ok_or_else(|| {
                Error::validation(format!("scenario '{}': no ground truth to evaluate", s.id))
            })?;
            displacement_metrics(p, gt, MISS_THRESHOLD_M, penalty)
        })
        .collect::<Result<_>>()?;

    let mut slices = vec![aggregate("all", &per)?];
    if let Some(scores) = scores {
        if scores.len() != corpus.len() {
            return Err(Error::validation("report: scores not aligned with corpus"));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        for &frac in tail_fractions {
            let k = ((corpus.len() as f64 * frac).round() as usize).max(1);
            let rows: Vec<DisplacementMetrics> = order[..k].iter().map(|&i| per[i]).collect();
            slices.push(aggregate(&format!("top-{}%-tail", (frac * 100.0).round()), &rows)?);
        }
    }

    // Five quantile bins per deviation feature, mean minADE with standard
    // error per bin.
    let summaries: Vec<[f64; 6]> =
        corpus.iter().map(|s| DeviationBundle::compute(s).summary(s)).collect();
    let mut feature_bins = Vec::new();
    let n_bins = 5usize.min(corpus.len());
    for (mi, name) in COHORT_METRICS.iter().enumerate() {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.sort_by(|&a, &b| {
            summaries[a][mi].partial_cmp(&summaries[b][mi]).unwrap().then(a.cmp(&b))
        });
        for b in 0..n_bins {
            let lo = b * corpus.len() / n_bins;
            let hi = (b + 1) * corpus.len() / n_bins;
            let idx = &order[lo..hi];
            if idx.is_empty() {
                continue;
            }
            let feats: Vec<f64> = idx.iter().map(|&i| summaries[i][mi]).collect();
            let ades: Vec<f64> = idx.iter().map(|&i| per[i].min_ade).collect();
            let mean = ades.iter().sum::<f64>() / ades.len() as f64;
            let var = ades.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ades.len() as f64;
            feature_bins.push(FeatureBinRow {
                feature: name.to_string(),
                bin: b,
                median_feature: feats[feats.len() / 2],
                mean_min_ade: mean,
                std_error: (var / ades.len() as f64).sqrt(),
                count: idx.len(),
            });
        }
    }

    let fde_errors: Vec<f64> = per.iter().map(|m| m.min_fde).collect();
    let cvar_min_fde = (90..=99)
        .map(|a| cvar(&fde_errors, a as f64).map(|v| (a, v)))
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricsReport { slices, feature_bins, cvar_min_fde })
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("slice,count,min_ade_6,min_fde_6,b_min_fde_6,mr_6\n");
    for r in &report.slices {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.slice, r.count, r.min_ade, r.min_fde, r.b_min_fde, r.miss_rate
        ));
    }
    out
}

pub fn feature_bins_csv(report: &MetricsReport) -> String {
    let mut out = String::from("feature,bin,median_feature,mean_min_ade,std_error,count\n");
    for r in &report.feature_bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.feature, r.bin, r.median_feature, r.mean_min_ade, r.std_error, r.count
        ));
    }
    out
}

pub fn cvar_csv(report: &MetricsReport) -> String {
    let mut out = String::from("alpha_percent,cvar_min_fde\n");
    for (a, v) in &report.cvar_min_fde {
        out.push_str(&format!("{a},{v}\n"));
    }
    out
}

/// Plain-text table for stdout.
pub fn report_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>7} {:>10} {:>10} {:>12} {:>7}\n",
        "slice", "count", "minADE_6", "minFDE_6", "b-minFDE_6", "MR_6"
    ));
    for r in &report.slices {
        out.push_str(&format!(
            "{:<16} {:>7} {:>10.4} {:>10.4} {:>12.4} {:>7.3}\n",
            r.slice, r.count, r.min_ade, r.min_fde, r.b_min_fde, r.miss_rate
        ));
    }
    out.push_str("\nCVaR(minFDE_6):\n");
    for (a, v) in &report.cvar_min_fde {
        out.push_str(&format!("  alpha {:>2}%: {:.4}\n", a, v));
    }
    out
}

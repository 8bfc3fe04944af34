//! Coordinate-free deviation descriptors: how far the target strays from
//! steady motion (6D, per timestep) and how discordant the surrounding
//! traffic is (2D, per timestep), plus head/tail cohort statistics.

use crate::error::{Error, Result};
use crate::scene::{wrap_angle, AgentKind, Scenario};

/// Circular mean of angles: atan2 of the mean unit vector.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for &a in angles {
        s += a.sin();
        c += a.cos();
    }
    s.atan2(c)
}

/// Population standard deviation of wrapped differences about the circular
/// mean; zero exactly for a constant signal.
pub fn circular_std(angles: &[f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    let mean = circular_mean(angles);
    let var = angles.iter().map(|&a| wrap_angle(a - mean).powi(2)).sum::<f64>() / angles.len() as f64;
    var.sqrt()
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Displacement orientation at each step, carrying the previous orientation
/// across zero-displacement steps and falling back to the stored heading.
fn displacement_orientations(track: &crate::scene::AgentTrack) -> Vec<f64> {
    let n = track.positions.len();
    let mut alphas = vec![0.0; n];
    let mut last: Option<f64> = None;
    for t in 0..n {
        let d = track.displacements[t];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let a = if t > 0 && len > 1e-9 {
            let a = d[1].atan2(d[0]);
            last = Some(a);
            a
        } else {
            last.unwrap_or(track.headings[t])
        };
        alphas[t] = a;
    }
    // A leading zero-displacement run inherits the first real orientation.
    if let Some(first_real) = (1..n).find(|&t| {
        let d = track.displacements[t];
        (d[0] * d[0] + d[1] * d[1]).sqrt() > 1e-9
    }) {
        for a in alphas.iter_mut().take(first_real) {
            *a = {
                let d = track.displacements[first_real];
                d[1].atan2(d[0])
            };
        }
    }
    alphas
}

/// Six-entry individual deviation at step `t`, statistics running over the
/// valid steps 0..=t: [heading change, heading vs first displacement
/// orientation, heading vs current displacement orientation, circular std of
/// heading, speed change, std of speed]. Fewer than 2 valid steps yields the
/// all-zero vector with the degenerate flag set.
pub fn individual_deviation(track: &crate::scene::AgentTrack, t: usize) -> ([f64; 6], bool) {
    assert!(t < track.positions.len(), "step {t} outside observed window");
    let valid: Vec<usize> = (0..=t).filter(|&s| track.mask[s]).collect();
    if valid.len() < 2 {
        return ([0.0; 6], true);
    }
    let alphas = displacement_orientations(track);
    let first = valid[0];
    let theta_t = track.headings[t];
    let theta_0 = track.headings[first];
    let v_t = track.velocities[t];
    let v_0 = track.velocities[first];
    let headings: Vec<f64> = valid.iter().map(|&s| track.headings[s]).collect();
    let speeds: Vec<f64> = valid.iter().map(|&s| track.velocities[s]).collect();
    (
        [
            wrap_angle(theta_t - theta_0),
            wrap_angle(theta_t - alphas[first]),
            wrap_angle(theta_t - alphas[t]),
            circular_std(&headings),
            v_t - v_0,
            std_dev(&speeds),
        ],
        false,
    )
}

/// Two-entry group deviation at step `t`: mean signed speed difference of
/// neighbors minus target, and circular std of neighbor headings about their
/// circular mean. No valid neighbors yields (0, 0) with the degenerate flag.
pub fn group_deviation(scenario: &Scenario, t: usize) -> ([f64; 2], bool) {
    let tgt = scenario.target();
    let mut speeds = Vec::new();
    let mut headings = Vec::new();
    for a in &scenario.agents {
        if a.kind == AgentKind::Neighbor && a.mask[t] {
            speeds.push(a.velocities[t]);
            headings.push(a.headings[t]);
        }
    }
    if speeds.is_empty() {
        return ([0.0; 2], true);
    }
    let dv = speeds.iter().map(|v| v - tgt.velocities[t]).sum::<f64>() / speeds.len() as f64;
    ([dv, circular_std(&headings)], false)
}

/// Per-timestep deviation descriptors for a scenario's target.
#[derive(Debug, Clone)]
pub struct DeviationBundle {
    pub individual: Vec<[f64; 6]>,
    pub group: Vec<[f64; 2]>,
    pub individual_degenerate: Vec<bool>,
    pub group_degenerate: Vec<bool>,
}

impl DeviationBundle {
    pub fn compute(scenario: &Scenario) -> Self {
        let t_obs = scenario.target().positions.len();
        let mut individual = Vec::with_capacity(t_obs);
        let mut group = Vec::with_capacity(t_obs);
        let mut ind_deg = Vec::with_capacity(t_obs);
        let mut grp_deg = Vec::with_capacity(t_obs);
        let tgt = scenario.target();
        for t in 0..t_obs {
            let (ind, d1) = individual_deviation(tgt, t);
            let (grp, d2) = group_deviation(scenario, t);
            individual.push(ind);
            group.push(grp);
            ind_deg.push(d1);
            grp_deg.push(d2);
        }
        DeviationBundle { individual, group, individual_degenerate: ind_deg, group_degenerate: grp_deg }
    }

    /// Whole-window summary in report convention: [dV_ind, dH_ind (deg),
    /// sigma(V_ind), sigma(H_ind) (deg), dV_grp, sigma(H_grp) (deg)], taken
    /// at the target's last valid step.
    pub fn summary(&self, scenario: &Scenario) -> [f64; 6] {
        let last = scenario.target().last_valid().unwrap_or(self.individual.len() - 1);
        let ind = self.individual[last];
        let grp = self.group[last];
        [
            ind[4],
            ind[0].to_degrees(),
            ind[5],
            ind[3].to_degrees(),
            grp[0],
            grp[1].to_degrees(),
        ]
    }
}

pub const COHORT_METRICS: [&str; 6] =
    ["dV_ind", "dH_ind", "sigma_V_ind", "sigma_H_ind", "dV_grp", "sigma_H_grp"];

#[derive(Debug, Clone)]
pub struct CohortRow {
    pub metric: String,
    pub head_mean: f64,
    pub head_std: f64,
    pub tail_mean: f64,
    pub tail_std: f64,
}

/// Mean and std of each deviation summary metric over the bottom-quantile
/// (head) and top-quantile (tail) cohorts by tail score. Angles reported in
/// degrees.
pub fn cohort_stats(corpus: &[Scenario], scores: &[f64], quantile: f64) -> Result<Vec<CohortRow>> {
    if corpus.len() != scores.len() {
        return Err(Error::validation("cohort_stats: scores not aligned with corpus"));
    }
    let k = (corpus.len() as f64 * quantile).round() as usize;
    if k == 0 || k > corpus.len() {
        return Err(Error::validation(format!(
            "cohort_stats: quantile {quantile} over {} scenarios gives an empty cohort",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let head_idx = &order[..k];
    let tail_idx = &order[order.len() - k..];

    let summaries: Vec<[f64; 6]> = corpus
        .iter()
        .map(|s| DeviationBundle::compute(s).summary(s))
        .collect();

    let stats = |idx: &[usize], m: usize| -> (f64, f64) {
        let vals: Vec<f64> = idx.iter().map(|&i| summaries[i][m]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (mean, std_dev(&vals))
    };

    Ok(COHORT_METRICS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let (hm, hs) = stats(head_idx, m);
            let (tm, ts) = stats(tail_idx, m);
            CohortRow { metric: name.to_string(), head_mean: hm, head_std: hs, tail_mean: tm, tail_std: ts }
        })
        .collect())
}

pub fn cohort_csv(rows: &[CohortRow]) -> String {
    let mut out = String::from("metric,head_mean,head_std,tail_mean,tail_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.metric, r.head_mean, r.head_std, r.tail_mean, r.tail_std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::scene::{AgentTrack, MapPolyline, Split};
    use crate::synth::{generate_synthetic, GenConfig};

    fn track_from_positions(positions: Vec<[f64; 2]>, dt: f64, kind: AgentKind) -> AgentTrack {
        let n = positions.len();
        let mut headings = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        for t in 0..n {
            let (dx, dy) = if t == 0 {
                (positions[1][0] - positions[0][0], positions[1][1] - positions[0][1])
            } else {
                (positions[t][0] - positions[t - 1][0], positions[t][1] - positions[t - 1][1])
            };
            headings.push(dy.atan2(dx));
            velocities.push((dx * dx + dy * dy).sqrt() / dt);
        }
        let mut track = AgentTrack {
            positions,
            headings,
            velocities,
            mask: vec![true; n],
            kind,
            future: None,
            displacements: Vec::new(),
        };
        track.derive_displacements();
        track
    }

    #[test]
    fn constant_velocity_track_is_all_zero() {
        let positions: Vec<[f64; 2]> = (0..20).map(|t| [t as f64 * 0.8, 3.0]).collect();
        let track = track_from_positions(positions, 0.1, AgentKind::Target);
        for t in 1..20 {
            let (d, degenerate) = individual_deviation(&track, t);
            assert!(!degenerate);
            for (i, v) in d.iter().enumerate() {
                assert!(v.abs() < 1e-12, "entry {i} at t {t}: {v}");
            }
        }
    }

    #[test]
    fn ninety_degree_turn_constant_speed() {
        // Quarter-circle arc at constant speed: heading goes 0 -> pi/2.
        let n = 21;
        let r = 10.0;
        let positions: Vec<[f64; 2]> = (0..n)
            .map(|t| {
                let a = std::f64::consts::FRAC_PI_2 * t as f64 / (n - 1) as f64;
                [r * a.sin(), r * (1.0 - a.cos())]
            })
            .collect();
        let track = track_from_positions(positions, 0.1, AgentKind::Target);
        let (d, _) = individual_deviation(&track, n - 1);
        // Headings derived from chords lag the arc tangent by half a step.
        let expected = std::f64::consts::FRAC_PI_2 * (n as f64 - 2.0) / (n as f64 - 1.0);
        assert!((d[0] - expected).abs() < 1e-9, "heading change {}", d[0]);
        assert!(d[4].abs() < 1e-9, "speed change {}", d[4]);
        assert!(d[5].abs() < 1e-9, "speed std {}", d[5]);
    }

    #[test]
    fn matches_brute_force_recomputation_on_curved_track() {
        let mut rng = RngStream::new(21);
        let dt = 0.1;
        let n = 20;
        let mut pos = [0.0, 0.0];
        let mut phi: f64 = 0.4;
        let mut v = 8.0;
        let mut positions = vec![pos];
        for _ in 1..n {
            phi += rng.range(-0.15, 0.15);
            v = (v + rng.range(-0.5, 0.5)).max(0.5);
            pos = [pos[0] + phi.cos() * v * dt, pos[1] + phi.sin() * v * dt];
            positions.push(pos);
        }
        let track = track_from_positions(positions.clone(), dt, AgentKind::Target);
        for t in [5, 12, n - 1] {
            let (d, _) = individual_deviation(&track, t);
            // Independent recomputation straight from raw positions.
            let angle = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
            let heading = |s: usize| {
                if s == 0 {
                    angle(positions[0], positions[1])
                } else {
                    angle(positions[s - 1], positions[s])
                }
            };
            let speed = |s: usize| {
                let (a, b) = if s == 0 { (0, 1) } else { (s - 1, s) };
                let dx = positions[b][0] - positions[a][0];
                let dy = positions[b][1] - positions[a][1];
                (dx * dx + dy * dy).sqrt() / dt
            };
            let alpha = |s: usize| if s == 0 { angle(positions[0], positions[1]) } else { heading(s) };
            let hs: Vec<f64> = (0..=t).map(heading).collect();
            let vs: Vec<f64> = (0..=t).map(speed).collect();
            let expect = [
                wrap_angle(heading(t) - heading(0)),
                wrap_angle(heading(t) - alpha(0)),
                wrap_angle(heading(t) - alpha(t)),
                circular_std(&hs),
                speed(t) - speed(0),
                std_dev(&vs),
            ];
            for i in 0..6 {
                assert!((d[i] - expect[i]).abs() < 1e-9, "t {t} entry {i}: {} vs {}", d[i], expect[i]);
            }
        }
    }

    #[test]
    fn short_window_is_degenerate() {
        let positions: Vec<[f64; 2]> = (0..10).map(|t| [t as f64, 0.0]).collect();
        let mut track = track_from_positions(positions, 0.1, AgentKind::Target);
        for t in 1..10 {
            track.mask[t] = false;
        }
        let (d, degenerate) = individual_deviation(&track, 5);
        assert!(degenerate);
        assert_eq!(d, [0.0; 6]);
    }

    fn tiny_scene(neighbor_speeds: &[f64], neighbor_headings: &[f64], tgt_speed: f64) -> Scenario {
        let n = 6;
        let dt = 0.1;
        let tgt_pos: Vec<[f64; 2]> = (0..n).map(|t| [t as f64 * tgt_speed * dt, 0.0]).collect();
        let mut agents = vec![track_from_positions(tgt_pos, dt, AgentKind::Target)];
        for (s, h) in neighbor_speeds.iter().zip(neighbor_headings) {
            let pos: Vec<[f64; 2]> =
                (0..n).map(|t| [3.0 + h.cos() * s * dt * t as f64, 4.0 + h.sin() * s * dt * t as f64]).collect();
            let mut track = track_from_positions(pos, dt, AgentKind::Neighbor);
            // Use the intended headings/speeds exactly.
            track.headings = vec![*h; n];
            track.velocities = vec![*s; n];
            agents.push(track);
        }
        Scenario {
            id: "tiny".into(),
            split: Split::Test,
            agents,
            polylines: vec![MapPolyline::new(vec![[0.0, 0.0], [10.0, 0.0]])],
            future: None,
        }
    }

    #[test]
    fn group_zero_when_uniform() {
        let s = tiny_scene(&[8.0, 8.0], &[0.3, 0.3], 8.0);
        let (g, degenerate) = group_deviation(&s, 5);
        assert!(!degenerate);
        assert!(g[0].abs() < 1e-12);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn group_symmetric_speed_differences_cancel() {
        let s = tiny_scene(&[10.0, 6.0], &[0.0, 0.0], 8.0);
        let (g, _) = group_deviation(&s, 3);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn group_circular_std_matches_brute_force() {
        let headings = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI];
        let s = tiny_scene(&[8.0, 8.0, 8.0], &headings, 8.0);
        let (g, _) = group_deviation(&s, 2);
        // Brute force: mean unit vector then std of wrapped deviations.
        let sy: f64 = headings.iter().map(|h| h.sin()).sum();
        let cx: f64 = headings.iter().map(|h| h.cos()).sum();
        let mean = sy.atan2(cx);
        let var: f64 =
            headings.iter().map(|h| wrap_angle(h - mean).powi(2)).sum::<f64>() / headings.len() as f64;
        assert!((g[1] - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn no_neighbors_is_degenerate() {
        let s = tiny_scene(&[], &[], 8.0);
        let (g, degenerate) = group_deviation(&s, 0);
        assert!(degenerate);
        assert_eq!(g, [0.0; 2]);
    }

    #[test]
    fn rigid_invariance_of_bundle() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(31);
        let corpus = generate_synthetic(6, 0.5, &mut rng, &cfg);
        for s in &corpus {
            let base = DeviationBundle::compute(s);
            for k in 0..4 {
                let phi = rng.range(0.0, std::f64::consts::TAU);
                let (sn, cs) = phi.sin_cos();
                let tx = rng.range(-200.0, 200.0);
                let ty = rng.range(-200.0, 200.0);
                let mut moved = s.clone();
                for a in &mut moved.agents {
                    for p in &mut a.positions {
                        *p = [cs * p[0] - sn * p[1] + tx, sn * p[0] + cs * p[1] + ty];
                    }
                    for h in &mut a.headings {
                        *h = wrap_angle(*h + phi);
                    }
                    a.derive_displacements();
                }
                let other = DeviationBundle::compute(&moved);
                for t in 0..base.individual.len() {
                    for i in 0..6 {
                        let (a, b) = (base.individual[t][i], other.individual[t][i]);
                        let diff = if i < 4 { wrap_angle(a - b).abs() } else { (a - b).abs() };
                        assert!(diff < 1e-6, "transform {k} step {t} entry {i}: {a} vs {b}");
                    }
                    for i in 0..2 {
                        assert!((base.group[t][i] - other.group[t][i]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn cohort_sizes_and_ordering() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(41);
        let corpus = generate_synthetic(100, 0.5, &mut rng, &cfg);
        // Fake scores: tails high, heads low.
        let scores: Vec<f64> =
            corpus.iter().map(|s| if s.is_tail_labeled() { 0.9 } else { 0.1 }).collect();
        let rows = cohort_stats(&corpus, &scores, 0.1).unwrap();
        assert_eq!(rows.len(), 6);
        // Hard-brake and stop-go tails make speed std clearly larger.
        let sv = rows.iter().find(|r| r.metric == "sigma_V_ind").unwrap();
        assert!(
            sv.tail_mean > sv.head_mean,
            "tail sigma_V {} <= head {}",
            sv.tail_mean,
            sv.head_mean
        );
        assert!(cohort_stats(&corpus, &scores, 0.001).is_err());
    }

    #[test]
    fn identical_scenarios_give_equal_cohorts() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(51);
        let one = generate_synthetic(1, 0.0, &mut rng, &cfg).remove(0);
        let corpus: Vec<Scenario> = (0..10).map(|_| one.clone()).collect();
        let scores = vec![0.5; 10];
        let rows = cohort_stats(&corpus, &scores, 0.2).unwrap();
        for r in rows {
            assert!((r.head_mean - r.tail_mean).abs() < 1e-12);
            assert!((r.head_std - r.tail_std).abs() < 1e-12);
        }
    }

    #[test]
    fn head_scenarios_below_thresholds() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(61);
        let corpus = generate_synthetic(10, 0.0, &mut rng, &cfg);
        for s in &corpus {
            let tgt = s.target();
            let last = tgt.last_valid().unwrap();
            let (d, _) = individual_deviation(tgt, last);
            for i in 0..6 {
                assert!(
                    d[i].abs() < cfg.head_thresholds[i],
                    "{}: entry {i} = {} >= {}",
                    s.id,
                    d[i],
                    cfg.head_thresholds[i]
                );
            }
        }
    }
}

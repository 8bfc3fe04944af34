//! Synthetic scenario generator with a controllable head/tail mixture.
//!
//! Head scenarios are constant-velocity lane following with small observation
//! noise; tail scenarios draw one of four maneuver kinds (hard brake, turn of
//! at least 45 degrees, lane change, stop-and-go) and get more discordant
//! neighbor traffic.

use crate::rng::RngStream;
use crate::scene::{
    wrap_angle, AgentKind, AgentTrack, HorizonConfig, MapPolyline, Scenario, Split,
};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub horizon: HorizonConfig,
    pub min_neighbors: usize,
    pub max_neighbors: usize,
    pub polyline_points: usize,
    pub pos_noise: f64,
    pub speed_range: (f64, f64),
    /// Upper bounds on the six individual deviation entries that head
    /// scenarios must stay below (radians for angle entries, m/s for speeds).
    pub head_thresholds: [f64; 6],
    pub split: Split,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            horizon: HorizonConfig::desk(),
            min_neighbors: 2,
            max_neighbors: 3,
            polyline_points: 10,
            pos_noise: 0.01,
            speed_range: (6.0, 14.0),
            head_thresholds: [0.12, 0.12, 0.12, 0.05, 0.6, 0.3],
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TailKind {
    Brake,
    Turn,
    LaneChange,
    StopGo,
}

impl TailKind {
    fn name(&self) -> &'static str {
        match self {
            TailKind::Brake => "brake",
            TailKind::Turn => "turn",
            TailKind::LaneChange => "lanechange",
            TailKind::StopGo => "stopgo",
        }
    }
}

pub fn generate_synthetic(
    n: usize,
    tail_fraction: f64,
    rng: &mut RngStream,
    cfg: &GenConfig,
) -> Vec<Scenario> {
    assert!(n >= 1, "need at least one scenario");
    assert!((0.0..=1.0).contains(&tail_fraction));
    let n_tail = (n as f64 * tail_fraction).round() as usize;
    let mut is_tail: Vec<bool> = (0..n).map(|i| i < n_tail).collect();
    rng.shuffle(&mut is_tail);

    (0..n)
        .map(|i| {
            let mut sub = rng.substream(i as u64);
            generate_one(i, is_tail[i], &mut sub, cfg)
        })
        .collect()
}

fn generate_one(index: usize, tail: bool, rng: &mut RngStream, cfg: &GenConfig) -> Scenario {
    let h = &cfg.horizon;
    let dt = h.dt();
    let total = h.t_obs + h.t_fut;
    let phi0 = rng.range(0.0, std::f64::consts::TAU);
    let speed = rng.range(cfg.speed_range.0, cfg.speed_range.1);
    let origin = [rng.range(-100.0, 100.0), rng.range(-100.0, 100.0)];

    let kind = if tail {
        match rng.below(4) {
            0 => Some(TailKind::Brake),
            1 => Some(TailKind::Turn),
            2 => Some(TailKind::LaneChange),
            _ => Some(TailKind::StopGo),
        }
    } else {
        None
    };

    let clean = simulate_target(kind, origin, phi0, speed, total, h.t_obs, dt, rng);
    let target = build_track(&clean, h, dt, cfg.pos_noise, AgentKind::Target, rng);

    let n_nb = cfg.min_neighbors + rng.below(cfg.max_neighbors - cfg.min_neighbors + 1);
    let n_nb = n_nb.min(15); // keep N_a <= 16
    let mut agents = vec![target];
    let mut offsets = vec![-7.0, -3.5, 3.5, 7.0];
    rng.shuffle(&mut offsets);
    for j in 0..n_nb {
        let lateral = offsets[j % offsets.len()];
        let longitudinal = rng.range(-15.0, 15.0);
        let (nb_phi, nb_speed) = if tail {
            let crossing = rng.uniform() < 0.5;
            let nb_phi = if crossing {
                phi0 + std::f64::consts::FRAC_PI_2 * if rng.uniform() < 0.5 { 1.0 } else { -1.0 }
                    + rng.range(-0.1, 0.1)
            } else {
                phi0 + rng.range(-0.5, 0.5)
            };
            (nb_phi, (speed + rng.range(-6.0, 6.0)).max(0.5))
        } else {
            (phi0 + rng.range(-0.03, 0.03), speed + rng.range(-1.0, 1.0))
        };
        let perp = [-phi0.sin(), phi0.cos()];
        let start = [
            origin[0] + perp[0] * lateral + phi0.cos() * longitudinal,
            origin[1] + perp[1] * lateral + phi0.sin() * longitudinal,
        ];
        let path: Vec<[f64; 2]> = (0..total)
            .map(|t| {
                [
                    start[0] + nb_phi.cos() * nb_speed * dt * t as f64,
                    start[1] + nb_phi.sin() * nb_speed * dt * t as f64,
                ]
            })
            .collect();
        agents.push(build_track(&path, h, dt, cfg.pos_noise, AgentKind::Neighbor, rng));
    }

    let polylines = build_polylines(&clean, phi0, tail, cfg, h);
    let future = agents[0].future.clone();

    let id = match kind {
        Some(k) => format!("tail-{}-{index:06}", k.name()),
        None => format!("head-{index:06}"),
    };
    Scenario { id, split: cfg.split, agents, polylines, future }
}

/// Clean target path over the full obs+future span.
#[allow(clippy::too_many_arguments)]
fn simulate_target(
    kind: Option<TailKind>,
    origin: [f64; 2],
    phi0: f64,
    speed: f64,
    total: usize,
    t_obs: usize,
    dt: f64,
    rng: &mut RngStream,
) -> Vec<[f64; 2]> {
    let frac = |lo: f64, hi: f64, rng: &mut RngStream| (t_obs as f64 * rng.range(lo, hi)) as usize;
    match kind {
        None => {
            // Constant velocity lane following.
            (0..total)
                .map(|t| {
                    [
                        origin[0] + phi0.cos() * speed * dt * t as f64,
                        origin[1] + phi0.sin() * speed * dt * t as f64,
                    ]
                })
                .collect()
        }
        Some(TailKind::Brake) => {
            let t_b = frac(0.35, 0.9, rng);
            let decel = rng.range(3.5, 6.0);
            integrate(origin, phi0, speed, total, dt, |t, v, _| {
                let v = if t >= t_b { (v - decel * dt).max(0.0) } else { v };
                (v, 0.0)
            })
        }
        Some(TailKind::Turn) => {
            let t_s = frac(0.2, 0.5, rng);
            let n_turn = frac(0.5, 0.8, rng).max(6);
            let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let angle = sign * rng.range(55.0, 100.0).to_radians();
            let omega = angle / (n_turn as f64 * dt);
            integrate(origin, phi0, speed, total, dt, |t, v, _| {
                let w = if t >= t_s && t < t_s + n_turn { omega } else { 0.0 };
                (v, w)
            })
        }
        Some(TailKind::LaneChange) => {
            let t_s = frac(0.3, 0.6, rng);
            let n_lc = frac(0.4, 0.7, rng).max(6);
            let shift = 3.5 * if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let perp = [-phi0.sin(), phi0.cos()];
            (0..total)
                .map(|t| {
                    let along = speed * dt * t as f64;
                    let tau = ((t as f64 - t_s as f64) / n_lc as f64).clamp(0.0, 1.0);
                    let s = tau * tau * (3.0 - 2.0 * tau);
                    [
                        origin[0] + phi0.cos() * along + perp[0] * shift * s,
                        origin[1] + phi0.sin() * along + perp[1] * shift * s,
                    ]
                })
                .collect()
        }
        Some(TailKind::StopGo) => {
            let t_s = frac(0.3, 0.55, rng);
            let decel = rng.range(3.0, 5.0);
            let accel = rng.range(2.0, 4.0);
            let hold = frac(0.25, 0.5, rng).max(3);
            let mut stopped_at: Option<usize> = None;
            integrate(origin, phi0, speed, total, dt, move |t, v, _| {
                let v = if t >= t_s && stopped_at.is_none() {
                    let nv = (v - decel * dt).max(0.0);
                    if nv == 0.0 {
                        stopped_at = Some(t);
                    }
                    nv
                } else if let Some(s0) = stopped_at {
                    if t < s0 + hold {
                        0.0
                    } else {
                        (v + accel * dt).min(speed)
                    }
                } else {
                    v
                };
                (v, 0.0)
            })
        }
    }
}

/// Step integrator: the closure maps (step, speed, heading) to the next
/// (speed, heading rate).
fn integrate(
    origin: [f64; 2],
    phi0: f64,
    speed: f64,
    total: usize,
    dt: f64,
    mut step: impl FnMut(usize, f64, f64) -> (f64, f64),
) -> Vec<[f64; 2]> {
    let mut pos = origin;
    let mut v = speed;
    let mut phi = phi0;
    let mut out = Vec::with_capacity(total);
    out.push(pos);
    for t in 1..total {
        let (nv, w) = step(t, v, phi);
        v = nv;
        phi += w * dt;
        pos = [pos[0] + phi.cos() * v * dt, pos[1] + phi.sin() * v * dt];
        out.push(pos);
    }
    out
}

/// Split a clean path into an observed track (noisy positions, clean
/// headings/speeds derived from the path) plus the clean future.
fn build_track(
    clean: &[[f64; 2]],
    h: &HorizonConfig,
    dt: f64,
    noise: f64,
    kind: AgentKind,
    rng: &mut RngStream,
) -> AgentTrack {
    let mut headings = Vec::with_capacity(h.t_obs);
    let mut velocities = Vec::with_capacity(h.t_obs);
    let mut prev_heading = 0.0f64;
    let mut have_heading = false;
    for t in 0..h.t_obs {
        let (dx, dy) = if t == 0 {
            (clean[1][0] - clean[0][0], clean[1][1] - clean[0][1])
        } else {
            (clean[t][0] - clean[t - 1][0], clean[t][1] - clean[t - 1][1])
        };
        let step_len = (dx * dx + dy * dy).sqrt();
        let heading = if step_len > 1e-9 {
            prev_heading = dy.atan2(dx);
            have_heading = true;
            prev_heading
        } else if have_heading {
            prev_heading
        } else {
            0.0
        };
        headings.push(wrap_angle(heading));
        velocities.push(step_len / dt);
    }
    let positions: Vec<[f64; 2]> = clean[..h.t_obs]
        .iter()
        .map(|p| [p[0] + rng.normal() * noise, p[1] + rng.normal() * noise])
        .collect();
    let future: Vec<[f64; 2]> = clean[h.t_obs..h.t_obs + h.t_fut].to_vec();
    let mut track = AgentTrack {
        positions,
        headings,
        velocities,
        mask: vec![true; h.t_obs],
        kind,
        future: Some(future),
        displacements: Vec::new(),
    };
    track.derive_displacements();
    track
}

fn build_polylines(
    clean: &[[f64; 2]],
    phi0: f64,
    tail: bool,
    cfg: &GenConfig,
    h: &HorizonConfig,
) -> Vec<MapPolyline> {
    let l_m = cfg.polyline_points;
    let total = clean.len();
    // Route centerline: the clean path resampled to l_m points, extended a
    // little behind the start.
    let back = [
        clean[0][0] - phi0.cos() * 10.0,
        clean[0][1] - phi0.sin() * 10.0,
    ];
    let mut route = Vec::with_capacity(l_m);
    route.push(back);
    for i in 1..l_m {
        let t = (i - 1) * (total - 1) / (l_m - 2).max(1);
        route.push(clean[t.min(total - 1)]);
    }
    let offset_route = |sign: f64| -> Vec<[f64; 2]> {
        (0..route.len())
            .map(|i| {
                let (a, b) = if i + 1 < route.len() { (i, i + 1) } else { (i - 1, i) };
                let (dx, dy) = (route[b][0] - route[a][0], route[b][1] - route[a][1]);
                let len = (dx * dx + dy * dy).sqrt().max(1e-9);
                [route[i][0] - dy / len * 3.5 * sign, route[i][1] + dx / len * 3.5 * sign]
            })
            .collect()
    };
    let mut polylines = vec![
        MapPolyline::new(route.clone()),
        MapPolyline::new(offset_route(1.0)),
        MapPolyline::new(offset_route(-1.0)),
    ];
    if tail {
        // A crossing lane through the end of the observation window.
        let c = clean[h.t_obs.min(total - 1)];
        let cross_dir = phi0 + std::f64::consts::FRAC_PI_2;
        let span = 40.0;
        let cross: Vec<[f64; 2]> = (0..l_m)
            .map(|i| {
                let s = -span / 2.0 + span * i as f64 / (l_m - 1) as f64;
                [c[0] + cross_dir.cos() * s, c[1] + cross_dir.sin() * s]
            })
            .collect();
        polylines.push(MapPolyline::new(cross));
    }
    polylines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_tail_count_and_determinism() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(7);
        let corpus = generate_synthetic(100, 0.3, &mut rng, &cfg);
        assert_eq!(corpus.len(), 100);
        assert_eq!(corpus.iter().filter(|s| s.is_tail_labeled()).count(), 30);

        let mut rng2 = RngStream::new(7);
        let corpus2 = generate_synthetic(100, 0.3, &mut rng2, &cfg);
        for (a, b) in corpus.iter().zip(&corpus2) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.agents[0].positions, b.agents[0].positions);
        }
    }

    #[test]
    fn generated_scenarios_validate() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(3);
        for s in generate_synthetic(40, 0.5, &mut rng, &cfg) {
            s.validate(&cfg.horizon).unwrap();
        }
    }

    #[test]
    fn displacement_consistency_holds() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(4);
        for s in generate_synthetic(10, 0.5, &mut rng, &cfg) {
            for a in &s.agents {
                for t in 1..a.positions.len() {
                    assert_eq!(a.displacements[t][0], a.positions[t][0] - a.positions[t - 1][0]);
                    assert_eq!(a.displacements[t][1], a.positions[t][1] - a.positions[t - 1][1]);
                }
            }
        }
    }

    #[test]
    fn turn_tails_change_heading_at_least_45_degrees() {
        let cfg = GenConfig::default();
        let mut rng = RngStream::new(9);
        let corpus = generate_synthetic(200, 0.5, &mut rng, &cfg);
        let mut seen = 0;
        for s in corpus.iter().filter(|s| s.id.starts_with("tail-turn")) {
            seen += 1;
            let tgt = s.target();
            let h_first = tgt.headings[0];
            // Heading at the end of the full trajectory, from the future path.
            let fut = tgt.future.as_ref().unwrap();
            let last = fut[fut.len() - 1];
            let prev = fut[fut.len() - 2];
            let h_last = (last[1] - prev[1]).atan2(last[0] - prev[0]);
            let change = wrap_angle(h_last - h_first).abs();
            assert!(
                change >= 45.0f64.to_radians() - 1e-6,
                "{}: heading change {:.1} deg",
                s.id,
                change.to_degrees()
            );
        }
        assert!(seen > 5, "expected some turn tails, saw {seen}");
    }

    #[test]
    fn av2_horizon_supported() {
        let cfg = GenConfig { horizon: HorizonConfig::av2(), ..Default::default() };
        let mut rng = RngStream::new(11);
        for s in generate_synthetic(8, 0.5, &mut rng, &cfg) {
            s.validate(&cfg.horizon).unwrap();
        }
    }
}

//! Constant-velocity Kalman predictor used as the difficulty oracle: filter
//! the observed window, roll the state forward over the prediction horizon,
//! and score the average displacement error against the ground-truth future.

use crate::error::{Error, Result};
use crate::scene::Scenario;

/// State [x, y, vx, vy]; positions are the only measurements.
#[derive(Debug, Clone)]
pub struct CvKalman {
    pub state: [f64; 4],
    /// Covariance, row-major 4x4.
    pub cov: [f64; 16],
    pub process_noise: f64,
    pub meas_noise: f64,
}

impl CvKalman {
    pub fn new(process_noise: f64, meas_noise: f64) -> Self {
        let mut cov = [0.0; 16];
        for i in 0..4 {
            cov[i * 4 + i] = 1e9;
        }
        CvKalman { state: [0.0; 4], cov, process_noise, meas_noise }
    }

    fn predict_step(&mut self, dt: f64) {
        let [x, y, vx, vy] = self.state;
        self.state = [x + vx * dt, y + vy * dt, vx, vy];
        // P = F P F^T + Q, with F the CV transition.
        let f = |i: usize, j: usize| -> f64 {
            match (i, j) {
                (0, 0) | (1, 1) | (2, 2) | (3, 3) => 1.0,
                (0, 2) | (1, 3) => dt,
                _ => 0.0,
            }
        };
        let mut fp = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += f(i, k) * self.cov[k * 4 + j];
                }
                fp[i * 4 + j] = s;
            }
        }
        let mut new_cov = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += fp[i * 4 + k] * f(j, k);
                }
                new_cov[i * 4 + j] = s;
            }
        }
        for i in 0..4 {
            new_cov[i * 4 + i] += self.process_noise;
        }
        self.cov = new_cov;
    }

    fn update(&mut self, z: [f64; 2]) {
        // Measurement H = [I2 0]; innovation covariance S = H P H^T + R.
        let p = &self.cov;
        let s00 = p[0] + self.meas_noise;
        let s01 = p[1];
        let s10 = p[4];
        let s11 = p[5] + self.meas_noise;
        let det = s00 * s11 - s01 * s10;
        let (i00, i01, i10, i11) = (s11 / det, -s01 / det, -s10 / det, s00 / det);
        // K = P H^T S^-1 (4x2).
        let mut k = [0.0; 8];
        for r in 0..4 {
            let ph0 = p[r * 4];
            let ph1 = p[r * 4 + 1];
            k[r * 2] = ph0 * i00 + ph1 * i10;
            k[r * 2 + 1] = ph0 * i01 + ph1 * i11;
        }
        let inn = [z[0] - self.state[0], z[1] - self.state[1]];
        for r in 0..4 {
            self.state[r] += k[r * 2] * inn[0] + k[r * 2 + 1] * inn[1];
        }
        // P = (I - K H) P.
        let mut new_cov = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let kh = k[r * 2] * p[c] + k[r * 2 + 1] * p[4 + c];
                new_cov[r * 4 + c] = p[r * 4 + c] - kh;
            }
        }
        self.cov = new_cov;
    }

    /// Filter the observed positions (skipping masked steps' updates) and
    /// return the predicted future positions.
    pub fn fit_predict(&mut self, positions: &[[f64; 2]], mask: &[bool], dt: f64, t_fut: usize) -> Vec<[f64; 2]> {
        let first = mask.iter().position(|&m| m).unwrap_or(0);
        self.state = [positions[first][0], positions[first][1], 0.0, 0.0];
        for t in first + 1..positions.len() {
            self.predict_step(dt);
            if mask[t] {
                self.update(positions[t]);
            }
        }
        let mut out = Vec::with_capacity(t_fut);
        let mut s = self.state;
        for _ in 0..t_fut {
            s = [s[0] + s[2] * dt, s[1] + s[3] * dt, s[2], s[3]];
            out.push([s[0], s[1]]);
        }
        out
    }
}

/// Average displacement error of the constant-velocity rollout against the
/// ground-truth future: the unnormalized difficulty score.
pub fn difficulty_score(scenario: &Scenario, dt: f64) -> Result<f64> {
    let future = scenario
        .future
        .as_ref()
        .ok_or_else(|| Error::validation(format!("scenario '{}': no future for difficulty", scenario.id)))?;
    let tgt = scenario.target();
    let mut kf = CvKalman::new(0.0, 0.01);
    let pred = kf.fit_predict(&tgt.positions, &tgt.mask, dt, future.len());
    let ade = pred
        .iter()
        .zip(future)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum::<f64>()
        / future.len() as f64;
    Ok(ade)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentKind, AgentTrack, MapPolyline, Split};

    fn cv_scenario(speed: f64, future_fn: impl Fn(usize) -> [f64; 2]) -> Scenario {
        let t_obs = 20;
        let t_fut = 30;
        let dt = 0.1;
        let positions: Vec<[f64; 2]> = (0..t_obs).map(|t| [speed * dt * t as f64, 0.0]).collect();
        let mut tgt = AgentTrack {
            positions,
            headings: vec![0.0; t_obs],
            velocities: vec![speed; t_obs],
            mask: vec![true; t_obs],
            kind: AgentKind::Target,
            future: None,
            displacements: Vec::new(),
        };
        tgt.derive_displacements();
        let future: Vec<[f64; 2]> = (0..t_fut).map(future_fn).collect();
        Scenario {
            id: "kf".into(),
            split: Split::Train,
            agents: vec![tgt],
            polylines: vec![MapPolyline::new(vec![[0.0, 0.0], [50.0, 0.0]])],
            future: Some(future),
        }
    }

    #[test]
    fn exact_constant_velocity_scores_near_zero() {
        let speed = 9.0;
        let dt = 0.1;
        let s = cv_scenario(speed, |t| [speed * dt * (20 + t) as f64, 0.0]);
        let sd = difficulty_score(&s, dt).unwrap();
        assert!(sd < 1e-6, "difficulty {sd}");
    }

    #[test]
    fn stopping_target_matches_line_extrapolation_oracle() {
        let speed = 9.0;
        let dt = 0.1;
        // Target stops halfway through the future.
        let s = cv_scenario(speed, |t| {
            let t_stop = 15usize;
            let steps = (t + 1).min(t_stop);
            [speed * dt * (19 + steps) as f64, 0.0]
        });
        let sd = difficulty_score(&s, dt).unwrap();
        // Brute-force oracle: straight-line extrapolation from the last
        // observed pose at the fitted (= true) velocity.
        let future = s.future.as_ref().unwrap();
        let last = [speed * dt * 19.0, 0.0];
        let expect = future
            .iter()
            .enumerate()
            .map(|(t, g)| {
                let p = [last[0] + speed * dt * (t + 1) as f64, last[1]];
                ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / future.len() as f64;
        assert!((sd - expect).abs() < 1e-6, "{sd} vs oracle {expect}");
    }

    #[test]
    fn doubling_future_deviation_doubles_score() {
        let speed = 9.0;
        let dt = 0.1;
        let base = |t: usize| [speed * dt * (20 + t) as f64, 0.0];
        let s1 = cv_scenario(speed, |t| {
            let b = base(t);
            [b[0], b[1] + 0.5 * t as f64]
        });
        let s2 = cv_scenario(speed, |t| {
            let b = base(t);
            [b[0], b[1] + 1.0 * t as f64]
        });
        let d1 = difficulty_score(&s1, dt).unwrap();
        let d2 = difficulty_score(&s2, dt).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-6, "{d2} vs 2x{d1}");
    }

    #[test]
    fn missing_future_is_an_error() {
        let mut s = cv_scenario(5.0, |_| [0.0, 0.0]);
        s.future = None;
        s.split = Split::Test;
        assert!(difficulty_score(&s, 0.1).is_err());
    }
}

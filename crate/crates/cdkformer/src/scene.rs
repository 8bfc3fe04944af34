//! Scenario data model, canonical line-delimited corpus format, and
//! coordinate-frame normalization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const CORPUS_FORMAT: &str = "cdk-scn";
pub const CORPUS_VERSION: u32 = 1;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    pub hz: f64,
}

impl HorizonConfig {
    pub fn desk() -> Self {
        HorizonConfig { t_obs: 20, t_fut: 30, hz: 10.0 }
    }

    /// Argoverse-like horizon: 5 s observed, 6 s predicted at 10 Hz.
    pub fn av2() -> Self {
        HorizonConfig { t_obs: 50, t_fut: 60, hz: 10.0 }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Target,
    Neighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTrack {
    pub positions: Vec<[f64; 2]>,
    pub headings: Vec<f64>,
    pub velocities: Vec<f64>,
    pub mask: Vec<bool>,
    pub kind: AgentKind,
    /// Ground-truth future for this agent when available (the generator
    /// emits it for neighbors as well, for group supervision).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<[f64; 2]>>,
    /// Derived on load, never stored: displacements[t] = p[t] - p[t-1],
    /// first row zero.
    #[serde(skip)]
    pub displacements: Vec<[f64; 2]>,
}

impl AgentTrack {
    pub fn derive_displacements(&mut self) {
        let n = self.positions.len();
        let mut d = vec![[0.0, 0.0]; n];
        for t in 1..n {
            d[t] = [
                self.positions[t][0] - self.positions[t - 1][0],
                self.positions[t][1] - self.positions[t - 1][1],
            ];
        }
        self.displacements = d;
    }

    /// Forward-fill masked gaps (and back-fill a leading gap) so every step
    /// carries usable values; the mask still marks which were observed.
    pub fn forward_fill(&mut self) {
        let n = self.positions.len();
        let first_valid = match self.mask.iter().position(|&m| m) {
            Some(i) => i,
            None => return,
        };
        for t in 0..first_valid {
            self.positions[t] = self.positions[first_valid];
            self.headings[t] = self.headings[first_valid];
            self.velocities[t] = self.velocities[first_valid];
        }
        for t in first_valid + 1..n {
            if !self.mask[t] {
                self.positions[t] = self.positions[t - 1];
                self.headings[t] = self.headings[t - 1];
                self.velocities[t] = self.velocities[t - 1];
            }
        }
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.mask.iter().rposition(|&m| m)
    }

    pub fn first_valid(&self) -> Option<usize> {
        self.mask.iter().position(|&m| m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapPolyline {
    pub points: Vec<[f64; 2]>,
    #[serde(skip)]
    pub displacements: Vec<[f64; 2]>,
}

impl MapPolyline {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut p = MapPolyline { points, displacements: Vec::new() };
        p.derive_displacements();
        p
    }

    pub fn derive_displacements(&mut self) {
        let n = self.points.len();
        let mut d = vec![[0.0, 0.0]; n];
        for t in 1..n {
            d[t] = [
                self.points[t][0] - self.points[t - 1][0],
                self.points[t][1] - self.points[t - 1][1],
            ];
        }
        self.displacements = d;
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (mut x, mut y) = (0.0, 0.0);
        for p in &self.points {
            x += p[0];
            y += p[1];
        }
        [x / n, y / n]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub split: Split,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<MapPolyline>,
    /// Target ground-truth future, present for train/val splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<[f64; 2]>>,
}

impl Scenario {
    pub fn target_index(&self) -> usize {
        self.agents.iter().position(|a| a.kind == AgentKind::Target).expect("validated scenario has a target")
    }

    pub fn target(&self) -> &AgentTrack {
        &self.agents[self.target_index()]
    }

    pub fn is_tail_labeled(&self) -> bool {
        self.id.starts_with("tail")
    }

    fn fail(&self, field: &str, msg: &str) -> Error {
        Error::validation(format!("scenario '{}', field '{}': {}", self.id, field, msg))
    }

    pub fn validate(&self, horizon: &HorizonConfig) -> Result<()> {
        if self.agents.is_empty() {
            return Err(self.fail("agents", "N_a must be >= 1"));
        }
        let n_targets = self.agents.iter().filter(|a| a.kind == AgentKind::Target).count();
        if n_targets != 1 {
            return Err(self.fail("agents", &format!("expected exactly one target, found {n_targets}")));
        }
        for (i, a) in self.agents.iter().enumerate() {
            let field = format!("agents[{i}]");
            if a.positions.len() != horizon.t_obs {
                return Err(self.fail(&field, &format!(
                    "positions length {} does not match corpus t_obs {}",
                    a.positions.len(),
                    horizon.t_obs
                )));
            }
            if a.headings.len() != horizon.t_obs
                || a.velocities.len() != horizon.t_obs
                || a.mask.len() != horizon.t_obs
            {
                return Err(self.fail(&field, "headings/velocities/mask length mismatch"));
            }
            if !a.mask.iter().any(|&m| m) {
                return Err(self.fail(&field, "no valid observed step"));
            }
            let finite = a.positions.iter().all(|p| p[0].is_finite() && p[1].is_finite())
                && a.headings.iter().all(|h| h.is_finite())
                && a.velocities.iter().all(|v| v.is_finite());
            if !finite {
                return Err(self.fail(&field, "non-finite value"));
            }
            if let Some(fut) = &a.future {
                if fut.len() != horizon.t_fut {
                    return Err(self.fail(&field, &format!(
                        "agent future length {} does not match corpus t_fut {}",
                        fut.len(),
                        horizon.t_fut
                    )));
                }
            }
        }
        for (i, p) in self.polylines.iter().enumerate() {
            let field = format!("polylines[{i}]");
            if p.points.len() < 2 {
                return Err(self.fail(&field, "polyline needs at least 2 points"));
            }
            if !p.points.iter().all(|q| q[0].is_finite() && q[1].is_finite()) {
                return Err(self.fail(&field, "non-finite point"));
            }
        }
        let needs_future = matches!(self.split, Split::Train | Split::Val);
        match (&self.future, needs_future) {
            (None, true) => return Err(self.fail("future", "missing for train/val split")),
            (Some(_), false) => return Err(self.fail("future", "present for test split")),
            (Some(f), true) if f.len() != horizon.t_fut => {
                return Err(self.fail("future", &format!(
                    "length {} does not match corpus t_fut {}",
                    f.len(),
                    horizon.t_fut
                )))
            }
            _ => {}
        }
        if let Some(f) = &self.future {
            if !f.iter().all(|q| q[0].is_finite() && q[1].is_finite()) {
                return Err(self.fail("future", "non-finite value"));
            }
        }
        Ok(())
    }

    fn post_load(&mut self) {
        for a in &mut self.agents {
            a.forward_fill();
            a.derive_displacements();
        }
        for p in &mut self.polylines {
            p.derive_displacements();
        }
    }

    /// Rigid transform placing the target's last observed position at the
    /// origin with its last heading along +x. Falls back to the identity
    /// rotation when the target never moved over the window.
    pub fn normalize_frame(&self) -> Scenario {
        let tgt = self.target();
        let lv = tgt.last_valid().expect("validated scenario has a valid target step");
        let fv = tgt.first_valid().unwrap();
        let origin = tgt.positions[lv];
        let travel = ((tgt.positions[lv][0] - tgt.positions[fv][0]).powi(2)
            + (tgt.positions[lv][1] - tgt.positions[fv][1]).powi(2))
        .sqrt();
        let phi = if travel < 1e-9 { 0.0 } else { tgt.headings[lv] };
        let (s, c) = phi.sin_cos();
        let xf = |p: [f64; 2]| -> [f64; 2] {
            let dx = p[0] - origin[0];
            let dy = p[1] - origin[1];
            [c * dx + s * dy, -s * dx + c * dy]
        };
        let mut out = self.clone();
        for a in &mut out.agents {
            for p in &mut a.positions {
                *p = xf(*p);
            }
            for h in &mut a.headings {
                *h = wrap_angle(*h - phi);
            }
            if let Some(fut) = &mut a.future {
                for p in fut {
                    *p = xf(*p);
                }
            }
            a.derive_displacements();
        }
        for poly in &mut out.polylines {
            for p in &mut poly.points {
                *p = xf(*p);
            }
            poly.derive_displacements();
        }
        if let Some(fut) = &mut out.future {
            for p in fut {
                *p = xf(*p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub t_obs: usize,
    pub t_fut: usize,
    pub hz: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl CorpusHeader {
    pub fn new(horizon: &HorizonConfig, seed: u64, config_hash: &str) -> Self {
        CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            t_obs: horizon.t_obs,
            t_fut: horizon.t_fut,
            hz: horizon.hz,
            seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn horizon(&self) -> HorizonConfig {
        HorizonConfig { t_obs: self.t_obs, t_fut: self.t_fut, hz: self.hz }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub scenarios: Vec<Scenario>,
}

pub fn save_scenarios(path: &Path, header: &CorpusHeader, scenarios: &[Scenario]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for s in scenarios {
        writeln!(w, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}

pub fn load_scenarios(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::validation(format!("cannot open corpus '{}': {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();

    let header: CorpusHeader = match lines.next() {
        None => {
            // Zero-byte file: empty corpus under the default desk horizon.
            return Ok(Corpus {
                header: CorpusHeader::new(&HorizonConfig::desk(), 0, "empty"),
                scenarios: Vec::new(),
            });
        }
        Some(line) => {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("corpus header: {e}")))?
        }
    };
    if header.format != CORPUS_FORMAT {
        return Err(Error::validation(format!(
            "corpus format '{}' is not '{CORPUS_FORMAT}'",
            header.format
        )));
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::validation(format!("unsupported corpus version {}", header.version)));
    }
    let horizon = header.horizon();
    let mut scenarios = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: Scenario = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("line {}: {e}", lineno + 2)))?;
        s.validate(&horizon)?;
        s.post_load();
        scenarios.push(s);
    }
    Ok(Corpus { header, scenarios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn straight_scenario(id: &str) -> Scenario {
        let h = HorizonConfig::desk();
        let mut positions = Vec::new();
        let mut headings = Vec::new();
        let mut velocities = Vec::new();
        for t in 0..h.t_obs {
            positions.push([t as f64 * 1.0, 5.0]);
            headings.push(0.0);
            velocities.push(10.0);
        }
        let future: Vec<[f64; 2]> =
            (0..h.t_fut).map(|t| [(h.t_obs + t) as f64 * 1.0, 5.0]).collect();
        let mut tgt = AgentTrack {
            positions,
            headings,
            velocities,
            mask: vec![true; h.t_obs],
            kind: AgentKind::Target,
            future: Some(future.clone()),
            displacements: Vec::new(),
        };
        tgt.derive_displacements();
        let poly = MapPolyline::new((0..10).map(|i| [i as f64 * 8.0, 5.0]).collect());
        Scenario {
            id: id.to_string(),
            split: Split::Train,
            agents: vec![tgt],
            polylines: vec![poly],
            future: Some(future),
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI / 2.0) + std::f64::consts::PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        for k in -5..5 {
            let a = 0.3 + k as f64 * std::f64::consts::TAU;
            assert!((wrap_angle(a) - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn validate_catches_missing_target() {
        let h = HorizonConfig::desk();
        let mut s = straight_scenario("s0");
        s.agents[0].kind = AgentKind::Neighbor;
        let err = s.validate(&h).unwrap_err();
        assert!(err.to_string().contains("s0"));
        assert!(err.to_string().contains("target"));
    }

    #[test]
    fn validate_catches_empty_agents() {
        let h = HorizonConfig::desk();
        let mut s = straight_scenario("nobody");
        s.agents.clear();
        let err = s.validate(&h).unwrap_err();
        assert!(err.to_string().contains("nobody"));
    }

    #[test]
    fn normalize_places_target_at_origin_heading_zero() {
        let h = HorizonConfig::desk();
        let mut s = straight_scenario("s1");
        // Rotate the whole scene by pi/2 and shift so the last observed
        // position is (10, -3).
        let phi = std::f64::consts::FRAC_PI_2;
        let (sn, cs) = phi.sin_cos();
        let last = *s.agents[0].positions.last().unwrap();
        for a in &mut s.agents {
            for p in &mut a.positions {
                let q = [p[0] - last[0], p[1] - last[1]];
                *p = [cs * q[0] - sn * q[1] + 10.0, sn * q[0] + cs * q[1] - 3.0];
            }
            for hh in &mut a.headings {
                *hh = wrap_angle(*hh + phi);
            }
            a.derive_displacements();
        }
        s.validate(&h).unwrap();
        let n = s.normalize_frame();
        let tgt = n.target();
        let lv = tgt.last_valid().unwrap();
        assert!(tgt.positions[lv][0].abs() < 1e-9);
        assert!(tgt.positions[lv][1].abs() < 1e-9);
        assert!(tgt.headings[lv].abs() < 1e-9);
    }

    #[test]
    fn normalize_is_idempotent_and_distance_preserving() {
        let s = straight_scenario("s2");
        let n1 = s.normalize_frame();
        let n2 = n1.normalize_frame();
        for (a, b) in n1.agents[0].positions.iter().zip(&n2.agents[0].positions) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
        // Pairwise distances between track points are preserved.
        let orig = &s.agents[0].positions;
        let norm = &n1.agents[0].positions;
        for i in 0..orig.len() {
            for j in 0..orig.len() {
                let d0 = ((orig[i][0] - orig[j][0]).powi(2) + (orig[i][1] - orig[j][1]).powi(2)).sqrt();
                let d1 = ((norm[i][0] - norm[j][0]).powi(2) + (norm[i][1] - norm[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_heading_falls_back_to_identity_rotation() {
        let h = HorizonConfig::desk();
        let mut s = straight_scenario("s3");
        for t in 0..h.t_obs {
            s.agents[0].positions[t] = [4.0, 7.0];
            s.agents[0].headings[t] = 1.2;
            s.agents[0].velocities[t] = 0.0;
        }
        s.agents[0].derive_displacements();
        let n = s.normalize_frame();
        // Translation happened, rotation did not.
        let lv = n.target().last_valid().unwrap();
        assert_eq!(n.target().positions[lv], [0.0, 0.0]);
        assert!((n.target().headings[lv] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn forward_fill_and_displacement_consistency() {
        let h = HorizonConfig::desk();
        let mut s = straight_scenario("s4");
        s.agents[0].mask[3] = false;
        s.agents[0].mask[0] = false;
        s.validate(&h).unwrap();
        let mut a = s.agents[0].clone();
        a.forward_fill();
        a.derive_displacements();
        assert_eq!(a.positions[3], a.positions[2]);
        assert_eq!(a.positions[0], a.positions[1]);
        for t in 1..h.t_obs {
            assert_eq!(a.displacements[t][0], a.positions[t][0] - a.positions[t - 1][0]);
        }
    }

    #[test]
    fn corpus_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let header = CorpusHeader::new(&HorizonConfig::desk(), 7, "abc");
        let scenarios: Vec<Scenario> = (0..3).map(|i| straight_scenario(&format!("s{i}"))).collect();
        save_scenarios(&path, &header, &scenarios).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let corpus = load_scenarios(&path).unwrap();
        let path2 = dir.path().join("copy.jsonl");
        save_scenarios(&path2, &corpus.header, &corpus.scenarios).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, b"").unwrap();
        let corpus = load_scenarios(&path).unwrap();
        assert!(corpus.scenarios.is_empty());
    }

    #[test]
    fn invalid_record_names_scenario_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = CorpusHeader::new(&HorizonConfig::desk(), 7, "abc");
        let mut s = straight_scenario("broken");
        s.agents.clear();
        save_scenarios(&path, &header, &[s]).unwrap();
        let err = load_scenarios(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken") && msg.contains("agents"), "{msg}");
    }

    #[test]
    fn rigid_transform_preserves_pairwise_distances_random() {
        let mut rng = RngStream::new(5);
        for _ in 0..5 {
            let s = straight_scenario("r");
            let phi = rng.range(0.0, std::f64::consts::TAU);
            let (sn, cs) = phi.sin_cos();
            let tx = rng.range(-50.0, 50.0);
            let ty = rng.range(-50.0, 50.0);
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
            let n0 = s.normalize_frame();
            let n1 = moved.normalize_frame();
            for (a, b) in n0.agents[0].positions.iter().zip(&n1.agents[0].positions) {
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }
}

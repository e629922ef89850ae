use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::aggregator::{AggregatorConfig, Policy};
use crate::channel::DelayModel;
use crate::kinematics::{EgoState, MobilityConfig, NodeId, NodeKind, NodeState, Road, SpeedProfile};
use crate::metrics::DssrDenominator;
use crate::predictor::{choose_period, ForestConfig, PredictorKind, RecurrentNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sawtooth {
    pub low: f64,
    pub high: f64,
    pub period_ms: f64,
}

/// Ego motion. Exactly one of `speed`, `sawtooth` and `points` applies;
/// with none given the ego follows a 15 to 30 m/s sawtooth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoSpec {
    pub position: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sawtooth: Option<Sawtooth>,
    /// `[time_ms, speed]` breakpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySpec {
    pub speed_min: f64,
    pub speed_max: f64,
    pub perturbation: f64,
    pub max_deviation: f64,
    /// Road length for a ring road; open road when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_length: Option<f64>,
}

impl Default for MobilitySpec {
    fn default() -> Self {
        let m = MobilityConfig::default();
        Self {
            speed_min: m.speed_min,
            speed_max: m.speed_max,
            perturbation: m.perturbation,
            max_deviation: m.max_deviation,
            ring_length: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodMode {
    /// Use `sensor_period` and `vehicle_period` as given.
    #[default]
    Fixed,
    /// Pick each kind's period from the admissible interval at the fastest
    /// relative speed the scenario can produce.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub model: PredictorKind,
    pub period_mode: PeriodMode,
    pub sensor_period: usize,
    pub vehicle_period: usize,
    pub n_max: usize,
    pub window: usize,
    /// Modeled cost of one forecast batch.
    pub l_pred_ms: f64,
    /// Relative band for the accuracy figure.
    pub tolerance: f64,
    /// Length of the trace simulated for training; the run length when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_duration_ms: Option<f64>,
    pub recurrent: RecurrentNetConfig,
    pub forest: ForestConfig,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            model: PredictorKind::Recurrent,
            period_mode: PeriodMode::Fixed,
            sensor_period: 5,
            vehicle_period: 10,
            n_max: 20,
            window: 10,
            l_pred_ms: 100.0,
            tolerance: 0.1,
            training_duration_ms: None,
            recurrent: RecurrentNetConfig::default(),
            forest: ForestConfig::default(),
        }
    }
}

/// Optional overrides of the rate-derived aggregator settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_aoi_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_wait_timeout_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_depth: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link_timeout_cycles: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_bucket_ms: Option<f64>,
    /// Turns forecast sharing off.
    pub no_clustering: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision_cost_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_cost_ms: Option<f64>,
    pub dssr_denominator: DssrDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: f64,
    /// Cruise speed; ignored for sensors.
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub lane: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl NodeSpec {
    pub fn to_state(&self) -> NodeState {
        let base = match self.kind {
            NodeKind::Sensor => NodeState::sensor(self.id, self.position),
            NodeKind::Vehicle => NodeState::vehicle(self.id, self.position, self.lane, self.speed),
        };
        match self.coverage {
            Some(r) => base.with_coverage(r),
            None => base,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_duration() -> f64 {
    1_200_000.0
}
fn default_q() -> f64 {
    3.0
}
fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub ego: EgoSpec,
    #[serde(default)]
    pub mobility: MobilitySpec,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default)]
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub aggregator: AggregatorSpec,
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeSpec>,
}

impl Scenario {
    /// Parses and validates scenario text.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Scenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, msg: String| Err(HarnessError::Scenario(format!("{field}: {msg}")));
        if !(self.q > 0.0) || !self.q.is_finite() {
            return bad("q", format!("must be > 0, got {}", self.q));
        }
        if !(self.duration_ms > 0.0) || !self.duration_ms.is_finite() {
            return bad("duration_ms", format!("must be > 0, got {}", self.duration_ms));
        }
        if let Some(m) = self.aggregator.max_aoi_ms {
            if ((self.q * m) - 1000.0).abs() > 1e-6 {
                return bad(
                    "aggregator.max_aoi_ms",
                    format!("q * max_aoi_ms must equal 1000 ms, got {}", self.q * m),
                );
            }
        }
        if self.nodes.is_empty() {
            return bad("node", "roster must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !seen.insert(n.id) {
                return bad(&format!("node[{i}].id"), format!("duplicate node id {}", n.id));
            }
            if !n.position.is_finite() {
                return bad(&format!("node[{i}].position"), "must be finite".into());
            }
            if n.coverage.is_some_and(|r| !(r > 0.0)) {
                return bad(&format!("node[{i}].coverage"), "must be positive".into());
            }
        }
        let profiles = [
            self.ego.speed.is_some(),
            self.ego.sawtooth.is_some(),
            self.ego.points.is_some(),
        ];
        if profiles.iter().filter(|&&b| b).count() > 1 {
            return bad("ego", "give only one of speed, sawtooth, points".into());
        }
        if let Some(st) = &self.ego.sawtooth {
            if !(st.period_ms > 1.0) || st.low < 0.0 || st.high < st.low {
                return bad("ego.sawtooth", "needs 0 <= low <= high and period_ms > 1".into());
            }
        }
        if let Some(pts) = &self.ego.points {
            if pts.is_empty() || pts.windows(2).any(|w| w[1].0 < w[0].0) {
                return bad("ego.points", "must be non-empty and sorted by time".into());
            }
        }
        if self.ego.speed.is_some_and(|v| !(v >= 0.0)) {
            return bad("ego.speed", "must be >= 0".into());
        }
        if self.mobility.ring_length.is_some_and(|l| !(l > 0.0)) {
            return bad("mobility.ring_length", "must be positive".into());
        }
        if !(self.mobility.speed_min <= self.mobility.speed_max) {
            return bad("mobility", "speed_min must not exceed speed_max".into());
        }
        self.delay
            .validate()
            .map_err(|e| HarnessError::Scenario(format!("delay: {e}")))?;
        let p = &self.predictor;
        if p.window == 0 || p.sensor_period == 0 || p.vehicle_period == 0 || p.n_max == 0 {
            return bad("predictor", "window, periods and n_max must be >= 1".into());
        }
        p.recurrent
            .validate()
            .map_err(|e| HarnessError::Scenario(format!("predictor.recurrent: {e}")))?;
        if self.predictor.training_duration_ms.is_some_and(|d| !(d > 0.0)) {
            return bad("predictor.training_duration_ms", "must be positive".into());
        }
        self.aggregator_config()
            .validate()
            .map_err(|e| HarnessError::Scenario(format!("aggregator: {e}")))?;
        Ok(())
    }

    pub fn speed_profile(&self) -> SpeedProfile {
        if let Some(v) = self.ego.speed {
            return SpeedProfile::constant(v);
        }
        if let Some(points) = &self.ego.points {
            return SpeedProfile { points: points.clone() };
        }
        let st = self.ego.sawtooth.clone().unwrap_or(Sawtooth {
            low: 15.0,
            high: 30.0,
            period_ms: 120_000.0,
        });
        SpeedProfile::sawtooth(st.low, st.high, st.period_ms, self.duration_ms)
    }

    pub fn ego_state(&self) -> EgoState {
        let profile = self.speed_profile();
        let v = profile.speed_at(0.0).unwrap_or(0.0);
        let mut ego = EgoState::new(self.ego.position, v);
        ego.speed_profile = profile;
        ego
    }

    pub fn mobility_config(&self) -> MobilityConfig {
        let m = &self.mobility;
        MobilityConfig {
            speed_min: m.speed_min,
            speed_max: m.speed_max,
            perturbation: m.perturbation,
            max_deviation: m.max_deviation,
            road: m.ring_length.map_or(Road::open(), Road::ring),
        }
    }

    /// Fastest ego speed the profile reaches.
    pub fn max_ego_speed(&self) -> f64 {
        self.speed_profile()
            .points
            .iter()
            .map(|p| p.1.abs())
            .fold(0.0, f64::max)
    }

    /// Prediction period of each node kind after applying the period mode.
    pub fn periods(&self) -> (usize, usize) {
        let p = &self.predictor;
        match p.period_mode {
            PeriodMode::Fixed => (p.sensor_period, p.vehicle_period),
            PeriodMode::Auto => {
                let v = self.max_ego_speed();
                let slowest_vehicle = self
                    .nodes
                    .iter()
                    .filter(|n| n.kind == NodeKind::Vehicle)
                    .map(|n| n.speed)
                    .fold(f64::INFINITY, f64::min);
                let pick = |kind: NodeKind, rel: f64| {
                    let radius = self
                        .nodes
                        .iter()
                        .filter(|n| n.kind == kind)
                        .map(|n| n.coverage.unwrap_or(kind.default_coverage()))
                        .fold(f64::INFINITY, f64::min);
                    let radius = if radius.is_finite() {
                        radius
                    } else {
                        kind.default_coverage()
                    };
                    choose_period(p.l_pred_ms, self.q, rel.abs() / (2.0 * radius), p.n_max).period
                };
                let vehicle_rel = if slowest_vehicle.is_finite() {
                    (v - slowest_vehicle).abs().max(self.mobility.max_deviation)
                } else {
                    v
                };
                (pick(NodeKind::Sensor, v), pick(NodeKind::Vehicle, vehicle_rel))
            }
        }
    }

    pub fn aggregator_config(&self) -> AggregatorConfig {
        let mut c = AggregatorConfig::for_rate(self.q);
        let a = &self.aggregator;
        if let Some(v) = a.deadline_ms {
            c.deadline_ms = v;
        }
        if let Some(v) = a.stop_wait_timeout_ms {
            c.stop_wait_timeout_ms = v;
        }
        if let Some(v) = a.history_depth {
            c.history_depth = v;
        }
        if let Some(v) = a.link_timeout_cycles {
            c.link_timeout_cycles = v;
        }
        if let Some(v) = a.cluster_bucket_ms {
            c.cluster_bucket_ms = Some(v);
        }
        if a.no_clustering {
            c.cluster_bucket_ms = None;
        }
        if let Some(v) = a.decision_cost_ms {
            c.decision_cost_ms = v;
        }
        if let Some(v) = a.message_cost_ms {
            c.message_cost_ms = v;
        }
        c.l_pred_ms = self.predictor.l_pred_ms;
        c.window = self.predictor.window;
        let (s, v) = self.periods();
        c.sensor_period = s;
        c.vehicle_period = v;
        c
    }

    /// Copy with the ego held at a constant speed.
    pub fn with_constant_speed(&self, speed: f64) -> Self {
        let mut s = self.clone();
        s.ego.speed = Some(speed);
        s.ego.sawtooth = None;
        s.ego.points = None;
        s
    }

    /// Identifies the setup independent of ego motion, policy and seed, so
    /// sweep cells over the same roster compare cleanly.
    pub fn fingerprint(&self) -> String {
        let mut s = self.clone();
        s.ego = EgoSpec::default();
        s.policy = Policy::default();
        s.seed = 0;
        s.output_dir = None;
        let text = s.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        let short: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("{}#{short}", self.name)
    }
}

/// Reads and validates a scenario file; messages carry the path.
pub fn parse_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Scenario::from_toml(&text).map_err(|e| match e {
        HarnessError::Scenario(m) => HarnessError::Scenario(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[node]]
id = 1
kind = "sensor"
position = 50.0
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.duration_ms, 1_200_000.0);
        assert_eq!(s.q, 3.0);
        assert_eq!(s.periods(), (5, 10));
        assert_eq!(s.policy, Policy::Predictive);
        let c = s.aggregator_config();
        assert!((c.max_aoi_ms * s.q - 1000.0).abs() < 1e-9);
        assert_eq!(s.speed_profile().speed_at(0.0), Some(15.0));
    }

    #[test]
    fn validation_errors() {
        let e = Scenario::from_toml(&format!("q = 0.0\n{MINIMAL}"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("q"), "{e}");
        let dup = format!("{MINIMAL}\n[[node]]\nid = 1\nkind = \"vehicle\"\nposition = 0.0\n");
        assert!(Scenario::from_toml(&dup).unwrap_err().to_string().contains("duplicate"));
        assert!(Scenario::from_toml("q = 3.0\n")
            .unwrap_err()
            .to_string()
            .contains("roster"));
        let unknown = format!("bogus = 1\n{MINIMAL}");
        let e = Scenario::from_toml(&unknown).unwrap_err().to_string();
        assert!(e.contains("bogus") && e.contains("line"), "{e}");
        let broken = Scenario::from_toml("q = = 3").unwrap_err().to_string();
        assert!(broken.contains("line 1"), "{broken}");
    }

    #[test]
    fn roundtrip() {
        let mut s = Scenario::from_toml(MINIMAL).unwrap();
        s.ego.sawtooth = Some(Sawtooth {
            low: 10.0,
            high: 20.0,
            period_ms: 5000.0,
        });
        s.mobility.ring_length = Some(3000.0);
        s.aggregator.deadline_ms = Some(300.0);
        let back = Scenario::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn auto_periods_fall_in_interval() {
        let mut s = Scenario::from_toml(MINIMAL).unwrap();
        s.predictor.period_mode = PeriodMode::Auto;
        s.predictor.n_max = 10;
        s.ego.speed = Some(30.0);
        // 30 m/s across a 200 m chord: q / scar = 20, capped at 10.
        assert_eq!(s.periods().0, 10);
    }

    #[test]
    fn fingerprint_ignores_motion_and_seed() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let mut t = s.with_constant_speed(25.0);
        t.seed = 9;
        assert_eq!(s.fingerprint(), t.fingerprint());
        t.q = 2.0;
        assert_ne!(s.fingerprint(), t.fingerprint());
    }
}

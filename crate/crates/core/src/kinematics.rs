//! Freeway world state and the geometric queries the aggregator relies on.
//!
//! The freeway is a 1-D axis. Lanes only matter for placing vehicles side by
//! side; every distance is measured along the axis. An optional road length
//! turns the axis into a ring so a finite roster keeps a constant traffic
//! density over long runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Identifier of a roadside sensor or vehicle.
pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Sensor,
    Vehicle,
}

impl NodeKind {
    pub fn default_coverage(self) -> f64 {
        match self {
            NodeKind::Sensor => 100.0,
            NodeKind::Vehicle => 300.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Sensor => "sensor",
            NodeKind::Vehicle => "vehicle",
        }
    }
}

impl std::fmt::Display for NodeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sensor" | "S" => Ok(NodeKind::Sensor),
            "vehicle" | "V" => Ok(NodeKind::Vehicle),
            other => Err(format!("unknown node kind `{other}`")),
        }
    }
}

/// One information source: a stationary roadside sensor or a nearby vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Meters along the freeway axis.
    pub position: f64,
    pub lane: i32,
    /// Signed, positive in the ego travel direction. Always 0 for sensors.
    pub speed: f64,
    /// Cruise speed the perturbation wanders around.
    pub target_speed: f64,
    pub coverage_radius: f64,
}

impl NodeState {
    pub fn sensor(id: NodeId, position: f64) -> Self {
        Self {
            id,
            kind: NodeKind::Sensor,
            position,
            lane: 0,
            speed: 0.0,
            target_speed: 0.0,
            coverage_radius: NodeKind::Sensor.default_coverage(),
        }
    }

    pub fn vehicle(id: NodeId, position: f64, lane: i32, speed: f64) -> Self {
        Self {
            id,
            kind: NodeKind::Vehicle,
            position,
            lane,
            speed,
            target_speed: speed,
            coverage_radius: NodeKind::Vehicle.default_coverage(),
        }
    }

    pub fn with_coverage(mut self, radius: f64) -> Self {
        self.coverage_radius = radius;
        self
    }
}

/// Piecewise-linear schedule of ego target speed over simulated time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeedProfile {
    /// `(time_ms, speed_mps)` breakpoints sorted by time.
    pub points: Vec<(f64, f64)>,
}

impl SpeedProfile {
    pub fn constant(speed: f64) -> Self {
        Self {
            points: vec![(0.0, speed)],
        }
    }

    /// Repeating ramp from `low` to `high` over `period_ms`, dropping back to
    /// `low` at the start of every period.
    pub fn sawtooth(low: f64, high: f64, period_ms: f64, duration_ms: f64) -> Self {
        let mut points = Vec::new();
        let mut t = 0.0;
        while t <= duration_ms {
            points.push((t, low));
            points.push((t + period_ms - 1.0, high));
            t += period_ms;
        }
        Self { points }
    }

    pub fn speed_at(&self, t_ms: f64) -> Option<f64> {
        let first = self.points.first()?;
        if t_ms <= first.0 {
            return Some(first.1);
        }
        for pair in self.points.windows(2) {
            let (t0, v0) = pair[0];
            let (t1, v1) = pair[1];
            if t_ms <= t1 {
                if t1 <= t0 {
                    return Some(v1);
                }
                let frac = (t_ms - t0) / (t1 - t0);
                return Some(v0 + frac * (v1 - v0));
            }
        }
        self.points.last().map(|p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: f64,
    pub lane: i32,
    pub speed: f64,
    pub speed_profile: SpeedProfile,
}

impl EgoState {
    pub fn new(position: f64, speed: f64) -> Self {
        Self {
            position,
            lane: 0,
            speed,
            speed_profile: SpeedProfile::constant(speed),
        }
    }
}

/// What "coverage area" means in the speed-to-coverage ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageExtent {
    /// Full chord the ego traverses through the coverage disc (2·radius).
    #[default]
    Diameter,
    Radius,
}

impl CoverageExtent {
    pub fn of(self, node: &NodeState) -> f64 {
        match self {
            CoverageExtent::Diameter => 2.0 * node.coverage_radius,
            CoverageExtent::Radius => node.coverage_radius,
        }
    }
}

/// Freeway geometry: open axis or ring of a given length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Road {
    pub length: Option<f64>,
}

impl Road {
    pub fn open() -> Self {
        Self { length: None }
    }

    pub fn ring(length: f64) -> Self {
        Self { length: Some(length) }
    }

    pub fn wrap(&self, position: f64) -> f64 {
        match self.length {
            Some(len) => position.rem_euclid(len),
            None => position,
        }
    }

    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        match self.length {
            Some(len) => {
                let d = d.rem_euclid(len);
                d.min(len - d)
            }
            None => d,
        }
    }

    pub fn relative_distance(&self, ego: &EgoState, node: &NodeState) -> f64 {
        self.distance(ego.position, node.position)
    }

    pub fn in_coverage(&self, ego: &EgoState, node: &NodeState) -> bool {
        self.relative_distance(ego, node) <= node.coverage_radius
    }
}

/// `|ego.speed - node.speed|` along the axis.
pub fn relative_speed(ego: &EgoState, node: &NodeState) -> f64 {
    (ego.speed - node.speed).abs()
}

/// Axial distance on an open road; lanes are ignored.
pub fn relative_distance(ego: &EgoState, node: &NodeState) -> f64 {
    Road::open().relative_distance(ego, node)
}

/// Closed-interval coverage test on an open road.
pub fn in_coverage(ego: &EgoState, node: &NodeState) -> bool {
    Road::open().in_coverage(ego, node)
}

/// Speed-to-coverage-area ratio in 1/s.
pub fn scar(ego: &EgoState, node: &NodeState, extent: CoverageExtent) -> f64 {
    relative_speed(ego, node) / extent.of(node)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Half-width of the uniform speed perturbation per simulated second.
    pub perturbation: f64,
    /// Maximum drift of a vehicle's speed away from its cruise speed.
    pub max_deviation: f64,
    pub road: Road,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            speed_min: 15.0,
            speed_max: 30.0,
            perturbation: 1.0,
            max_deviation: 2.0,
            road: Road::open(),
        }
    }
}

impl MobilityConfig {
    fn clamp_magnitude(&self, speed: f64) -> f64 {
        let mag = speed.abs().clamp(self.speed_min, self.speed_max);
        if speed < 0.0 {
            -mag
        } else {
            mag
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub time_ms: f64,
    pub ego: EgoState,
    pub nodes: Vec<NodeState>,
    pub mobility: MobilityConfig,
}

impl World {
    pub fn new(ego: EgoState, nodes: Vec<NodeState>, mobility: MobilityConfig) -> Self {
        let mut world = Self {
            time_ms: 0.0,
            ego,
            nodes,
            mobility,
        };
        if let Some(v) = world.ego.speed_profile.speed_at(0.0) {
            world.ego.speed = v;
        }
        world
    }

    pub fn road(&self) -> Road {
        self.mobility.road
    }

    /// Advances every mobile entity by `dt_ms`.
    ///
    /// Positions move with the speed held at the start of the step; vehicle
    /// speeds then take a bounded uniform perturbation and the ego picks up
    /// its profile speed for the new time.
    pub fn step<R: Rng + ?Sized>(&mut self, dt_ms: f64, rng: &mut R) {
        debug_assert!(dt_ms > 0.0);
        let dt_s = dt_ms / 1000.0;
        let road = self.mobility.road;

        self.ego.position = road.wrap(self.ego.position + self.ego.speed * dt_s);
        self.time_ms += dt_ms;
        if let Some(v) = self.ego.speed_profile.speed_at(self.time_ms) {
            self.ego.speed = v;
        }

        let amp = self.mobility.perturbation * dt_s;
        for node in &mut self.nodes {
            if node.kind == NodeKind::Sensor {
                continue;
            }
            node.position = road.wrap(node.position + node.speed * dt_s);
            if amp > 0.0 {
                let delta: f64 = rng.gen_range(-amp..=amp);
                let dev = self.mobility.max_deviation;
                let lo = node.target_speed - dev;
                let hi = node.target_speed + dev;
                node.speed = (node.speed + delta).clamp(lo.min(hi), hi.max(lo));
            }
            node.speed = self.mobility.clamp_magnitude(node.speed);
        }
    }

    pub fn distance_to(&self, node: &NodeState) -> f64 {
        self.road().relative_distance(&self.ego, node)
    }

    pub fn covers(&self, node: &NodeState) -> bool {
        self.road().in_coverage(&self.ego, node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn still() -> MobilityConfig {
        MobilityConfig {
            perturbation: 0.0,
            ..MobilityConfig::default()
        }
    }

    #[test]
    fn ego_constant_velocity() {
        let mut w = World::new(EgoState::new(0.0, 15.0), vec![], still());
        w.step(1000.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(w.ego.position, 15.0);
    }

    #[test]
    fn sensors_never_move() {
        let mut w = World::new(
            EgoState::new(0.0, 20.0),
            vec![NodeState::sensor(1, 500.0)],
            MobilityConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            w.step(333.0, &mut rng);
        }
        assert_eq!(w.nodes[0].position, 500.0);
        assert_eq!(w.nodes[0].speed, 0.0);
    }

    #[test]
    fn vehicle_half_second() {
        let mut w = World::new(
            EgoState::new(0.0, 20.0),
            vec![NodeState::vehicle(1, 100.0, 1, 20.0)],
            still(),
        );
        w.step(500.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(w.nodes[0].position, 110.0);
    }

    #[test]
    fn relative_speed_cases() {
        let ego = EgoState::new(0.0, 20.0);
        assert_eq!(relative_speed(&ego, &NodeState::vehicle(1, 0.0, 1, 20.0)), 0.0);
        let ego30 = EgoState::new(0.0, 30.0);
        assert_eq!(relative_speed(&ego30, &NodeState::vehicle(1, 0.0, 1, 15.0)), 15.0);
        assert_eq!(relative_speed(&ego, &NodeState::sensor(2, 50.0)), 20.0);
    }

    #[test]
    fn relative_distance_cases() {
        let node = NodeState::sensor(1, 400.0);
        assert_eq!(relative_distance(&EgoState::new(400.0, 0.0), &node), 0.0);
        assert_eq!(relative_distance(&EgoState::new(100.0, 0.0), &node), 300.0);
        let near = NodeState::sensor(1, 100.0);
        assert_eq!(relative_distance(&EgoState::new(400.0, 0.0), &near), 300.0);
    }

    #[test]
    fn coverage_boundaries() {
        let s = NodeState::sensor(1, 100.0);
        assert!(in_coverage(&EgoState::new(100.0, 0.0), &s));
        assert!(in_coverage(&EgoState::new(0.0, 0.0), &s));
        let v = NodeState::vehicle(2, 301.0, 1, 20.0);
        assert!(!in_coverage(&EgoState::new(0.0, 20.0), &v));
    }

    #[test]
    fn scar_cases() {
        let ego = EgoState::new(0.0, 15.0);
        assert_eq!(
            scar(&ego, &NodeState::vehicle(1, 0.0, 1, 15.0), CoverageExtent::Diameter),
            0.0
        );
        let s = scar(&ego, &NodeState::sensor(1, 0.0), CoverageExtent::Diameter);
        assert!((s - 0.075).abs() < 1e-12);
        let v = NodeState::vehicle(1, 0.0, 1, 15.0).with_coverage(300.0);
        let ego45 = EgoState::new(0.0, 45.0);
        assert!((scar(&ego45, &v, CoverageExtent::Diameter) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn ring_distance_wraps() {
        let road = Road::ring(1000.0);
        assert_eq!(road.distance(950.0, 50.0), 100.0);
        assert_eq!(road.wrap(1010.0), 10.0);
        assert_eq!(road.wrap(-10.0), 990.0);
    }

    #[test]
    fn profile_interpolates() {
        let p = SpeedProfile {
            points: vec![(0.0, 15.0), (1000.0, 30.0)],
        };
        assert_eq!(p.speed_at(-5.0), Some(15.0));
        assert_eq!(p.speed_at(500.0), Some(22.5));
        assert_eq!(p.speed_at(5000.0), Some(30.0));
    }

    fn arb_world() -> impl Strategy<Value = (World, u64)> {
        (
            -2000.0f64..2000.0,
            15.0f64..30.0,
            prop::collection::vec((-2000.0f64..2000.0, prop::bool::ANY, 15.0f64..30.0), 1..8),
            any::<u64>(),
        )
            .prop_map(|(ego_pos, ego_speed, nodes, seed)| {
                let nodes = nodes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (pos, is_sensor, v))| {
                        if is_sensor {
                            NodeState::sensor(i as NodeId, pos)
                        } else {
                            NodeState::vehicle(i as NodeId, pos, 1, v)
                        }
                    })
                    .collect();
                (
                    World::new(EgoState::new(ego_pos, ego_speed), nodes, MobilityConfig::default()),
                    seed,
                )
            })
    }

    proptest! {
        #[test]
        fn stepping_is_deterministic((world, seed) in arb_world(), steps in 1usize..40) {
            let mut a = world.clone();
            let mut b = world;
            let mut ra = ChaCha8Rng::seed_from_u64(seed);
            let mut rb = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..steps {
                a.step(333.0, &mut ra);
                b.step(333.0, &mut rb);
            }
            prop_assert_eq!(a, b);
        }

        #[test]
        fn distance_and_speed_symmetric((world, _seed) in arb_world()) {
            for n in &world.nodes {
                let d = relative_distance(&world.ego, n);
                let flipped = EgoState::new(n.position, n.speed);
                let back = NodeState::vehicle(0, world.ego.position, 0, world.ego.speed);
                prop_assert!(d >= 0.0);
                prop_assert_eq!(d, relative_distance(&flipped, &back));
                prop_assert_eq!(relative_speed(&world.ego, n), relative_speed(&flipped, &back));
                prop_assert!(relative_speed(&world.ego, n) >= 0.0);
            }
        }

        #[test]
        fn shrinking_radius_is_monotone(d in 0.0f64..800.0, r in 1.0f64..500.0, shrink in 0.0f64..1.0) {
            let ego = EgoState::new(0.0, 20.0);
            let big = NodeState::sensor(1, d).with_coverage(r);
            let small = NodeState::sensor(1, d).with_coverage(r * shrink.max(1e-6));
            if !in_coverage(&ego, &big) {
                prop_assert!(!in_coverage(&ego, &small));
            }
        }

        #[test]
        fn time_in_coverage_bounded_by_scar(speed in 15.0f64..30.0, radius in 50.0f64..400.0) {
            let dt = 100.0;
            let node = NodeState::sensor(1, 0.0).with_coverage(radius);
            let mut w = World::new(EgoState::new(-radius, speed), vec![node], still());
            let s = scar(&w.ego, &w.nodes[0], CoverageExtent::Diameter);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut inside_ms = 0.0;
            while w.ego.position <= radius + speed {
                if w.covers(&w.nodes[0]) {
                    inside_ms += dt;
                }
                w.step(dt, &mut rng);
            }
            prop_assert!(inside_ms / 1000.0 <= 1.0 / s + dt / 1000.0 + 1e-9);
        }
    }
}

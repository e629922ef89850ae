use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, Scenario};
use crate::aggregator::EventStream;
use crate::channel::{Link, TraceRow, UpdateSchedule};
use crate::kinematics::{relative_speed, NodeId, World};

/// Simulates the world for `duration_ms` and returns every delivered update
/// together with the per-node AoI trace. No policy is involved, so the same
/// stream can be replayed under each of them.
pub fn generate_stream(scenario: &Scenario, seed: u64, duration_ms: f64) -> Result<EventStream, HarnessError> {
    let schedule = UpdateSchedule::new(scenario.q, duration_ms)?;
    let cycles = schedule.total_cycles();
    if cycles == 0 {
        return Err(HarnessError::Scenario("duration shorter than one update cycle".into()));
    }
    // Separate streams keep mobility and channel draws independent.
    let mut world_rng = ChaCha8Rng::seed_from_u64(seed);
    world_rng.set_stream(1);
    let mut chan_rng = ChaCha8Rng::seed_from_u64(seed);
    chan_rng.set_stream(2);

    let nodes = scenario.nodes.iter().map(|n| n.to_state()).collect();
    let mut world = World::new(scenario.ego_state(), nodes, scenario.mobility_config());
    let delay = &scenario.delay;
    let kinds: BTreeMap<NodeId, _> = scenario.nodes.iter().map(|n| (n.id, n.kind)).collect();

    let mut messages = Vec::new();
    let mut trace = Vec::with_capacity(cycles as usize * scenario.nodes.len());
    let mut ego_speed = Vec::with_capacity(cycles as usize);
    let mut last_origin: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut episode_start: BTreeMap<NodeId, f64> = BTreeMap::new();

    for m in 1..=cycles {
        if m > 1 {
            world.step(schedule.period_ms(), &mut world_rng);
        }
        let request = schedule.request_time(m);
        ego_speed.push(world.ego.speed);
        for node in &world.nodes {
            let link = Link {
                distance: world.distance_to(node),
                relative_speed: relative_speed(&world.ego, node),
            };
            let sent = delay.originate(node, link, m, request, &mut chan_rng)?;
            let (aoi, delivered) = match sent {
                Some(msg) => {
                    let mut msg = delay.deliver(msg, node.coverage_radius, &mut chan_rng);
                    let aoi = delay.aoi(&mut msg)?;
                    last_origin.insert(node.id, msg.originated_at);
                    messages.push(msg);
                    (Some(aoi), true)
                }
                None => (last_origin.get(&node.id).map(|t| request - t), false),
            };
            let contact_ms = if delivered {
                let start = *episode_start.entry(node.id).or_insert(request);
                Some(request - start)
            } else {
                episode_start.remove(&node.id);
                None
            };
            trace.push(TraceRow {
                time_ms: request,
                node_id: node.id,
                cycle: m,
                aoi_ms: aoi,
                kind: node.kind,
                rel_speed_mps: link.relative_speed,
                contact_ms,
                delivered,
            });
        }
    }
    Ok(EventStream::new(schedule, cycles, messages, kinds, ego_speed, trace))
}

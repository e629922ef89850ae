//! Broadcast update generation, the delay model, and AoI accounting.
//!
//! AoI of one update is `T_req + d/c - T_orig` evaluated verbatim. Pure
//! propagation over a few hundred meters is microseconds, so the delay model
//! adds an origination offset (the sample was taken before the request), an
//! access delay with jitter, and an edge term that grows as the source nears
//! the rim of its coverage disc. The edge term ages the sample and delays its
//! arrival by the same amount.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{NodeId, NodeKind, NodeState};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("update cycle must be >= 1, got {0}")]
    InvalidCycle(u64),
    #[error("update from node {node} cycle {cycle} has not been delivered")]
    NotDelivered { node: NodeId, cycle: u64 },
    #[error("negative AoI {aoi} ms for node {node} cycle {cycle}: origination after request")]
    NegativeAoi { node: NodeId, cycle: u64, aoi: f64 },
    #[error("AoI series is empty")]
    EmptySeries,
    #[error("cycle count must be positive")]
    ZeroCycles,
    #[error("cycle count {cycles} is smaller than the series length {len}")]
    CyclesBelowSeries { cycles: usize, len: usize },
    #[error("invalid delay model: {0}")]
    InvalidDelayModel(String),
    #[error("invalid update schedule: {0}")]
    InvalidSchedule(String),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One broadcast information update `U_n^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMessage {
    pub source_id: NodeId,
    pub source_kind: NodeKind,
    pub cycle: u64,
    /// `T_n^m`, when the carried information was sampled.
    pub originated_at: f64,
    /// `T_mReq^m`, when the ego asked for cycle `m`.
    pub requested_at: f64,
    /// `d_n^m` in meters.
    pub distance_at_send: f64,
    /// Relative speed the ego derives from the message's kinematic fields.
    pub relative_speed: f64,
    pub arrival_at: Option<f64>,
    pub aoi: Option<f64>,
}

impl UpdateMessage {
    pub fn arrival(&self) -> f64 {
        self.arrival_at.unwrap_or(f64::INFINITY)
    }

    pub fn aoi_ms(&self) -> f64 {
        self.aoi.unwrap_or(f64::INFINITY)
    }
}

/// Geometry snapshot of the ego-source link at request time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub distance: f64,
    pub relative_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayModel {
    /// `c` in m/s.
    pub propagation_speed: f64,
    pub access_delay_mean: f64,
    /// Half-width of the uniform access jitter.
    pub access_delay_jitter: f64,
    pub origination_offset_min: f64,
    pub origination_offset_max: f64,
    /// Extra age and delay at the very rim of the coverage disc.
    pub edge_delay: f64,
    /// Steepness of the edge term, `(d / radius)^edge_exponent`.
    pub edge_exponent: f64,
    /// When positive, the edge term scales with
    /// `(relative_speed / this)^edge_speed_exponent`: faster links suffer
    /// more retransmissions near the rim.
    pub edge_reference_speed: f64,
    pub edge_speed_exponent: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            propagation_speed: 3.0e8,
            access_delay_mean: 40.0,
            access_delay_jitter: 20.0,
            origination_offset_min: 0.0,
            origination_offset_max: 250.0,
            edge_delay: 900.0,
            edge_exponent: 6.0,
            edge_reference_speed: 0.0,
            edge_speed_exponent: 1.0,
        }
    }
}

impl DelayModel {
    /// Zero-delay model: only propagation remains.
    pub fn ideal() -> Self {
        Self {
            access_delay_mean: 0.0,
            access_delay_jitter: 0.0,
            origination_offset_min: 0.0,
            origination_offset_max: 0.0,
            edge_delay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |msg: &str| Err(ChannelError::InvalidDelayModel(msg.to_string()));
        if !(self.propagation_speed > 0.0) {
            return bad("propagation_speed must be positive");
        }
        for (name, v) in [
            ("access_delay_mean", self.access_delay_mean),
            ("access_delay_jitter", self.access_delay_jitter),
            ("origination_offset_min", self.origination_offset_min),
            ("origination_offset_max", self.origination_offset_max),
            ("edge_delay", self.edge_delay),
            ("edge_exponent", self.edge_exponent),
            ("edge_reference_speed", self.edge_reference_speed),
            ("edge_speed_exponent", self.edge_speed_exponent),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be a finite value >= 0"));
            }
        }
        if self.access_delay_jitter > self.access_delay_mean {
            return bad("access_delay_jitter must not exceed access_delay_mean");
        }
        if self.origination_offset_min > self.origination_offset_max {
            return bad("origination_offset_min must not exceed origination_offset_max");
        }
        Ok(())
    }

    /// Propagation delay `d / c` in milliseconds.
    pub fn propagation_ms(&self, distance: f64) -> f64 {
        distance / self.propagation_speed * 1000.0
    }

    pub fn edge_term(&self, distance: f64, radius: f64, relative_speed: f64) -> f64 {
        if self.edge_delay == 0.0 || radius <= 0.0 {
            return 0.0;
        }
        let speed_factor = if self.edge_reference_speed > 0.0 {
            (relative_speed.abs() / self.edge_reference_speed).powf(self.edge_speed_exponent)
        } else {
            1.0
        };
        speed_factor * self.edge_delay * (distance / radius).min(1.0).powf(self.edge_exponent)
    }

    /// Creates the cycle-`cycle` update of `node`.
    ///
    /// Returns `Ok(None)` when the ego is outside the node's coverage: a
    /// silent source produces nothing.
    pub fn originate<R: Rng + ?Sized>(
        &self,
        node: &NodeState,
        link: Link,
        cycle: u64,
        request_time: f64,
        rng: &mut R,
    ) -> Result<Option<UpdateMessage>, ChannelError> {
        if cycle == 0 {
            return Err(ChannelError::InvalidCycle(cycle));
        }
        if link.distance > node.coverage_radius {
            return Ok(None);
        }
        let offset = uniform(rng, self.origination_offset_min, self.origination_offset_max)
            + self.edge_term(link.distance, node.coverage_radius, link.relative_speed);
        Ok(Some(UpdateMessage {
            source_id: node.id,
            source_kind: node.kind,
            cycle,
            originated_at: request_time - offset,
            requested_at: request_time,
            distance_at_send: link.distance,
            relative_speed: link.relative_speed,
            arrival_at: None,
            aoi: None,
        }))
    }

    /// Fills `arrival_at`. `radius` is the sender's coverage radius, used by
    /// the edge term.
    pub fn deliver<R: Rng + ?Sized>(&self, mut msg: UpdateMessage, radius: f64, rng: &mut R) -> UpdateMessage {
        let jitter = uniform(rng, -self.access_delay_jitter, self.access_delay_jitter);
        let access = (self.access_delay_mean + jitter).max(0.0);
        msg.arrival_at = Some(
            msg.requested_at
                + self.propagation_ms(msg.distance_at_send)
                + access
                + self.edge_term(msg.distance_at_send, radius, msg.relative_speed),
        );
        msg
    }

    /// AoI of a delivered message; also stored into `msg.aoi`.
    pub fn aoi(&self, msg: &mut UpdateMessage) -> Result<f64, ChannelError> {
        if msg.arrival_at.is_none() {
            return Err(ChannelError::NotDelivered {
                node: msg.source_id,
                cycle: msg.cycle,
            });
        }
        let value = aoi_value(
            msg.requested_at,
            msg.originated_at,
            msg.distance_at_send,
            self.propagation_speed,
        );
        if value < 0.0 {
            return Err(ChannelError::NegativeAoi {
                node: msg.source_id,
                cycle: msg.cycle,
                aoi: value,
            });
        }
        msg.aoi = Some(value);
        Ok(value)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// `T_req + d/c - T_orig` in ms, with `c` in m/s.
pub fn aoi_value(requested_at: f64, originated_at: f64, distance: f64, c: f64) -> f64 {
    requested_at + distance / c * 1000.0 - originated_at
}

/// Mean AoI over a fixed number of cycles. Cycles without a delivered update
/// add nothing to the sum but stay in the denominator.
pub fn mean_aoi(series: &[f64], cycles: usize) -> Result<f64, ChannelError> {
    if cycles == 0 {
        return Err(ChannelError::ZeroCycles);
    }
    if series.is_empty() {
        return Err(ChannelError::EmptySeries);
    }
    if cycles < series.len() {
        return Err(ChannelError::CyclesBelowSeries {
            cycles,
            len: series.len(),
        });
    }
    Ok(series.iter().sum::<f64>() / cycles as f64)
}

/// Percentage of updates whose AoI is at or below `threshold`.
pub fn aoi_satisfaction_rate(series: &[f64], threshold: f64) -> Result<f64, ChannelError> {
    if series.is_empty() {
        return Err(ChannelError::EmptySeries);
    }
    let ok = series.iter().filter(|&&t| t <= threshold).count();
    Ok(100.0 * ok as f64 / series.len() as f64)
}

/// Refresh requirement of the ego application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    /// Updates per second.
    pub q: f64,
    pub total_time_ms: f64,
    pub max_aoi_ms: f64,
}

impl UpdateSchedule {
    pub fn new(q: f64, total_time_ms: f64) -> Result<Self, ChannelError> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(ChannelError::InvalidSchedule(format!("q must be > 0, got {q}")));
        }
        if !(total_time_ms > 0.0) {
            return Err(ChannelError::InvalidSchedule(format!(
                "total time must be > 0, got {total_time_ms}"
            )));
        }
        Ok(Self {
            q,
            total_time_ms,
            max_aoi_ms: 1000.0 / q,
        })
    }

    pub fn period_ms(&self) -> f64 {
        1000.0 / self.q
    }

    /// `QT`: number of update cycles in the run.
    pub fn total_cycles(&self) -> u64 {
        (self.q * self.total_time_ms / 1000.0 + 1e-9).floor() as u64
    }

    /// Request time of cycle `m` (1-based).
    pub fn request_time(&self, m: u64) -> f64 {
        (m.saturating_sub(1)) as f64 * self.period_ms()
    }
}

/// One row of the per-node AoI trace used for predictor training.
///
/// The first four columns are the core trace; the rest carry the predictor
/// features. `aoi_ms` is the age of the freshest information held from the
/// node at request time and is empty before first contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_ms: f64,
    pub node_id: NodeId,
    pub cycle: u64,
    pub aoi_ms: Option<f64>,
    pub kind: NodeKind,
    pub rel_speed_mps: f64,
    /// Time since the current contact episode began; empty outside one.
    pub contact_ms: Option<f64>,
    /// Whether the node's update for this cycle was received.
    pub delivered: bool,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRow>, ChannelError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

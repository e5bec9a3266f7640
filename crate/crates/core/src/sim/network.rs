//! Fluid network model: each direction of the server NIC is a medium shared
//! fairly by the flows (one per node) that currently have data queued.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{duration_ms, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    /// Bytes/second available to one node.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("link is down")]
pub struct LinkDown;

/// Arrival delay of one message of `msg_size` bytes given the node's link and
/// its current share of the server NIC.
pub fn deliver(msg_size: u64, link: &LinkSpec, link_up: bool, server_share: f64) -> Result<Duration, LinkDown> {
    if !link_up {
        return Err(LinkDown);
    }
    if msg_size == 0 {
        return Ok(link.latency);
    }
    let rate = link.bandwidth.min(server_share);
    Ok(link.latency + Duration::from_secs_f64(msg_size as f64 / rate))
}

/// Equal split of `capacity` among `active` flows.
pub fn fair_share(capacity: f64, active: usize) -> f64 {
    capacity / active.max(1) as f64
}

#[derive(Debug)]
struct Pending<T> {
    remaining: f64,
    item: T,
}

#[derive(Debug)]
pub struct Completed<T> {
    pub flow: usize,
    pub item: T,
    /// The flow's queue is empty after this message.
    pub drained: bool,
}

/// Processor-sharing medium. Every backlogged flow transmits its head message
/// at `min(flow_cap, capacity / backlogged)`; messages within a flow are FIFO.
///
/// The caller must call [`SharedMedium::advance`] at every instant returned by
/// [`SharedMedium::next_completion`] and before each `enqueue`, so rates stay
/// constant between calls.
#[derive(Debug)]
pub struct SharedMedium<T> {
    capacity: f64,
    flow_cap: f64,
    flows: BTreeMap<usize, VecDeque<Pending<T>>>,
    last: Timestamp,
    bytes_sent: f64,
}

impl<T> SharedMedium<T> {
    pub fn new(capacity: f64, flow_cap: f64) -> Self {
        Self { capacity, flow_cap, flows: BTreeMap::new(), last: Timestamp::ZERO, bytes_sent: 0.0 }
    }

    pub fn active_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn rate(&self) -> f64 {
        self.flow_cap.min(fair_share(self.capacity, self.flows.len()))
    }

    pub fn bytes_sent(&self) -> f64 {
        self.bytes_sent
    }

    pub fn is_idle(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn backlog(&self, flow: usize) -> usize {
        self.flows.get(&flow).map_or(0, |q| q.len())
    }

    /// Moves time forward and returns the messages that finished transmitting.
    pub fn advance(&mut self, now: Timestamp) -> Vec<Completed<T>> {
        let dt = now.saturating_since(self.last).as_secs_f64();
        self.last = self.last.max(now);
        let mut done = Vec::new();
        if self.flows.is_empty() {
            return done;
        }
        let progress = dt * self.rate();
        for q in self.flows.values_mut() {
            if let Some(head) = q.front_mut() {
                let used = progress.min(head.remaining);
                head.remaining -= used;
                self.bytes_sent += used;
            }
        }
        let flows: Vec<usize> = self.flows.keys().copied().collect();
        for flow in flows {
            let q = self.flows.get_mut(&flow).expect("listed");
            while q.front().is_some_and(|h| h.remaining <= 1e-6) {
                let head = q.pop_front().expect("checked");
                done.push(Completed { flow, item: head.item, drained: q.is_empty() });
            }
            if q.is_empty() {
                self.flows.remove(&flow);
            }
        }
        done
    }

    pub fn enqueue(&mut self, now: Timestamp, flow: usize, size: u64, item: T) {
        debug_assert!(now >= self.last, "advance before enqueue");
        self.last = self.last.max(now);
        self.flows.entry(flow).or_default().push_back(Pending { remaining: size as f64, item });
    }

    /// Drops everything queued on a flow.
    pub fn clear_flow(&mut self, flow: usize) -> usize {
        self.flows.remove(&flow).map_or(0, |q| q.len())
    }

    /// When the next head-of-line message finishes, rounded up to the next
    /// microsecond.
    pub fn next_completion(&self) -> Option<Timestamp> {
        let rate = self.rate();
        let min_remaining =
            self.flows.values().filter_map(|q| q.front()).map(|h| h.remaining).fold(f64::INFINITY, f64::min);
        if !min_remaining.is_finite() {
            return None;
        }
        let micros = (min_remaining / rate * 1e6).ceil().max(0.0) as u64;
        Some(Timestamp::from_micros(self.last.as_micros() + micros))
    }
}

//! Per-link delay sampling.

use endorsedb_core::{SimDuration, SimTime};
use rand::Rng;
use rand_distr::{Distribution, Exp};

const FANOUT: usize = 4;

#[derive(Clone, Debug)]
pub struct LatencyModel {
    exp: Exp<f64>,
    /// Global stabilization time; from then on samples are clipped to `cap`.
    gst: SimTime,
    cap: SimDuration,
    multi_hop: bool,
}

impl LatencyModel {
    pub fn new(mean: SimDuration, gst: SimTime, cap: SimDuration, multi_hop: bool) -> Self {
        assert!(mean.0 > 0, "mean latency must be positive");
        LatencyModel { exp: Exp::new(1.0 / mean.0 as f64).expect("positive rate"), gst, cap, multi_hop }
    }

    /// One link traversal, at least one tick.
    pub fn sample<R: Rng>(&self, rng: &mut R, now: SimTime) -> SimDuration {
        let us = self.exp.sample(rng).round() as i64;
        let d = SimDuration(us.max(1));
        if now >= self.gst && d > self.cap {
            self.cap
        } else {
            d
        }
    }

    /// Delays for one broadcast to `recipients` nodes, indexed by recipient position.
    ///
    /// Direct mode samples one link per recipient. Multi-hop mode relays along a
    /// random tree of fanout four rooted at the sender.
    pub fn broadcast<R: Rng>(&self, rng: &mut R, now: SimTime, recipients: usize) -> Vec<SimDuration> {
        if !self.multi_hop {
            return (0..recipients).map(|_| self.sample(rng, now)).collect();
        }
        let mut order: Vec<usize> = (0..recipients).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        // tree slot 0 is the sender; slot k+1 holds order[k]
        let mut at = vec![SimDuration::ZERO; recipients + 1];
        let mut out = vec![SimDuration::ZERO; recipients];
        for (k, who) in order.iter().enumerate() {
            let slot = k + 1;
            let parent = (slot - 1) / FANOUT;
            at[slot] = at[parent] + self.sample(rng, now);
            let total = if now >= self.gst && at[slot] > self.cap { self.cap } else { at[slot] };
            out[*who] = total;
        }
        out
    }
}

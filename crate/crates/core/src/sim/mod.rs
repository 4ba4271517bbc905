//! Deterministic discrete-event substrate.
//!
//! A [`Scheduler`] owns virtual time and the pending-event queue; a
//! [`Process`] reacts to events and schedules more. Everything that happens in
//! a run is a pure function of the topology, chaos schedule, seed and
//! workload, so two runs with equal inputs produce byte-identical traces.

mod chaos;
mod network;
mod rng;
mod topology;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

pub use chaos::{
    up_time, ChaosEvent, ChaosSchedule, Fault, FaultKind, FaultScope, DEFAULT_RESTART_MS,
};
pub use network::{Delivery, Envelope, Network, WireRecord};
pub use rng::SimRng;
pub use topology::{
    DatacenterSpec, DcId, LinkEntry, NodeId, NodeSpec, Tier, Topology, TopologyFile,
};

/// Virtual time in milliseconds.
pub type Millis = u64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {at}ms, clock is already at {now}ms")]
    PastTime { at: Millis, now: Millis },
    #[error("simulation has ended")]
    SimEnded,
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid chaos schedule: {0}")]
    Chaos(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Entry<E> {
    at: Millis,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Virtual clock plus time-ordered event queue. Events at equal times fire in
/// insertion order.
pub struct Scheduler<E> {
    now: Millis,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    cancelled: HashSet<u64>,
    ended: bool,
    fired: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            ended: false,
            fired: 0,
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, at: Millis, event: E) -> Result<EventHandle, SimError> {
        if self.ended {
            return Err(SimError::SimEnded);
        }
        if at < self.now {
            return Err(SimError::PastTime { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Entry { at, seq, event }));
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` ms from now. Never fails while the run is live.
    pub fn schedule_in(&mut self, delay: Millis, event: E) -> EventHandle {
        let at = self.now.saturating_add(delay);
        match self.schedule(at, event) {
            Ok(h) => h,
            // Handlers only run while the loop is live, so the only failure
            // mode is scheduling from outside after `end()`.
            Err(_) => EventHandle(u64::MAX),
        }
    }

    pub fn cancel(&mut self, handle: EventHandle) {
        if handle.0 < self.next_seq {
            self.cancelled.insert(handle.0);
        }
    }

    /// Pops the next event due at or before `until`, advancing the clock.
    pub fn pop_until(&mut self, until: Millis) -> Option<(Millis, E)> {
        loop {
            let due = matches!(self.queue.peek(), Some(Reverse(e)) if e.at <= until);
            if !due {
                return None;
            }
            let Reverse(entry) = self.queue.pop()?;
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            self.now = entry.at;
            self.fired += 1;
            return Some((entry.at, entry.event));
        }
    }

    /// Advances the clock to `until` without firing anything.
    pub fn advance_to(&mut self, until: Millis) {
        self.now = self.now.max(until);
    }

    /// Closes the run; later `schedule` calls fail with [`SimError::SimEnded`].
    pub fn end(&mut self) {
        self.ended = true;
    }
}

/// An event-driven participant in a simulation.
pub trait Process {
    type Event;

    fn handle(&mut self, sched: &mut Scheduler<Self::Event>, event: Self::Event);

    /// Trace label for an event; `None` keeps it out of the trace.
    fn describe(&self, _event: &Self::Event) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at: Millis,
    pub label: String,
}

/// Ordered record of fired events.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub entries: Vec<TraceEntry>,
    pub events_fired: u64,
    pub end_time: Millis,
}

impl SimTrace {
    /// One JSON object per line; the canonical byte form used to compare runs.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entries serialize"));
            out.push('\n');
        }
        out
    }
}

/// Runs every event due at or before `until`, then leaves the clock at `until`.
pub fn run<P: Process>(
    process: &mut P,
    sched: &mut Scheduler<P::Event>,
    until: Millis,
) -> SimTrace {
    let mut trace = SimTrace::default();
    while let Some((at, event)) = sched.pop_until(until) {
        if let Some(label) = process.describe(&event) {
            trace.entries.push(TraceEntry { at, label });
        }
        process.handle(sched, event);
        trace.events_fired += 1;
    }
    sched.advance_to(until);
    trace.end_time = sched.now();
    trace
}

/// Like [`run`] but without building a trace.
pub fn run_quiet<P: Process>(
    process: &mut P,
    sched: &mut Scheduler<P::Event>,
    until: Millis,
) -> u64 {
    let mut n = 0;
    while let Some((_, event)) = sched.pop_until(until) {
        process.handle(sched, event);
        n += 1;
    }
    sched.advance_to(until);
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Recorder {
        seen: Vec<(Millis, &'static str)>,
        echo: bool,
    }

    impl Process for Recorder {
        type Event = &'static str;
        fn handle(&mut self, sched: &mut Scheduler<&'static str>, ev: &'static str) {
            self.seen.push((sched.now(), ev));
            if self.echo && ev == "ping" {
                sched.schedule_in(3, "pong");
            }
        }
        fn describe(&self, ev: &&'static str) -> Option<String> {
            Some(ev.to_string())
        }
    }

    #[test]
    fn single_event_fires_at_time() {
        let mut s = Scheduler::new();
        let mut p = Recorder {
            seen: vec![],
            echo: true,
        };
        s.schedule(s.now() + 5, "ping").unwrap();
        let trace = run(&mut p, &mut s, 100);
        assert_eq!(p.seen, vec![(5, "ping"), (8, "pong")]);
        assert_eq!(trace.events_fired, 2);
        assert_eq!(s.now(), 100);
    }

    #[test]
    fn fifo_tie_break() {
        let mut s = Scheduler::new();
        let mut p = Recorder {
            seen: vec![],
            echo: false,
        };
        s.schedule(10, "A").unwrap();
        s.schedule(10, "B").unwrap();
        s.schedule(9, "C").unwrap();
        run(&mut p, &mut s, 10);
        assert_eq!(p.seen, vec![(9, "C"), (10, "A"), (10, "B")]);
    }

    #[test]
    fn past_and_ended_are_errors() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.advance_to(50);
        assert_eq!(
            s.schedule(49, ()),
            Err(SimError::PastTime { at: 49, now: 50 })
        );
        assert!(s.schedule(50, ()).is_ok());
        s.end();
        assert_eq!(s.schedule(60, ()), Err(SimError::SimEnded));
    }

    #[test]
    fn empty_run_and_clock() {
        let mut s: Scheduler<&'static str> = Scheduler::new();
        assert_eq!(s.now(), 0);
        let mut p = Recorder {
            seen: vec![],
            echo: false,
        };
        let trace = run(&mut p, &mut s, 100);
        assert!(trace.entries.is_empty());
        assert_eq!(s.now(), 100);
    }

    #[test]
    fn cancel_suppresses_event() {
        let mut s = Scheduler::new();
        let mut p = Recorder {
            seen: vec![],
            echo: false,
        };
        let h = s.schedule(4, "x").unwrap();
        s.schedule(5, "y").unwrap();
        s.cancel(h);
        run(&mut p, &mut s, 10);
        assert_eq!(p.seen, vec![(5, "y")]);
    }

    #[test]
    fn events_beyond_horizon_stay_queued() {
        let mut s = Scheduler::new();
        let mut p = Recorder {
            seen: vec![],
            echo: false,
        };
        s.schedule(20, "late").unwrap();
        run(&mut p, &mut s, 10);
        assert!(p.seen.is_empty());
        run(&mut p, &mut s, 30);
        assert_eq!(p.seen, vec![(20, "late")]);
    }
}

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sim::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Read,
    Write,
    Increment,
}

/// One client operation. `version` orders writes to a key: a log index for
/// replicated-log groups, an LWW stamp otherwise. An empty version is the
/// initial, never-written state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryOp {
    pub op: OpKind,
    pub key: String,
    pub client: String,
    pub invoke: Millis,
    pub ack: Millis,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<Vec<u64>>,
    #[serde(default = "yes")]
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub ops: Vec<HistoryOp>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HistoryError {
    #[error("malformed history at line {line}: {reason}")]
    MalformedHistory { line: usize, reason: String },
    #[error("unknown check `{0}`")]
    UnknownCheck(String),
}

impl History {
    pub fn push(&mut self, op: HistoryOp) {
        self.ops.push(op);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            out.push_str(&serde_json::to_string(op).expect("history serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HistoryError> {
        let mut ops = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| HistoryError::MalformedHistory {
                line: i + 1,
                reason,
            };
            let op: HistoryOp = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if op.ok && op.ack < op.invoke {
                return Err(bad("ack before invoke".into()));
            }
            ops.push(op);
        }
        Ok(Self { ops })
    }

    /// Operations acknowledged in `[from, to)` that match `filter`.
    pub fn acked_in(&self, from: Millis, to: Millis, filter: impl Fn(&HistoryOp) -> bool) -> usize {
        self.ops
            .iter()
            .filter(|o| o.ok && o.ack >= from && o.ack < to && filter(o))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    LinearizableLite,
    Ryw,
    Staleness { delta_ms: Millis },
    ExactlyOnce,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckKind::LinearizableLite => write!(f, "linearizable-lite"),
            CheckKind::Ryw => write!(f, "ryw"),
            CheckKind::Staleness { delta_ms } => write!(f, "staleness({delta_ms}ms)"),
            CheckKind::ExactlyOnce => write!(f, "exactly-once"),
        }
    }
}

impl FromStr for CheckKind {
    type Err = HistoryError;

    /// Accepts `linearizable-lite`, `ryw`, `exactly-once`, `staleness:<ms>`
    /// and `staleness(<ms>ms)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || HistoryError::UnknownCheck(s.to_string());
        match s {
            "linearizable-lite" | "linearizable" => Ok(Self::LinearizableLite),
            "ryw" => Ok(Self::Ryw),
            "exactly-once" | "exactly-once(counter)" => Ok(Self::ExactlyOnce),
            _ => {
                let rest = s.strip_prefix("staleness").ok_or_else(unknown)?;
                let digits = rest
                    .trim_start_matches([':', '(', '='])
                    .trim_end_matches(')')
                    .trim_end_matches("ms");
                let delta_ms = digits.parse().map_err(|_| unknown())?;
                Ok(Self::Staleness { delta_ms })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub checked_ops: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_staleness_ms: Option<Millis>,
}

pub fn check(history: &History, kind: CheckKind) -> Verdict {
    let mut v = match kind {
        CheckKind::LinearizableLite => linearizable_lite(history),
        CheckKind::Ryw => ryw(history),
        CheckKind::Staleness { delta_ms } => staleness(history, delta_ms),
        CheckKind::ExactlyOnce => exactly_once(history),
    };
    v.check = kind.to_string();
    v
}

fn verdict(checked_ops: usize, counterexample: Option<String>) -> Verdict {
    Verdict {
        check: String::new(),
        passed: counterexample.is_none(),
        checked_ops,
        counterexample,
        max_staleness_ms: None,
    }
}

fn describe(o: &HistoryOp) -> String {
    format!(
        "{:?} {}={} by {} [{}..{}] version {:?}",
        o.op, o.key, o.value, o.client, o.invoke, o.ack, o.version
    )
}

fn version(o: &HistoryOp) -> &[u64] {
    o.version.as_deref().unwrap_or(&[])
}

fn by_key<'a>(history: &'a History, kinds: &[OpKind]) -> BTreeMap<&'a str, Vec<&'a HistoryOp>> {
    let mut m: BTreeMap<&str, Vec<&HistoryOp>> = BTreeMap::new();
    for o in &history.ops {
        if kinds.contains(&o.op) {
            m.entry(o.key.as_str()).or_default().push(o);
        }
    }
    m
}

/// Tracks the operation holding the largest version seen so far.
struct RunningMax<'a>(Option<&'a HistoryOp>);

impl<'a> RunningMax<'a> {
    fn add(&mut self, o: &'a HistoryOp) {
        if self.0.is_none_or(|m| version(o) > version(m)) {
            self.0 = Some(o);
        }
    }
}

/// Real-time order checks over per-key versions. Reads must name a write
/// invoked before the read returned; anything completed before an operation
/// started must be ordered before it. Failed writes may or may not have
/// taken effect and only constrain reads that return them.
fn linearizable_lite(history: &History) -> Verdict {
    let mut checked = 0;
    for ops in by_key(history, &[OpKind::Read, OpKind::Write]).values() {
        let writes: Vec<&HistoryOp> = ops
            .iter()
            .copied()
            .filter(|o| o.op == OpKind::Write)
            .collect();
        let reads: Vec<&HistoryOp> = ops
            .iter()
            .copied()
            .filter(|o| o.op == OpKind::Read && o.ok)
            .collect();
        checked += writes.len() + reads.len();
        let by_value: BTreeMap<String, &HistoryOp> =
            writes.iter().map(|w| (w.value.to_string(), *w)).collect();
        let mut resolved: Vec<(&HistoryOp, Vec<u64>)> = Vec::new();
        for r in &reads {
            if version(r).is_empty() {
                continue;
            }
            let Some(w) = by_value.get(&r.value.to_string()) else {
                return verdict(
                    checked,
                    Some(format!("read of a value nobody wrote: {}", describe(r))),
                );
            };
            if w.ok && version(w) != version(r) {
                return verdict(
                    checked,
                    Some(format!(
                        "version mismatch: {} vs {}",
                        describe(w),
                        describe(r)
                    )),
                );
            }
            if w.invoke > r.ack {
                return verdict(
                    checked,
                    Some(format!(
                        "read returned a later write: {} then {}",
                        describe(r),
                        describe(w)
                    )),
                );
            }
            resolved.push((w, version(r).to_vec()));
        }
        // Everything ordered before an op, by completion time.
        let mut done: Vec<&HistoryOp> = writes
            .iter()
            .copied()
            .filter(|w| w.ok)
            .chain(reads.iter().copied())
            .collect();
        done.sort_by_key(|o| (o.ack, o.invoke));
        let mut starts: Vec<&HistoryOp> = writes
            .iter()
            .copied()
            .filter(|w| w.ok)
            .chain(reads.iter().copied())
            .collect();
        starts.sort_by_key(|o| (o.invoke, o.ack));
        let mut max = RunningMax(None);
        let mut i = 0;
        for o in starts {
            while i < done.len() && done[i].ack < o.invoke {
                max.add(done[i]);
                i += 1;
            }
            let Some(m) = max.0 else { continue };
            let bad = match o.op {
                OpKind::Write => version(o) <= version(m),
                _ => version(o) < version(m),
            };
            if bad {
                return verdict(
                    checked,
                    Some(format!("{} completed before {}", describe(m), describe(o))),
                );
            }
        }
    }
    verdict(checked, None)
}

fn ryw(history: &History) -> Verdict {
    let mut per_client: BTreeMap<(&str, &str), Vec<&HistoryOp>> = BTreeMap::new();
    for o in history
        .ops
        .iter()
        .filter(|o| o.ok && o.op != OpKind::Increment)
    {
        per_client
            .entry((o.client.as_str(), o.key.as_str()))
            .or_default()
            .push(o);
    }
    let mut checked = 0;
    for ops in per_client.values_mut() {
        ops.sort_by_key(|o| (o.invoke, o.ack));
        let mut writes: Vec<&HistoryOp> = ops
            .iter()
            .copied()
            .filter(|o| o.op == OpKind::Write)
            .collect();
        writes.sort_by_key(|o| o.ack);
        let mut max = RunningMax(None);
        let mut i = 0;
        for o in ops.iter().filter(|o| o.op == OpKind::Read) {
            checked += 1;
            while i < writes.len() && writes[i].ack <= o.invoke {
                max.add(writes[i]);
                i += 1;
            }
            if let Some(w) = max.0 {
                if version(o) < version(w) {
                    return verdict(
                        checked,
                        Some(format!(
                            "own write {} missing from {}",
                            describe(w),
                            describe(o)
                        )),
                    );
                }
            }
        }
    }
    verdict(checked, None)
}

/// For each read at its invoke time `t`: among writes acknowledged by `t` that
/// the read does not reflect, the oldest acknowledgement must be less than
/// `delta_ms` old.
fn staleness(history: &History, delta_ms: Millis) -> Verdict {
    let mut checked = 0;
    let mut worst: Millis = 0;
    let mut first_bad = None;
    for ops in by_key(history, &[OpKind::Read, OpKind::Write]).values() {
        let mut writes: Vec<&HistoryOp> = ops
            .iter()
            .copied()
            .filter(|o| o.op == OpKind::Write && o.ok)
            .collect();
        writes.sort_by_key(|o| o.ack);
        for r in ops.iter().filter(|o| o.op == OpKind::Read && o.ok) {
            checked += 1;
            let oldest = writes
                .iter()
                .take_while(|w| w.ack <= r.invoke)
                .find(|w| version(w).cmp(version(r)) == Ordering::Greater);
            if let Some(w) = oldest {
                let lag = r.invoke - w.ack;
                worst = worst.max(lag);
                if lag >= delta_ms && first_bad.is_none() {
                    first_bad = Some(format!(
                        "{} is {lag} ms behind {}",
                        describe(r),
                        describe(w)
                    ));
                }
            }
        }
    }
    let mut v = verdict(checked, first_bad);
    v.max_staleness_ms = Some(worst);
    v
}

/// Staleness of every successful read: `(invoke, lag)` where lag is the age
/// of the oldest acknowledged write it misses (0 if none), sorted by time.
pub fn read_lags(history: &History) -> Vec<(Millis, Millis)> {
    let mut out = Vec::new();
    for ops in by_key(history, &[OpKind::Read, OpKind::Write]).values() {
        let mut writes: Vec<&HistoryOp> = ops
            .iter()
            .copied()
            .filter(|o| o.op == OpKind::Write && o.ok)
            .collect();
        writes.sort_by_key(|o| o.ack);
        for r in ops.iter().filter(|o| o.op == OpKind::Read && o.ok) {
            let lag = writes
                .iter()
                .take_while(|w| w.ack <= r.invoke)
                .find(|w| version(w).cmp(version(r)) == Ordering::Greater)
                .map_or(0, |w| r.invoke - w.ack);
            out.push((r.invoke, lag));
        }
    }
    out.sort_unstable();
    out
}

/// Final counter read must equal the number of distinct accepted submissions,
/// keyed by (producer, sequence number carried in `value`).
fn exactly_once(history: &History) -> Verdict {
    let mut checked = 0;
    for (key, ops) in by_key(history, &[OpKind::Increment, OpKind::Read]) {
        let accepted: BTreeSet<(&str, String)> = ops
            .iter()
            .filter(|o| o.op == OpKind::Increment && o.ok)
            .map(|o| (o.client.as_str(), o.value.to_string()))
            .collect();
        checked += ops.len();
        let Some(last) = ops
            .iter()
            .filter(|o| o.op == OpKind::Read && o.ok)
            .max_by_key(|o| o.ack)
        else {
            continue;
        };
        if last.value.as_u64() != Some(accepted.len() as u64) {
            return verdict(
                checked,
                Some(format!(
                    "{key}: final value {} but {} accepted increments",
                    last.value,
                    accepted.len()
                )),
            );
        }
    }
    verdict(checked, None)
}

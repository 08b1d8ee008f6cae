//! Deterministic discrete-event kernel: virtual clock, ordered event queue,
//! cancellation handles, a line-delimited JSON delivery log, and seeded
//! random streams.
//!
//! Events that share a `fire_at` are delivered in insertion order. Every
//! random stream is derived from one root seed plus a stream name, so adding
//! draws in one module never shifts the sequence seen by another.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Virtual time in integer milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000)
    }

    pub const fn from_mins(m: u64) -> Self {
        SimTime(m * 60_000)
    }

    pub const fn from_hours(h: u64) -> Self {
        SimTime(h * 3_600_000)
    }

    pub const fn from_days(d: u64) -> Self {
        SimTime(d * 86_400_000)
    }

    /// Fractional seconds, rounded to the nearest millisecond.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s.max(0.0) * 1_000.0).round() as u64)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_mins_f64(self) -> f64 {
        self.0 as f64 / 60_000.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    /// Scales a duration, rounding to the nearest millisecond.
    pub fn mul_f64(self, k: f64) -> SimTime {
        SimTime((self.0 as f64 * k).round().max(0.0) as u64)
    }

    /// Parses `"90s"`, `"17h"`, `"2m 30s"` and similar, or a bare integer as
    /// milliseconds.
    pub fn parse(s: &str) -> Result<SimTime, String> {
        let s = s.trim();
        if let Ok(ms) = s.parse::<u64>() {
            return Ok(SimTime(ms));
        }
        humantime::parse_duration(s)
            .map(|d| SimTime(d.as_millis() as u64))
            .map_err(|e| format!("invalid duration {s:?}: {e}"))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("SimTime underflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("0s");
        }
        write!(f, "{}", humantime::format_duration(Duration::from_millis(self.0)))
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.0)
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Millis(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Millis(ms) => Ok(SimTime(ms)),
            Raw::Text(t) => SimTime::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    PastEvent { at: SimTime, now: SimTime },
}

/// Returned by [`Scheduler::schedule`]; usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventHandle(pub u64);

/// Short tag written to the event log for each payload.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub sequence: u64,
    pub payload: P,
}

struct Queued<P>(SimEvent<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.sequence == other.0.sequence
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.fire_at, self.0.sequence).cmp(&(other.0.fire_at, other.0.sequence))
    }
}

#[derive(Serialize)]
struct LogLine<'a, P> {
    fire_at: SimTime,
    sequence: u64,
    kind: &'a str,
    payload: &'a P,
}

/// Event queue plus virtual clock for one simulation instance.
pub struct Scheduler<P> {
    now: SimTime,
    horizon: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    live: HashSet<u64>,
    delivered: u64,
    log: Option<Vec<u8>>,
}

impl<P: Serialize + EventKind> Scheduler<P> {
    pub fn new(horizon: SimTime) -> Self {
        Scheduler {
            now: SimTime::ZERO,
            horizon,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            delivered: 0,
            log: None,
        }
    }

    /// Records every delivered event as one JSON line.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn horizon(&self) -> SimTime {
        self.horizon
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> Result<EventHandle, KernelError> {
        if fire_at < self.now {
            return Err(KernelError::PastEvent { at: fire_at, now: self.now });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.live.insert(sequence);
        self.queue.push(Reverse(Queued(SimEvent { fire_at, sequence, payload })));
        Ok(EventHandle(sequence))
    }

    /// Schedules relative to the current clock; never fails.
    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload).expect("relative events are never in the past")
    }

    /// True if the event had not fired yet and now never will.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    /// Pops the next live event with `fire_at <= until` (capped at the
    /// horizon) and advances the clock to it.
    pub fn pop_next(&mut self, until: SimTime) -> Option<SimEvent<P>> {
        let limit = until.min(self.horizon);
        loop {
            let head = self.queue.peek()?;
            if head.0 .0.fire_at > limit {
                return None;
            }
            let Reverse(Queued(ev)) = self.queue.pop().expect("peeked");
            if !self.live.remove(&ev.sequence) {
                continue;
            }
            self.now = ev.fire_at;
            self.delivered += 1;
            if let Some(log) = self.log.as_mut() {
                let line = LogLine {
                    fire_at: ev.fire_at,
                    sequence: ev.sequence,
                    kind: ev.payload.kind(),
                    payload: &ev.payload,
                };
                serde_json::to_writer(&mut *log, &line).expect("event payloads serialize");
                log.push(b'\n');
            }
            return Some(ev);
        }
    }

    /// Moves the clock forward without delivering anything.
    pub fn advance_to(&mut self, t: SimTime) {
        let t = t.min(self.horizon);
        if t > self.now {
            self.now = t;
        }
    }

    /// Delivers every event with `fire_at <= t` in order, then sets the clock
    /// to `t` (or the horizon, whichever is earlier).
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_next(t) {
            count += 1;
            handler(self, ev);
        }
        self.advance_to(t);
        count
    }

    pub fn log_bytes(&self) -> &[u8] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_log(&mut self) -> Vec<u8> {
        self.log.take().unwrap_or_default()
    }
}

/// Root seed from which named, independent ChaCha8 streams are derived.
///
/// A stream is `ChaCha8Rng::seed_from_u64(seed)` with its stream id set to
/// the FNV-1a hash of the stream name; both steps are specified by
/// `rand_chacha` and are platform independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededRng {
    pub seed: u64,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8-fnv1a-stream";

    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq, Serialize)]
    struct Ping(u32);

    impl EventKind for Ping {
        fn kind(&self) -> &'static str {
            "ping"
        }
    }

    fn drain(s: &mut Scheduler<Ping>, t: SimTime) -> Vec<u32> {
        let mut out = Vec::new();
        s.run_until(t, |_, ev| out.push(ev.payload.0));
        out
    }

    #[test]
    fn event_at_zero_is_delivered_first() {
        let mut s = Scheduler::new(SimTime::from_hours(1));
        s.schedule(SimTime(5), Ping(2)).unwrap();
        s.schedule(SimTime::ZERO, Ping(1)).unwrap();
        assert_eq!(drain(&mut s, SimTime(10)), vec![1, 2]);
    }

    #[test]
    fn equal_times_deliver_in_sequence_order() {
        let mut s = Scheduler::new(SimTime::from_hours(1));
        for i in 0..9 {
            s.schedule(SimTime(100), Ping(i)).unwrap();
        }
        let mut seqs = Vec::new();
        s.run_until(SimTime(100), |_, ev| seqs.push(ev.sequence));
        assert_eq!(seqs, (0..9).collect::<Vec<_>>());
        assert!(seqs.windows(2).any(|w| w == [7, 8]));
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut s: Scheduler<Ping> = Scheduler::new(SimTime::from_hours(1));
        s.run_until(SimTime(60), |_, _| {});
        assert_eq!(
            s.schedule(SimTime(50), Ping(0)),
            Err(KernelError::PastEvent { at: SimTime(50), now: SimTime(60) })
        );
    }

    #[test]
    fn run_until_on_empty_queue_moves_clock() {
        let mut s: Scheduler<Ping> = Scheduler::new(SimTime::from_hours(1));
        assert_eq!(s.run_until(SimTime(1000), |_, _| {}), 0);
        assert_eq!(s.now(), SimTime(1000));
    }

    #[test]
    fn run_until_stops_at_bound() {
        let mut s = Scheduler::new(SimTime::from_hours(1));
        for t in [10, 20, 30] {
            s.schedule(SimTime(t), Ping(t as u32)).unwrap();
        }
        assert_eq!(s.run_until(SimTime(25), |_, _| {}), 2);
        assert_eq!(s.now(), SimTime(25));
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn clock_never_passes_horizon() {
        let mut s = Scheduler::new(SimTime(100));
        s.schedule(SimTime(150), Ping(1)).unwrap();
        assert_eq!(s.run_until(SimTime(500), |_, _| {}), 0);
        assert_eq!(s.now(), SimTime(100));
    }

    #[test]
    fn cancellation_semantics() {
        let mut s = Scheduler::new(SimTime::from_hours(1));
        let a = s.schedule(SimTime(10), Ping(1)).unwrap();
        let b = s.schedule(SimTime(20), Ping(2)).unwrap();
        assert!(s.cancel(a));
        assert!(!s.cancel(a));
        assert_eq!(drain(&mut s, SimTime(30)), vec![2]);
        assert!(!s.cancel(b));
    }

    #[test]
    fn handler_can_schedule_followups() {
        let mut s = Scheduler::new(SimTime::from_hours(1));
        s.schedule(SimTime(0), Ping(0)).unwrap();
        let mut seen = Vec::new();
        s.run_until(SimTime(50), |sched, ev| {
            seen.push((sched.now().0, ev.payload.0));
            if ev.payload.0 < 3 {
                sched.schedule_in(SimTime(10), Ping(ev.payload.0 + 1));
            }
        });
        assert_eq!(seen, vec![(0, 0), (10, 1), (20, 2), (30, 3)]);
    }

    #[test]
    fn replay_produces_identical_logs() {
        let run = |seed: u64| {
            let mut rng = SeededRng::new(seed).stream("test");
            let mut s = Scheduler::new(SimTime::from_secs(100)).with_log();
            for i in 0..200 {
                let at = SimTime(rng.gen_range(0..100_000));
                s.schedule(at, Ping(i)).unwrap();
            }
            s.run_until(SimTime::from_secs(100), |_, _| {});
            s.take_log()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert_eq!(v["kind"], "ping");
        assert!(v.get("fire_at").is_some() && v.get("sequence").is_some());
    }

    #[test]
    fn named_streams_are_independent() {
        let root = SeededRng::new(42);
        let a: Vec<u32> = (0..4).map(|_| root.stream("fleet").gen()).collect();
        let mut f = root.stream("fleet");
        let mut w = root.stream("workload");
        let x: u64 = f.gen();
        let y: u64 = w.gen();
        assert_ne!(x, y);
        assert!(a.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn simtime_parsing() {
        assert_eq!(SimTime::parse("17h").unwrap(), SimTime::from_hours(17));
        assert_eq!(SimTime::parse("90s").unwrap(), SimTime::from_secs(90));
        assert_eq!(SimTime::parse("1500").unwrap(), SimTime(1500));
        assert!(SimTime::parse("soon").is_err());
        let t: SimTime = serde_json::from_str("\"5m\"").unwrap();
        assert_eq!(t, SimTime::from_mins(5));
        assert_eq!(serde_json::to_string(&t).unwrap(), "300000");
    }
}

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

/// Timer flavours the simulation schedules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum Timer {
    /// A frame was lost; raised to its sender.
    LossTimeout { frame: u64 },
    /// Next background poll of an endpoint is due.
    ScadaPoll,
    /// Generic labelled timer.
    Label { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    FrameDelivery { frame: u64 },
    Timer(Timer),
    SolveComplete { task: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    /// Simulated seconds.
    pub at: f64,
    /// Insertion sequence; breaks ties between equal `at`.
    pub seq: u64,
    pub kind: EventKind,
    /// Endpoint the event is addressed to.
    pub target: String,
}

struct Entry(SimEvent);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed so the max-heap pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .at
            .total_cmp(&self.0.at)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Future-event list totally ordered by `(at, seq)`, with a clock that only
/// moves forward.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Entry>,
    now: f64,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules an event; times in the past are clamped to the clock.
    pub fn schedule(&mut self, at: f64, kind: EventKind, target: impl Into<String>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(SimEvent {
            at: at.max(self.now),
            seq,
            kind,
            target: target.into(),
        }));
        seq
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.0.at)
    }

    /// Pops the next event if it is due no later than `t_end`, advancing the
    /// clock to it.
    pub fn pop_until(&mut self, t_end: f64) -> Option<SimEvent> {
        if self.peek_time()? > t_end {
            return None;
        }
        let ev = self.heap.pop()?.0;
        self.now = self.now.max(ev.at);
        Some(ev)
    }

    /// Processes every event due by `t_end` in order and leaves the clock at
    /// `t_end`.
    pub fn run_until(&mut self, t_end: f64) -> Vec<SimEvent> {
        let mut out = Vec::new();
        while let Some(ev) = self.pop_until(t_end) {
            out.push(ev);
        }
        self.advance_to(t_end);
        out
    }

    /// Moves the clock forward; never backward.
    pub fn advance_to(&mut self, t: f64) {
        self.now = self.now.max(t);
    }

    /// Drops every pending event.
    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(s: &str) -> EventKind {
        EventKind::Timer(Timer::Label { label: s.into() })
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut q = EventQueue::new();
        assert!(q.run_until(42.0).is_empty());
        assert_eq!(q.now(), 42.0);
    }

    #[test]
    fn equal_times_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, EventKind::FrameDelivery { frame: 1 }, "a");
        q.schedule(5.0, EventKind::FrameDelivery { frame: 2 }, "b");
        q.schedule(1.0, label("first"), "c");
        let got: Vec<u64> = q.run_until(10.0).iter().map(|e| e.seq).collect();
        assert_eq!(got, vec![2, 0, 1]);
    }

    #[test]
    fn clock_never_runs_backward() {
        let mut q = EventQueue::new();
        q.run_until(10.0);
        q.schedule(3.0, label("late"), "a");
        let ev = q.run_until(20.0);
        assert_eq!(ev[0].at, 10.0);
        q.advance_to(5.0);
        assert_eq!(q.now(), 20.0);
    }
}

//! Discrete-event message transport between the EMS, the DMSs and DER
//! endpoints.
//!
//! Every frame draws its loss coin and latency from its own random stream,
//! keyed by the run seed and the frame's identity (interval, endpoints,
//! payload kind, attempt, tag). Draws therefore never depend on the order in
//! which other frames were sent, which keeps traces comparable across
//! parameter changes.

mod latency;
mod queue;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use latency::{
    Distribution, Framing, LatencyConfig, LatencyModel, LatencyProfile, LatencyTable, Tier,
    AMI_BANDWIDTH_RANGE,
};
pub use queue::{EventKind, EventQueue, SimEvent, Timer};

/// Allowed background poll periods, seconds.
pub const SCADA_PERIOD_RANGE: (f64, f64) = (1.0, 10.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommsError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("unknown latency leg {0}")]
    UnknownLeg(String),
    #[error("invalid {tier:?} latency model: {reason}")]
    InvalidModel { tier: Tier, reason: String },
    #[error("loss timeout {0} s must be positive")]
    InvalidTimeout(f64),
    #[error("poll period {0} s outside [1, 10] s")]
    PollPeriod(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    OpRequest,
    FlexibilityReport,
    DerDispatch,
    DerAck,
    ScadaPoll,
    ScadaReply,
}

impl PayloadKind {
    /// Nominal application payload size in bytes.
    pub fn nominal_bytes(self) -> u32 {
        match self {
            PayloadKind::OpRequest => 256,
            PayloadKind::FlexibilityReport => 320,
            PayloadKind::DerDispatch => 64,
            PayloadKind::DerAck => 32,
            PayloadKind::ScadaPoll => 24,
            PayloadKind::ScadaReply => 200,
        }
    }

    fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub src: String,
    pub dst: String,
    pub payload_kind: PayloadKind,
    /// On-wire size including framing overhead.
    pub payload_bytes: u32,
    pub sent_at: f64,
    /// `None` when the frame was lost.
    pub delivered_at: Option<f64>,
    pub attempt: u32,
}

/// What a sender asks the network to carry.
#[derive(Debug, Clone, PartialEq)]
pub struct SendRequest {
    pub src: String,
    pub dst: String,
    pub payload_kind: PayloadKind,
    /// Application bytes before framing.
    pub payload_bytes: u32,
    pub attempt: u32,
    /// Distinguishes otherwise identical frames in one interval.
    pub tag: u64,
}

impl SendRequest {
    pub fn new(src: &str, dst: &str, payload_kind: PayloadKind) -> Self {
        Self {
            src: src.to_owned(),
            dst: dst.to_owned(),
            payload_kind,
            payload_bytes: payload_kind.nominal_bytes(),
            attempt: 0,
            tag: 0,
        }
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }

    pub fn tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }
}

/// Deterministic failure injection: drop matching frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedLoss {
    /// Interval the rule applies to; every interval when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<usize>,
    pub payload_kind: PayloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
    #[serde(default)]
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Timeout,
    SolveComplete,
    Timer,
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: f64,
    pub kind: TraceKind,
    pub interval: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u64>,
    pub src: String,
    pub dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_kind: Option<PayloadKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

struct PollSpec {
    poller: String,
    period_s: f64,
    until: f64,
    model: LatencyModel,
    count: u64,
}

/// The simulated network. Owns the event queue and therefore the clock.
pub struct CommsNet {
    queue: EventQueue,
    endpoints: BTreeSet<String>,
    frames: Vec<Frame>,
    /// Time each directed link becomes free again.
    link_free: BTreeMap<(String, String), f64>,
    polls: BTreeMap<String, PollSpec>,
    trace: Vec<TraceRecord>,
    seed: u64,
    interval: u64,
    framing: Framing,
    timeout_s: f64,
    forced: Vec<ForcedLoss>,
    record_trace: bool,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl CommsNet {
    pub fn new(seed: u64, framing: Framing, timeout_s: f64) -> Self {
        Self {
            queue: EventQueue::new(),
            endpoints: BTreeSet::new(),
            frames: Vec::new(),
            link_free: BTreeMap::new(),
            polls: BTreeMap::new(),
            trace: Vec::new(),
            seed,
            interval: 0,
            framing,
            timeout_s,
            forced: Vec::new(),
            record_trace: true,
        }
    }

    pub fn set_forced_losses(&mut self, rules: Vec<ForcedLoss>) {
        self.forced = rules;
    }

    /// Turns trace recording on or off (on by default).
    pub fn set_record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn register(&mut self, endpoint: impl Into<String>) {
        self.endpoints.insert(endpoint.into());
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, id: u64) -> &Frame {
        &self.frames[(id - 1) as usize]
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Starts a fresh interval at `start`: pending events, link occupancy and
    /// background polls are dropped. Frame ids keep counting.
    pub fn begin_interval(&mut self, interval: u64, start: f64) {
        self.queue.clear();
        self.queue.advance_to(start);
        self.link_free.clear();
        self.polls.clear();
        self.interval = interval;
    }

    fn frame_rng(&self, req: &SendRequest) -> ChaCha8Rng {
        let mut key = fnv1a(&self.interval.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
        key = fnv1a(req.src.as_bytes(), key);
        key = fnv1a(&[0xff], key);
        key = fnv1a(req.dst.as_bytes(), key);
        key = fnv1a(&[0xff, req.payload_kind.code()], key);
        key = fnv1a(&req.attempt.to_le_bytes(), key);
        key = fnv1a(&req.tag.to_le_bytes(), key);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }

    fn is_forced(&self, req: &SendRequest) -> bool {
        self.forced.iter().any(|r| {
            r.interval.is_none_or(|i| i as u64 == self.interval)
                && r.payload_kind == req.payload_kind
                && r.dst.as_deref().is_none_or(|d| d == req.dst)
                && r.attempt == req.attempt
        })
    }

    fn record(&mut self, rec: TraceRecord) {
        if self.record_trace {
            self.trace.push(rec);
        }
    }

    fn frame_record(&self, at: f64, kind: TraceKind, f: &Frame) -> TraceRecord {
        TraceRecord {
            at,
            kind,
            interval: self.interval,
            frame: Some(f.id),
            src: f.src.clone(),
            dst: f.dst.clone(),
            payload_kind: Some(f.payload_kind),
            bytes: Some(f.payload_bytes),
            label: None,
        }
    }

    /// Sends a frame now. Delivery time is the link's FIFO start time plus
    /// transmission delay plus a sampled latency. Lost frames schedule a
    /// timeout event to the sender instead.
    pub fn send(&mut self, req: SendRequest, model: &LatencyModel) -> Result<u64, CommsError> {
        for ep in [&req.src, &req.dst] {
            if !self.endpoints.contains(ep) {
                return Err(CommsError::UnknownEndpoint(ep.clone()));
            }
        }
        let mut rng = self.frame_rng(&req);
        let coin: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let lost = self.is_forced(&req) || coin < model.loss_prob;

        let now = self.now();
        let bytes = self.framing.wire_bytes(req.payload_bytes.max(1));
        let link = (req.src.clone(), req.dst.clone());
        let free = self.link_free.get(&link).copied().unwrap_or(now).max(now);
        let on_wire = free + model.transmission_delay(bytes);
        self.link_free.insert(link, on_wire);

        let id = self.frames.len() as u64 + 1;
        let delivered_at = (!lost).then(|| on_wire + model.latency_for(z));
        let frame = Frame {
            id,
            src: req.src,
            dst: req.dst,
            payload_kind: req.payload_kind,
            payload_bytes: bytes,
            sent_at: now,
            delivered_at,
            attempt: req.attempt,
        };
        let rec = self.frame_record(now, TraceKind::Send, &frame);
        self.record(rec);
        match delivered_at {
            Some(at) => {
                self.queue.schedule(at, EventKind::FrameDelivery { frame: id }, frame.dst.clone());
            }
            None => {
                self.queue.schedule(
                    now + self.timeout_s,
                    EventKind::Timer(Timer::LossTimeout { frame: id }),
                    frame.src.clone(),
                );
            }
        }
        self.frames.push(frame);
        Ok(id)
    }

    /// Schedules the completion of a simulated computation.
    pub fn schedule_solve(&mut self, at: f64, task: impl Into<String>, target: impl Into<String>) {
        self.queue.schedule(at, EventKind::SolveComplete { task: task.into() }, target);
    }

    pub fn schedule_timer(&mut self, at: f64, label: impl Into<String>, target: impl Into<String>) {
        self.queue.schedule(at, EventKind::Timer(Timer::Label { label: label.into() }), target);
    }

    /// Starts background polling of every endpoint by `poller`, one poll per
    /// `period_s` from `now + period_s` up to and including `until`.
    pub fn inject_scada_poll(
        &mut self,
        poller: &str,
        endpoints: &[String],
        period_s: f64,
        until: f64,
        model: &LatencyModel,
    ) -> Result<(), CommsError> {
        let (lo, hi) = SCADA_PERIOD_RANGE;
        if !(lo..=hi).contains(&period_s) {
            return Err(CommsError::PollPeriod(period_s));
        }
        for ep in std::iter::once(poller).chain(endpoints.iter().map(String::as_str)) {
            if !self.endpoints.contains(ep) {
                return Err(CommsError::UnknownEndpoint(ep.to_owned()));
            }
        }
        let start = self.now();
        for ep in endpoints {
            self.polls.insert(
                ep.clone(),
                PollSpec {
                    poller: poller.to_owned(),
                    period_s,
                    until,
                    model: model.clone(),
                    count: 0,
                },
            );
            self.schedule_poll(ep, start + period_s);
        }
        Ok(())
    }

    fn schedule_poll(&mut self, endpoint: &str, at: f64) {
        if self.polls.get(endpoint).is_some_and(|p| at <= p.until) {
            self.queue.schedule(at, EventKind::Timer(Timer::ScadaPoll), endpoint);
        }
    }

    /// Processes the next event due by `t_end`. Background polling is
    /// serviced internally; every event is still returned.
    pub fn next_event(&mut self, t_end: f64) -> Option<SimEvent> {
        let ev = self.queue.pop_until(t_end)?;
        match &ev.kind {
            EventKind::FrameDelivery { frame } => {
                let f = self.frame(*frame).clone();
                let rec = self.frame_record(ev.at, TraceKind::Deliver, &f);
                self.record(rec);
                if f.payload_kind == PayloadKind::ScadaPoll {
                    if let Some(spec) = self.polls.get(&f.dst) {
                        let model = spec.model.clone();
                        let req = SendRequest::new(&f.dst, &f.src, PayloadKind::ScadaReply).tag(f.id);
                        self.send(req, &model).expect("registered poll endpoints");
                    }
                }
            }
            EventKind::Timer(Timer::LossTimeout { frame }) => {
                let f = self.frame(*frame).clone();
                let rec = self.frame_record(ev.at, TraceKind::Timeout, &f);
                self.record(rec);
            }
            EventKind::Timer(Timer::ScadaPoll) => {
                let ep = ev.target.clone();
                if let Some(spec) = self.polls.get_mut(&ep) {
                    spec.count += 1;
                    let (poller, model, tag, next) =
                        (spec.poller.clone(), spec.model.clone(), spec.count, ev.at + spec.period_s);
                    let req = SendRequest::new(&poller, &ep, PayloadKind::ScadaPoll).tag(tag);
                    self.send(req, &model).expect("registered poll endpoints");
                    self.schedule_poll(&ep, next);
                }
            }
            EventKind::Timer(Timer::Label { label }) => {
                let rec = TraceRecord {
                    at: ev.at,
                    kind: TraceKind::Timer,
                    interval: self.interval,
                    frame: None,
                    src: ev.target.clone(),
                    dst: ev.target.clone(),
                    payload_kind: None,
                    bytes: None,
                    label: Some(label.clone()),
                };
                self.record(rec);
            }
            EventKind::SolveComplete { task } => {
                let rec = TraceRecord {
                    at: ev.at,
                    kind: TraceKind::SolveComplete,
                    interval: self.interval,
                    frame: None,
                    src: ev.target.clone(),
                    dst: ev.target.clone(),
                    payload_kind: None,
                    bytes: None,
                    label: Some(task.clone()),
                };
                self.record(rec);
            }
        }
        Some(ev)
    }

    /// Processes every event due by `t_end` and leaves the clock there.
    pub fn run_until(&mut self, t_end: f64) -> Vec<SimEvent> {
        let mut out = Vec::new();
        while let Some(ev) = self.next_event(t_end) {
            out.push(ev);
        }
        self.queue.advance_to(t_end);
        out
    }

    pub fn advance_to(&mut self, t: f64) {
        self.queue.advance_to(t);
    }
}

/// Writes trace records as JSON lines.
pub fn write_trace_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> CommsNet {
        let mut n = CommsNet::new(1, Framing::default(), 10.0);
        n.register("ems");
        n.register("dms");
        n
    }

    #[test]
    fn constant_link_delivers_after_mean() {
        let mut n = net();
        n.advance_to(100.0);
        let m = LatencyModel::constant(Tier::EmsDmsLink, 15.0);
        let id = n.send(SendRequest::new("ems", "dms", PayloadKind::OpRequest), &m).unwrap();
        assert_eq!(n.frame(id).delivered_at, Some(115.0));
        let ev = n.run_until(200.0);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].at, 115.0);
    }

    #[test]
    fn certain_loss_times_out_at_sender() {
        let mut n = net();
        let m = LatencyModel::constant(Tier::EmsDmsLink, 15.0).with_loss(1.0);
        let id = n.send(SendRequest::new("ems", "dms", PayloadKind::OpRequest), &m).unwrap();
        assert_eq!(n.frame(id).delivered_at, None);
        let ev = n.run_until(100.0);
        assert_eq!(ev[0].kind, EventKind::Timer(Timer::LossTimeout { frame: id }));
        assert_eq!(ev[0].at, 10.0);
        assert_eq!(ev[0].target, "ems");
    }

    #[test]
    fn unknown_endpoint_rejected() {
        let mut n = net();
        let m = LatencyModel::constant(Tier::Fan, 1.0);
        assert_eq!(
            n.send(SendRequest::new("ems", "der9", PayloadKind::DerDispatch), &m).unwrap_err(),
            CommsError::UnknownEndpoint("der9".into())
        );
    }

    #[test]
    fn bandwidth_serializes_frames_fifo() {
        let mut n = net();
        let m = LatencyModel::constant(Tier::EmsDmsLink, 1.0).with_bandwidth(8_000.0);
        let a = n.send(SendRequest::new("ems", "dms", PayloadKind::OpRequest), &m).unwrap();
        let b = n.send(SendRequest::new("ems", "dms", PayloadKind::OpRequest).tag(1), &m).unwrap();
        let tx = f64::from(Framing::default().wire_bytes(256)) / 1000.0;
        assert_eq!(n.frame(a).delivered_at, Some(tx + 1.0));
        assert_eq!(n.frame(b).delivered_at, Some(2.0 * tx + 1.0));
    }

    #[test]
    fn polls_every_period() {
        let mut n = net();
        let m = LatencyModel::constant(Tier::EmsDmsLink, 0.1);
        n.inject_scada_poll("ems", &["dms".to_string()], 2.0, 300.0, &m).unwrap();
        n.run_until(301.0);
        let polls = n.frames().iter().filter(|f| f.payload_kind == PayloadKind::ScadaPoll).count();
        let replies = n.frames().iter().filter(|f| f.payload_kind == PayloadKind::ScadaReply).count();
        assert_eq!(polls, 150);
        assert_eq!(replies, 150);
        assert!(n.inject_scada_poll("ems", &[], 0.5, 300.0, &m).is_err());
    }
}

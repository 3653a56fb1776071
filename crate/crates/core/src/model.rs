//! Electrical data model for one sub-transmission grid and its radial feeders.
//!
//! Every quantity is per-unit on the single system MVA base declared by the
//! scenario. Time series are sampled once per control interval.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Smallest and largest tap ratio a transformer may be configured with.
pub const TAP_RATIO_FLOOR: f64 = 0.9;
pub const TAP_RATIO_CEIL: f64 = 1.1;
/// Standard tap step (5/8 %).
pub const TAP_STEP: f64 = 0.00625;

const CAPABILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pq,
    Pv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Subtransmission,
    Distribution,
}

fn default_v_min() -> f64 {
    0.95
}

fn default_v_max() -> f64 {
    1.05
}

fn one() -> f64 {
    1.0
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    pub base_kv: f64,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    pub level: Level,
    /// Voltage magnitude held by slack and PV buses.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub v_set: f64,
    /// Scheduled real generation of a PV bus.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub p_gen: f64,
}

/// Off-load tap changer modeled as an ideal ratio on the `from` side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapChanger {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    /// Initial position, counted in steps from `min`.
    pub position: u32,
}

impl TapChanger {
    pub fn positions(&self) -> u32 {
        ((self.max - self.min) / self.step).round() as u32 + 1
    }

    pub fn ratio(&self, position: u32) -> f64 {
        self.min + f64::from(position) * self.step
    }

    /// Position whose ratio is closest to 1.0.
    pub fn neutral(&self) -> u32 {
        let p = ((1.0 - self.min) / self.step).round().max(0.0) as u32;
        p.min(self.positions() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r: f64,
    pub x: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub b_shunt: f64,
    pub rating: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<TapChanger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuntCapacitor {
    pub id: String,
    pub bus: String,
    /// Reactive power per step at 1.0 pu voltage.
    pub q_step: f64,
    pub n_steps: u32,
    #[serde(default)]
    pub state: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerKind {
    PvInverter,
    Storage,
    ControllableLoad,
}

/// Communication tier a device is reached over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkTier {
    SubstationLan,
    Fan,
    Nan,
    Ami,
}

/// A distributed energy resource. Injection-positive: `p_set > 0` delivers
/// real power to the feeder.
///
/// For PV inverters `p_set` is a curtailment cap; the injected power is
/// `min(p_set, p_avail(t))`, so `p_set = s_rating` means uncurtailed. For
/// storage and controllable loads `p_avail` is the static power limit and
/// `p_set` an absolute setpoint in `[-p_avail, p_avail]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub id: String,
    pub bus: String,
    pub kind: DerKind,
    pub s_rating: f64,
    #[serde(default)]
    pub p_avail: f64,
    #[serde(default)]
    pub p_set: f64,
    #[serde(default)]
    pub q_set: f64,
    #[serde(default)]
    pub dr_cost: f64,
    pub network_tier: NetworkTier,
}

/// Setpoint pair written to a DER.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DerSetpoint {
    pub p: f64,
    pub q: f64,
}

impl Der {
    /// Real-power operating range at availability `p_avail`.
    pub fn p_range(&self, p_avail: f64) -> (f64, f64) {
        match self.kind {
            DerKind::PvInverter => (0.0, p_avail.min(self.s_rating)),
            DerKind::Storage | DerKind::ControllableLoad => {
                let lim = p_avail.min(self.s_rating);
                (-lim, lim)
            }
        }
    }

    /// Real-power setting that costs nothing (uncurtailed PV, idle otherwise).
    pub fn p_reference(&self, p_avail: f64) -> f64 {
        match self.kind {
            DerKind::PvInverter => p_avail.min(self.s_rating),
            _ => 0.0,
        }
    }

    pub fn supports_q(&self) -> bool {
        self.kind != DerKind::ControllableLoad
    }

    /// Reactive capability left at real output `p`.
    pub fn q_capability(&self, p: f64) -> f64 {
        if self.supports_q() {
            (self.s_rating * self.s_rating - p * p).max(0.0).sqrt()
        } else {
            0.0
        }
    }

    /// Injection actually produced by `sp` when `p_avail` is available.
    pub fn effective_injection(&self, sp: DerSetpoint, p_avail: f64) -> (f64, f64) {
        let p = match self.kind {
            DerKind::PvInverter => sp.p.min(p_avail).max(0.0),
            _ => sp.p,
        };
        let qcap = self.q_capability(p);
        (p, sp.q.clamp(-qcap, qcap))
    }

    /// Checks a setpoint against the device's capability at `p_avail`.
    pub fn check_setpoint(&self, sp: DerSetpoint, p_avail: f64) -> Result<(), String> {
        let (lo, hi) = match self.kind {
            // The PV cap may sit anywhere up to the rating; availability limits it physically.
            DerKind::PvInverter => (0.0, self.s_rating.max(p_avail)),
            _ => self.p_range(p_avail),
        };
        if !(sp.p >= lo - CAPABILITY_SLACK && sp.p <= hi + CAPABILITY_SLACK) {
            return Err(format!("p_set {} outside [{lo}, {hi}]", sp.p));
        }
        if !self.supports_q() && sp.q != 0.0 {
            return Err(format!("q_set {} on a device without reactive capability", sp.q));
        }
        let p_eff = match self.kind {
            DerKind::PvInverter => sp.p.min(p_avail.max(0.0)),
            _ => sp.p,
        };
        let s2 = p_eff * p_eff + sp.q * sp.q;
        if s2 > self.s_rating * self.s_rating * (1.0 + CAPABILITY_SLACK) + CAPABILITY_SLACK {
            return Err(format!(
                "setpoint ({}, {}) outside capability circle of radius {}",
                p_eff, sp.q, self.s_rating
            ));
        }
        Ok(())
    }
}

/// Per-interval real/reactive load at a bus.
pub type LoadPoint = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederModel {
    pub id: String,
    /// Sub-transmission bus the feeder hangs from.
    pub head_bus: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub ders: Vec<Der>,
    #[serde(default)]
    pub capacitors: Vec<ShuntCapacitor>,
    /// `load_series[bus][t]`, aligned with `buses`.
    #[serde(skip)]
    pub load_series: Vec<Vec<LoadPoint>>,
    /// `pv_series[der][t]`; empty for non-PV devices.
    #[serde(skip)]
    pub pv_series: Vec<Vec<f64>>,
}

impl FeederModel {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Availability of DER `d` at interval `t`.
    pub fn p_avail(&self, d: usize, t: usize) -> f64 {
        let der = &self.ders[d];
        match der.kind {
            DerKind::PvInverter => self.pv_series[d][t],
            _ => der.p_avail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub capacitors: Vec<ShuntCapacitor>,
    #[serde(default)]
    pub feeders: Vec<FeederModel>,
    /// `load_series[bus][t]` for sub-transmission buses, aligned with `buses`.
    #[serde(skip)]
    pub load_series: Vec<Vec<LoadPoint>>,
}

/// A broken model invariant, naming the offending entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub entity: String,
    pub reason: String,
}

impl ValidationError {
    fn new(entity: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.reason)
    }
}

impl std::error::Error for ValidationError {}

impl GridModel {
    pub fn horizon(&self) -> usize {
        self.load_series
            .first()
            .or_else(|| self.feeders.iter().flat_map(|f| f.load_series.first()).next())
            .map_or(0, Vec::len)
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn feeder_index(&self, id: &str) -> Option<usize> {
        self.feeders.iter().position(|f| f.id == id)
    }

    /// Index of every feeder's head bus in `buses`.
    pub fn head_indices(&self) -> Vec<usize> {
        self.feeders
            .iter()
            .map(|f| self.bus_index(&f.head_bus).expect("validated head bus"))
            .collect()
    }

    /// Connected components of the sub-transmission graph, each sorted by bus
    /// index and listed in order of their smallest bus index.
    pub fn islands(&self) -> Vec<Vec<usize>> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            if let (Some(f), Some(t)) = (self.bus_index(&br.from), self.bus_index(&br.to)) {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Checks every structural and device invariant of the model, including
    /// that all series share the expected `horizon`.
    pub fn validate(&self, horizon: usize) -> Result<(), ValidationError> {
        if !(self.base_mva > 0.0) {
            return Err(ValidationError::new("grid", "base_mva must be positive"));
        }
        let mut ids = BTreeSet::new();
        let mut claim = |id: &str| -> Result<(), ValidationError> {
            if id.is_empty() {
                return Err(ValidationError::new("grid", "empty id"));
            }
            if !ids.insert(id.to_owned()) {
                return Err(ValidationError::new(id, "duplicate id"));
            }
            Ok(())
        };
        for b in &self.buses {
            claim(&b.id)?;
        }
        for b in &self.branches {
            claim(&b.id)?;
        }
        for c in &self.capacitors {
            claim(&c.id)?;
        }
        for f in &self.feeders {
            claim(&f.id)?;
            for b in &f.buses {
                claim(&b.id)?;
            }
            for b in &f.branches {
                claim(&b.id)?;
            }
            for c in &f.capacitors {
                claim(&c.id)?;
            }
            for d in &f.ders {
                claim(&d.id)?;
            }
        }

        for b in &self.buses {
            check_bus(b, Level::Subtransmission)?;
        }
        for br in &self.branches {
            check_branch(br)?;
            for end in [&br.from, &br.to] {
                if self.bus_index(end).is_none() {
                    return Err(ValidationError::new(
                        &br.id,
                        format!("endpoint {end} is not a sub-transmission bus"),
                    ));
                }
            }
        }
        for c in &self.capacitors {
            check_capacitor(c)?;
            if self.bus_index(&c.bus).is_none() {
                return Err(ValidationError::new(&c.id, format!("unknown bus {}", c.bus)));
            }
        }
        for island in self.islands() {
            let slacks: Vec<&str> = island
                .iter()
                .filter(|&&i| self.buses[i].kind == BusKind::Slack)
                .map(|&i| self.buses[i].id.as_str())
                .collect();
            if slacks.len() != 1 {
                return Err(ValidationError::new(
                    &self.buses[island[0]].id,
                    format!(
                        "island containing this bus has {} slack buses, expected exactly one",
                        slacks.len()
                    ),
                ));
            }
        }
        for f in &self.feeders {
            self.validate_feeder(f)?;
        }
        self.validate_series(horizon)
    }

    fn validate_feeder(&self, f: &FeederModel) -> Result<(), ValidationError> {
        if self.bus_index(&f.head_bus).is_none() {
            return Err(ValidationError::new(
                &f.id,
                format!("head bus {} is not a sub-transmission bus", f.head_bus),
            ));
        }
        for b in &f.buses {
            check_bus(b, Level::Distribution)?;
            if b.kind != BusKind::Pq {
                return Err(ValidationError::new(&b.id, "feeder buses must be PQ buses"));
            }
        }
        // Node 0 is the head; feeder buses follow in declaration order.
        let node = |id: &str| -> Option<usize> {
            if id == f.head_bus {
                Some(0)
            } else {
                f.bus_index(id).map(|i| i + 1)
            }
        };
        let n = f.buses.len() + 1;
        let mut dsu = DisjointSets::new(n);
        for br in &f.branches {
            check_branch(br)?;
            let (Some(a), Some(b)) = (node(&br.from), node(&br.to)) else {
                return Err(ValidationError::new(
                    &br.id,
                    format!("endpoint outside feeder {}", f.id),
                ));
            };
            if !dsu.union(a, b) {
                return Err(ValidationError::new(
                    &br.id,
                    format!("branch closes a cycle in feeder {} ({} - {})", f.id, br.from, br.to),
                ));
            }
        }
        if let Some(i) = (1..n).find(|&i| dsu.find(i) != dsu.find(0)) {
            return Err(ValidationError::new(
                &f.buses[i - 1].id,
                format!("bus is not connected to head bus {} of feeder {}", f.head_bus, f.id),
            ));
        }
        if f.branches.len() != f.buses.len() {
            return Err(ValidationError::new(&f.id, "feeder is not radial"));
        }
        for c in &f.capacitors {
            check_capacitor(c)?;
            if f.bus_index(&c.bus).is_none() {
                return Err(ValidationError::new(&c.id, format!("unknown feeder bus {}", c.bus)));
            }
        }
        for d in &f.ders {
            if f.bus_index(&d.bus).is_none() {
                return Err(ValidationError::new(&d.id, format!("unknown feeder bus {}", d.bus)));
            }
            if !(d.s_rating > 0.0) {
                return Err(ValidationError::new(&d.id, "s_rating must be positive"));
            }
            if !(d.p_avail >= 0.0) || !(d.dr_cost >= 0.0) {
                return Err(ValidationError::new(&d.id, "p_avail and dr_cost must be non-negative"));
            }
            let sp = DerSetpoint { p: d.p_set, q: d.q_set };
            let avail = match d.kind {
                DerKind::PvInverter => d.s_rating,
                _ => d.p_avail,
            };
            d.check_setpoint(sp, avail)
                .map_err(|e| ValidationError::new(&d.id, e))?;
        }
        Ok(())
    }

    fn validate_series(&self, horizon: usize) -> Result<(), ValidationError> {
        let check = |entity: &str, len: usize| {
            if len != horizon {
                Err(ValidationError::new(
                    entity,
                    format!("series has {len} intervals, expected {horizon}"),
                ))
            } else {
                Ok(())
            }
        };
        if self.load_series.len() != self.buses.len() {
            return Err(ValidationError::new("grid", "load series not aligned with buses"));
        }
        for (b, s) in self.buses.iter().zip(&self.load_series) {
            check(&b.id, s.len())?;
        }
        for f in &self.feeders {
            if f.load_series.len() != f.buses.len() || f.pv_series.len() != f.ders.len() {
                return Err(ValidationError::new(&f.id, "series not aligned with devices"));
            }
            for (b, s) in f.buses.iter().zip(&f.load_series) {
                check(&b.id, s.len())?;
            }
            for (d, s) in f.ders.iter().zip(&f.pv_series) {
                if d.kind == DerKind::PvInverter {
                    check(&d.id, s.len())?;
                    if let Some(v) = s.iter().find(|&&v| !(v >= 0.0 && v <= d.s_rating + 1e-12)) {
                        return Err(ValidationError::new(
                            &d.id,
                            format!("available power {v} outside [0, s_rating]"),
                        ));
                    }
                } else if !s.is_empty() {
                    return Err(ValidationError::new(&d.id, "only PV inverters carry a series"));
                }
            }
        }
        Ok(())
    }
}

fn check_bus(b: &Bus, level: Level) -> Result<(), ValidationError> {
    if b.level != level {
        return Err(ValidationError::new(&b.id, format!("expected level {level:?}")));
    }
    if !(b.base_kv > 0.0) {
        return Err(ValidationError::new(&b.id, "base_kv must be positive"));
    }
    if !(b.v_min > 0.0 && b.v_min < b.v_max) {
        return Err(ValidationError::new(&b.id, "requires 0 < v_min < v_max"));
    }
    if !(b.v_set > 0.0) {
        return Err(ValidationError::new(&b.id, "v_set must be positive"));
    }
    Ok(())
}

fn check_branch(br: &Branch) -> Result<(), ValidationError> {
    if br.from == br.to {
        return Err(ValidationError::new(&br.id, "self-loop"));
    }
    if !(br.r >= 0.0) || !br.x.is_finite() {
        return Err(ValidationError::new(&br.id, "requires r >= 0 and finite x"));
    }
    if br.r == 0.0 && br.x == 0.0 {
        return Err(ValidationError::new(&br.id, "zero series impedance"));
    }
    if !(br.b_shunt >= 0.0) {
        return Err(ValidationError::new(&br.id, "b_shunt must be non-negative"));
    }
    if !(br.rating > 0.0) {
        return Err(ValidationError::new(&br.id, "rating must be positive"));
    }
    if let Some(tap) = &br.tap {
        let eps = 1e-9;
        if !(tap.step > 0.0) || tap.min < TAP_RATIO_FLOOR - eps || tap.max > TAP_RATIO_CEIL + eps
        {
            return Err(ValidationError::new(
                &br.id,
                format!("tap range must lie in [{TAP_RATIO_FLOOR}, {TAP_RATIO_CEIL}]"),
            ));
        }
        let steps = (tap.max - tap.min) / tap.step;
        if (steps - steps.round()).abs() > 1e-6 || steps < 0.0 {
            return Err(ValidationError::new(
                &br.id,
                "tap range is not an integer number of steps",
            ));
        }
        if tap.position >= tap.positions() {
            return Err(ValidationError::new(&br.id, "tap position out of range"));
        }
    }
    Ok(())
}

fn check_capacitor(c: &ShuntCapacitor) -> Result<(), ValidationError> {
    if !(c.q_step > 0.0) || c.n_steps < 1 {
        return Err(ValidationError::new(&c.id, "requires q_step > 0 and n_steps >= 1"));
    }
    if c.state > c.n_steps {
        return Err(ValidationError::new(&c.id, "state exceeds n_steps"));
    }
    Ok(())
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Exogenous injections frozen at one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub interval: usize,
    /// Loads at sub-transmission buses, aligned with `GridModel::buses`.
    pub loads: Vec<LoadPoint>,
    pub feeders: Vec<FeederState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederState {
    /// Loads at feeder buses, aligned with `FeederModel::buses`.
    pub loads: Vec<LoadPoint>,
    /// Available real power per DER.
    pub p_avail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalOutOfRange {
    pub interval: usize,
    pub horizon: usize,
}

impl fmt::Display for IntervalOutOfRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "interval {} outside horizon of {} intervals", self.interval, self.horizon)
    }
}

impl std::error::Error for IntervalOutOfRange {}

/// Reads the injections of interval `t`.
pub fn snapshot_at(model: &GridModel, t: usize) -> Result<NetworkState, IntervalOutOfRange> {
    let horizon = model.horizon();
    if t >= horizon {
        return Err(IntervalOutOfRange { interval: t, horizon });
    }
    Ok(NetworkState {
        interval: t,
        loads: model.load_series.iter().map(|s| s[t]).collect(),
        feeders: model
            .feeders
            .iter()
            .map(|f| FeederState {
                loads: f.load_series.iter().map(|s| s[t]).collect(),
                p_avail: (0..f.ders.len()).map(|d| f.p_avail(d, t)).collect(),
            })
            .collect(),
    })
}

/// Settings of every controllable device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    /// Tap position per sub-transmission branch (`None` for plain lines).
    pub taps: Vec<Option<u32>>,
    pub caps: Vec<u32>,
    pub feeders: Vec<FeederControls>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederControls {
    pub taps: Vec<Option<u32>>,
    pub caps: Vec<u32>,
    pub ders: Vec<DerSetpoint>,
}

impl FeederControls {
    pub fn initial(f: &FeederModel) -> Self {
        Self {
            taps: f.branches.iter().map(|b| b.tap.as_ref().map(|t| t.position)).collect(),
            caps: f.capacitors.iter().map(|c| c.state).collect(),
            ders: f
                .ders
                .iter()
                .map(|d| DerSetpoint { p: d.p_set, q: d.q_set })
                .collect(),
        }
    }
}

impl ControlVector {
    /// Device settings as declared in the model.
    pub fn initial(model: &GridModel) -> Self {
        Self {
            taps: model.branches.iter().map(|b| b.tap.as_ref().map(|t| t.position)).collect(),
            caps: model.capacitors.iter().map(|c| c.state).collect(),
            feeders: model.feeders.iter().map(FeederControls::initial).collect(),
        }
    }
}

/// Maps ids to positions for quick lookup.
pub fn index_by_id<'a, I>(ids: I) -> BTreeMap<&'a str, usize>
where
    I: IntoIterator<Item = &'a str>,
{
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bus(id: &str, kind: BusKind, level: Level) -> Bus {
        Bus {
            id: id.into(),
            kind,
            base_kv: 12.47,
            v_min: 0.95,
            v_max: 1.05,
            level,
            v_set: 1.0,
            p_gen: 0.0,
        }
    }

    fn line(id: &str, from: &str, to: &str) -> Branch {
        Branch {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            r: 0.01,
            x: 0.02,
            b_shunt: 0.0,
            rating: 1.0,
            tap: None,
        }
    }

    fn minimal(horizon: usize) -> GridModel {
        GridModel {
            name: "minimal".into(),
            base_mva: 10.0,
            buses: vec![bus("S", BusKind::Slack, Level::Subtransmission)],
            branches: vec![],
            capacitors: vec![],
            feeders: vec![FeederModel {
                id: "F".into(),
                head_bus: "S".into(),
                buses: vec![
                    bus("A", BusKind::Pq, Level::Distribution),
                    bus("B", BusKind::Pq, Level::Distribution),
                ],
                branches: vec![line("SA", "S", "A"), line("AB", "A", "B")],
                ders: vec![],
                capacitors: vec![],
                load_series: vec![vec![(0.1, 0.05); horizon], vec![(0.0, 0.0); horizon]],
                pv_series: vec![],
            }],
            load_series: vec![vec![(0.0, 0.0); horizon]],
        }
    }

    #[test]
    fn minimal_model_is_valid() {
        let m = minimal(3);
        m.validate(3).unwrap();
        assert_eq!(m.horizon(), 3);
    }

    #[test]
    fn cycle_is_named() {
        let mut m = minimal(3);
        m.feeders[0].branches.push(line("BS", "B", "S"));
        let err = m.validate(3).unwrap_err();
        assert_eq!(err.entity, "BS");
        assert!(err.reason.contains("cycle"), "{err}");
    }

    #[test]
    fn disconnected_bus_is_named() {
        let mut m = minimal(3);
        m.feeders[0].buses.push(bus("C", BusKind::Pq, Level::Distribution));
        m.feeders[0].load_series.push(vec![(0.0, 0.0); 3]);
        let err = m.validate(3).unwrap_err();
        assert_eq!(err.entity, "C");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = minimal(3);
        m.feeders[0].buses[1].id = "A".into();
        assert_eq!(m.validate(3).unwrap_err().reason, "duplicate id");
    }

    #[test]
    fn voltage_bounds_checked() {
        let mut m = minimal(3);
        m.feeders[0].buses[0].v_min = 1.1;
        assert_eq!(m.validate(3).unwrap_err().entity, "A");
    }

    #[test]
    fn tap_grid_checked() {
        let mut m = minimal(1);
        m.buses.push(bus("T", BusKind::Pq, Level::Subtransmission));
        m.load_series.push(vec![(0.0, 0.0)]);
        let mut br = line("X", "S", "T");
        br.tap = Some(TapChanger { min: 0.9, max: 1.1, step: TAP_STEP, position: 16 });
        m.branches.push(br.clone());
        m.validate(1).unwrap();
        assert_eq!(br.tap.as_ref().unwrap().positions(), 33);
        assert!((br.tap.as_ref().unwrap().ratio(16) - 1.0).abs() < 1e-12);
        m.branches[0].tap.as_mut().unwrap().max = 1.2;
        assert_eq!(m.validate(1).unwrap_err().entity, "X");
        m.branches[0].tap.as_mut().unwrap().max = 1.1;
        m.branches[0].tap.as_mut().unwrap().step = 0.007;
        assert_eq!(m.validate(1).unwrap_err().entity, "X");
    }

    #[test]
    fn two_slacks_in_one_island_rejected() {
        let mut m = minimal(1);
        m.buses.push(bus("S2", BusKind::Slack, Level::Subtransmission));
        m.load_series.push(vec![(0.0, 0.0)]);
        m.branches.push(line("L", "S", "S2"));
        assert!(m.validate(1).unwrap_err().reason.contains("slack"));
    }

    #[test]
    fn snapshot_reads_interval_and_bounds() {
        let m = minimal(3);
        let s = snapshot_at(&m, 0).unwrap();
        assert_eq!(s.feeders[0].loads, vec![(0.1, 0.05), (0.0, 0.0)]);
        assert_eq!(snapshot_at(&m, 3).unwrap_err(), IntervalOutOfRange { interval: 3, horizon: 3 });
    }

    #[test]
    fn der_capability() {
        let pv = Der {
            id: "pv".into(),
            bus: "A".into(),
            kind: DerKind::PvInverter,
            s_rating: 0.5,
            p_avail: 0.0,
            p_set: 0.5,
            q_set: 0.0,
            dr_cost: 1.0,
            network_tier: NetworkTier::Nan,
        };
        assert_eq!(pv.effective_injection(DerSetpoint { p: 0.5, q: 0.4 }, 0.3), (0.3, 0.4));
        assert!(pv.check_setpoint(DerSetpoint { p: 0.3, q: 0.4 }, 0.3).is_ok());
        assert!(pv.check_setpoint(DerSetpoint { p: 0.4, q: 0.4 }, 0.45).is_err());
        assert!(pv.check_setpoint(DerSetpoint { p: -0.1, q: 0.0 }, 0.3).is_err());
    }
}

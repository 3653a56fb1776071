use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::CommsError;
use crate::coordinator::TimingBudget;
use crate::model::NetworkTier;

/// AMI data-rate envelope, bits/second.
pub const AMI_BANDWIDTH_RANGE: (f64, f64) = (10_000.0, 1_200_000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    EmsDmsLink,
    SubstationLan,
    Fan,
    Nan,
    Ami,
}

impl From<NetworkTier> for Tier {
    fn from(t: NetworkTier) -> Self {
        match t {
            NetworkTier::SubstationLan => Tier::SubstationLan,
            NetworkTier::Fan => Tier::Fan,
            NetworkTier::Nan => Tier::Nan,
            NetworkTier::Ami => Tier::Ami,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Constant,
    Lognormal,
}

/// Propagation-latency distribution plus link capacity of one network path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub tier: Tier,
    pub distribution: Distribution,
    /// Mean one-way latency in seconds.
    pub mean_s: f64,
    /// Lognormal shape; ignored for constant links.
    #[serde(default)]
    pub sigma: f64,
    /// `None` models an unconstrained link with no transmission delay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_bps: Option<f64>,
    #[serde(default)]
    pub loss_prob: f64,
}

impl LatencyModel {
    pub fn constant(tier: Tier, mean_s: f64) -> Self {
        Self {
            tier,
            distribution: Distribution::Constant,
            mean_s,
            sigma: 0.0,
            bandwidth_bps: None,
            loss_prob: 0.0,
        }
    }

    pub fn lognormal(tier: Tier, mean_s: f64, sigma: f64) -> Self {
        Self {
            distribution: Distribution::Lognormal,
            sigma,
            ..Self::constant(tier, mean_s)
        }
    }

    pub fn with_bandwidth(mut self, bps: f64) -> Self {
        self.bandwidth_bps = Some(bps);
        self
    }

    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_prob = p;
        self
    }

    pub fn validate(&self, ami_realism: bool) -> Result<(), CommsError> {
        let bad = |reason: String| CommsError::InvalidModel { tier: self.tier, reason };
        if !(self.mean_s > 0.0 && self.mean_s.is_finite()) {
            return Err(bad(format!("mean_s {} must be positive", self.mean_s)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(bad(format!("sigma {} must be non-negative", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(bad(format!("loss_prob {} outside [0, 1]", self.loss_prob)));
        }
        if let Some(bw) = self.bandwidth_bps {
            if !(bw > 0.0) {
                return Err(bad(format!("bandwidth_bps {bw} must be positive")));
            }
            let (lo, hi) = AMI_BANDWIDTH_RANGE;
            if ami_realism && self.tier == Tier::Ami && !(lo..=hi).contains(&bw) {
                return Err(bad(format!("AMI bandwidth {bw} outside [{lo}, {hi}] bps")));
            }
        }
        Ok(())
    }

    /// Seconds needed to clock `bytes` onto the link.
    pub fn transmission_delay(&self, bytes: u32) -> f64 {
        self.bandwidth_bps.map_or(0.0, |bw| f64::from(bytes) * 8.0 / bw)
    }

    /// Latency for a standard-normal draw `z`. Lognormal parameters are
    /// chosen so the distribution mean equals `mean_s`; for a fixed `z` the
    /// result grows with `mean_s`.
    pub fn latency_for(&self, z: f64) -> f64 {
        let l = match self.distribution {
            Distribution::Constant => self.mean_s,
            Distribution::Lognormal => {
                let mu = self.mean_s.ln() - self.sigma * self.sigma / 2.0;
                (mu + self.sigma * z).exp()
            }
        };
        l.max(f64::MIN_POSITIVE)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.latency_for(rng.sample(StandardNormal))
    }

    /// Copy with every mean multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mean_s: self.mean_s * k,
            ..self.clone()
        }
    }
}

/// One latency model per network leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub ems_to_dms: LatencyModel,
    pub dms_to_ems: LatencyModel,
    pub substation_lan: LatencyModel,
    pub fan: LatencyModel,
    pub nan: LatencyModel,
    pub ami: LatencyModel,
}

impl LatencyTable {
    /// Realistic defaults: dedicated constant EMS link, wireless tiers with
    /// growing mean and spread.
    pub fn tiered() -> Self {
        Self {
            ems_to_dms: LatencyModel::constant(Tier::EmsDmsLink, 1.0).with_bandwidth(64_000.0),
            dms_to_ems: LatencyModel::constant(Tier::EmsDmsLink, 1.0).with_bandwidth(64_000.0),
            substation_lan: LatencyModel::constant(Tier::SubstationLan, 0.01).with_bandwidth(100e6),
            fan: LatencyModel::lognormal(Tier::Fan, 0.5, 0.5).with_bandwidth(10e6),
            nan: LatencyModel::lognormal(Tier::Nan, 2.0, 0.6).with_bandwidth(1e6),
            ami: LatencyModel::lognormal(Tier::Ami, 5.0, 0.8).with_bandwidth(100_000.0),
        }
    }

    /// Constant, unconstrained links whose one-way times reproduce the
    /// communication components of `budget`.
    pub fn budget_aligned(budget: &TimingBudget) -> Self {
        let der = budget.dms_der_roundtrip_s / 2.0;
        Self {
            ems_to_dms: LatencyModel::constant(Tier::EmsDmsLink, budget.ems_to_dms_s),
            dms_to_ems: LatencyModel::constant(Tier::EmsDmsLink, budget.dms_to_ems_s),
            substation_lan: LatencyModel::constant(Tier::SubstationLan, der),
            fan: LatencyModel::constant(Tier::Fan, der),
            nan: LatencyModel::constant(Tier::Nan, der),
            ami: LatencyModel::constant(Tier::Ami, der),
        }
    }

    pub fn der_tier(&self, tier: NetworkTier) -> &LatencyModel {
        match tier {
            NetworkTier::SubstationLan => &self.substation_lan,
            NetworkTier::Fan => &self.fan,
            NetworkTier::Nan => &self.nan,
            NetworkTier::Ami => &self.ami,
        }
    }

    pub fn legs(&self) -> [&LatencyModel; 6] {
        [&self.ems_to_dms, &self.dms_to_ems, &self.substation_lan, &self.fan, &self.nan, &self.ami]
    }

    fn legs_mut(&mut self) -> [&mut LatencyModel; 6] {
        [
            &mut self.ems_to_dms,
            &mut self.dms_to_ems,
            &mut self.substation_lan,
            &mut self.fan,
            &mut self.nan,
            &mut self.ami,
        ]
    }

    pub fn leg_mut(&mut self, name: &str) -> Option<&mut LatencyModel> {
        Some(match name {
            "ems_to_dms" => &mut self.ems_to_dms,
            "dms_to_ems" => &mut self.dms_to_ems,
            "substation_lan" => &mut self.substation_lan,
            "fan" => &mut self.fan,
            "nan" => &mut self.nan,
            "ami" => &mut self.ami,
            _ => return None,
        })
    }

    pub fn validate(&self, ami_realism: bool) -> Result<(), CommsError> {
        self.legs().into_iter().try_for_each(|m| m.validate(ami_realism))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyProfile {
    /// Every communication leg takes exactly its timing-budget allowance.
    BudgetAligned,
    #[default]
    Tiered,
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

fn yes() -> bool {
    true
}

/// Scenario-level latency settings resolved into a [`LatencyTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    #[serde(default)]
    pub profile: LatencyProfile,
    /// Multiplies every mean latency.
    #[serde(default = "one")]
    pub scale: f64,
    /// Seconds before a lost frame is reported to its sender.
    #[serde(default = "ten")]
    pub timeout_s: f64,
    /// When set, overrides the loss probability of every leg.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_prob: Option<f64>,
    /// Per-leg replacements keyed by leg name (`ems_to_dms`, `fan`, ...).
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub overrides: std::collections::BTreeMap<String, LatencyModel>,
    #[serde(default = "yes")]
    pub ami_realism: bool,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            profile: LatencyProfile::default(),
            scale: 1.0,
            timeout_s: 10.0,
            loss_prob: None,
            overrides: Default::default(),
            ami_realism: true,
        }
    }
}

impl LatencyConfig {
    pub fn table(&self, budget: &TimingBudget) -> Result<LatencyTable, CommsError> {
        let mut t = match self.profile {
            LatencyProfile::BudgetAligned => LatencyTable::budget_aligned(budget),
            LatencyProfile::Tiered => LatencyTable::tiered(),
        };
        for (name, m) in &self.overrides {
            *t.leg_mut(name).ok_or_else(|| CommsError::UnknownLeg(name.clone()))? = m.clone();
        }
        for leg in t.legs_mut() {
            *leg = leg.scaled(self.scale);
            if let Some(p) = self.loss_prob {
                leg.loss_prob = p;
            }
        }
        if !(self.timeout_s > 0.0) {
            return Err(CommsError::InvalidTimeout(self.timeout_s));
        }
        t.validate(self.ami_realism)?;
        Ok(t)
    }
}

/// DNP3-like framing: every `max_payload_bytes` of application data rides
/// in a fragment of at most `max_frame_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Framing {
    pub max_frame_bytes: u32,
    pub max_payload_bytes: u32,
}

impl Default for Framing {
    fn default() -> Self {
        Self {
            max_frame_bytes: 292,
            max_payload_bytes: 250,
        }
    }
}

impl Framing {
    /// Bytes on the wire for `payload` application bytes, overhead applied
    /// proportionally.
    pub fn wire_bytes(&self, payload: u32) -> u32 {
        let num = u64::from(payload) * u64::from(self.max_frame_bytes);
        num.div_ceil(u64::from(self.max_payload_bytes)) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lognormal_mean_matches_configuration() {
        let m = LatencyModel::lognormal(Tier::Nan, 2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = (0..n).map(|_| m.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
    }

    #[test]
    fn latency_grows_with_mean_for_fixed_draw() {
        let a = LatencyModel::lognormal(Tier::Fan, 0.5, 0.5);
        for z in [-3.0, -0.2, 0.0, 1.7] {
            assert!(a.scaled(1.5).latency_for(z) > a.latency_for(z));
        }
    }

    #[test]
    fn framing_overhead_is_proportional() {
        let f = Framing::default();
        assert_eq!(f.wire_bytes(250), 292);
        assert_eq!(f.wire_bytes(500), 584);
        assert_eq!(f.wire_bytes(1), 2);
    }

    #[test]
    fn ami_bandwidth_checked_when_claimed() {
        let m = LatencyModel::lognormal(Tier::Ami, 5.0, 0.8).with_bandwidth(5_000.0);
        assert!(m.validate(true).is_err());
        assert!(m.validate(false).is_ok());
    }
}

//! Static description of the model being split and of the client fleet.
//!
//! Layers are indexed from 1 as in the delay equations. A [`SplitConfig`]
//! `(h, v)` partitions them half-open: the weak side holds `1..=h`, the
//! aggregator side `h+1..=v`, the server `v+1..=V`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer cost figures used by the delay and overhead models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerProfile {
    /// Bits needed to transmit the layer's weights.
    pub weight_bits: u64,
    /// Forward-pass workload for one batch, in Flops.
    pub flops: f64,
    /// Bits of the layer's output activations for one batch.
    pub activation_bits: u64,
}

impl LayerProfile {
    /// Activation size defaults to the weight size.
    pub fn new(weight_bits: u64, flops: f64) -> Self {
        Self {
            weight_bits,
            flops,
            activation_bits: weight_bits,
        }
    }

    pub fn with_activation_bits(mut self, bits: u64) -> Self {
        self.activation_bits = bits;
        self
    }
}

impl<'de> Deserialize<'de> for LayerProfile {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            weight_bits: u64,
            flops: f64,
            activation_bits: Option<u64>,
        }
        let raw = Raw::deserialize(de)?;
        if !(raw.flops.is_finite() && raw.flops >= 0.0) {
            return Err(serde::de::Error::custom("flops must be finite and >= 0"));
        }
        Ok(Self {
            weight_bits: raw.weight_bits,
            flops: raw.flops,
            activation_bits: raw.activation_bits.unwrap_or(raw.weight_bits),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    layers: Vec<LayerProfile>,
}

impl ModelProfile {
    pub fn new(layers: Vec<LayerProfile>) -> Result<Self> {
        if layers.len() < 3 {
            return Err(Error::TooFewLayers(layers.len()));
        }
        if let Some(bad) = layers.iter().find(|l| !(l.flops.is_finite() && l.flops >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "layer flops must be finite and >= 0, got {}",
                bad.flops
            )));
        }
        Ok(Self { layers })
    }

    /// Cost profile of a dense network with the given boundary widths
    /// (`dims[0]` is the input width) at 64-bit precision.
    ///
    /// Flops count one multiply and one add per weight per sample.
    pub fn from_dense(dims: &[usize], batch_size: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::TooFewLayers(0));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0] as u64, w[1] as u64);
                LayerProfile {
                    weight_bits: 64 * (fan_in * fan_out + fan_out),
                    flops: (2 * fan_in * fan_out * batch_size as u64) as f64,
                    activation_bits: 64 * fan_out * batch_size as u64,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// V, the number of layers.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerProfile] {
        &self.layers
    }

    /// The 1-based layer `j`.
    pub fn layer(&self, j: usize) -> Result<&LayerProfile> {
        self.check_range(j, j)?;
        Ok(&self.layers[j - 1])
    }

    fn check_range(&self, lo: usize, hi: usize) -> Result<()> {
        if lo == 0 || lo > hi || hi > self.layers.len() {
            return Err(Error::LayerRange {
                lo,
                hi,
                layers: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Sum of `weight_bits` over layers `lo..=hi`.
    pub fn segment_bits(&self, lo: usize, hi: usize) -> Result<u64> {
        self.check_range(lo, hi)?;
        Ok(self.layers[lo - 1..hi].iter().map(|l| l.weight_bits).sum())
    }

    /// Sum of `flops` over layers `lo..=hi`.
    pub fn segment_flops(&self, lo: usize, hi: usize) -> Result<f64> {
        self.check_range(lo, hi)?;
        Ok(self.layers[lo - 1..hi].iter().map(|l| l.flops).sum())
    }

    /// Activation bits leaving layer `j`.
    pub fn activation_bits(&self, j: usize) -> Result<u64> {
        Ok(self.layer(j)?.activation_bits)
    }
}

/// The `(h, v)` pair: `h` is the collaborative layer, `v` the cut layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SplitConfig {
    h: usize,
    v: usize,
}

impl SplitConfig {
    pub fn new(h: usize, v: usize, layers: usize) -> Result<Self> {
        if h == 0 || h >= v || v + 1 > layers {
            return Err(Error::InvalidSplit { h, v, layers });
        }
        Ok(Self { h, v })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn v(&self) -> usize {
        self.v
    }

    /// Re-checks the pair against a model of `layers` layers.
    pub fn check(&self, layers: usize) -> Result<()> {
        Self::new(self.h, self.v, layers).map(|_| ())
    }

    pub fn weak_layers(&self) -> (usize, usize) {
        (1, self.h)
    }

    pub fn aggregator_layers(&self) -> (usize, usize) {
        (self.h + 1, self.v)
    }

    pub fn server_layers(&self, layers: usize) -> (usize, usize) {
        (self.v + 1, layers)
    }
}

impl fmt::Display for SplitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.h, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An endpoint of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entity {
    Server,
    Client(ClientId),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Server => f.write_str("server"),
            Entity::Client(id) => write!(f, "{id}"),
        }
    }
}

impl std::str::FromStr for Entity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("server") || s.eq_ignore_ascii_case("s") {
            return Ok(Entity::Server);
        }
        s.parse::<u32>()
            .map(|id| Entity::Client(ClientId(id)))
            .map_err(|_| Error::Config(format!("bad link endpoint {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weak,
    Aggregator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: ClientId,
    /// Flops per second.
    pub compute_speed: f64,
    pub role: Role,
}

/// Directed link rates in bits per second, with an optional fallback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateMap {
    links: BTreeMap<(Entity, Entity), f64>,
    default: Option<f64>,
}

impl RateMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every link runs at `rate`.
    pub fn uniform(rate: f64) -> Self {
        Self {
            links: BTreeMap::new(),
            default: Some(rate),
        }
    }

    pub fn set(&mut self, from: Entity, to: Entity, rate: f64) -> &mut Self {
        self.links.insert((from, to), rate);
        self
    }

    /// Sets both directions.
    pub fn set_symmetric(&mut self, a: Entity, b: Entity, rate: f64) -> &mut Self {
        self.set(a, b, rate).set(b, a, rate)
    }

    pub fn set_default(&mut self, rate: Option<f64>) -> &mut Self {
        self.default = rate;
        self
    }

    pub fn default_rate(&self) -> Option<f64> {
        self.default
    }

    pub fn links(&self) -> impl Iterator<Item = (&(Entity, Entity), &f64)> {
        self.links.iter()
    }

    pub fn get(&self, from: Entity, to: Entity) -> Result<f64> {
        self.links
            .get(&(from, to))
            .copied()
            .or(self.default)
            .ok_or(Error::MissingRate { from, to })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            links: self.links.iter().map(|(k, r)| (*k, r * factor)).collect(),
            default: self.default.map(|r| r * factor),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub clients: Vec<ClientSpec>,
    /// Server speed in Flops per second.
    pub server_speed: f64,
    pub rates: RateMap,
    /// Weak client -> its local aggregator. Aggregators map to themselves
    /// implicitly.
    pub assignment: BTreeMap<ClientId, ClientId>,
    /// Fraction of clients acting as local aggregators (λ).
    pub aggregator_fraction: f64,
}

impl FleetSpec {
    /// `n` clients of which the first `round(lambda * n)` (at least one) are
    /// aggregators; weak clients are dealt to aggregators round-robin.
    pub fn uniform(
        n: usize,
        lambda: f64,
        weak_speed: f64,
        aggregator_speed: f64,
        server_speed: f64,
        rate: f64,
    ) -> Self {
        let k = ((lambda * n as f64).round() as usize).clamp(1, n.max(1));
        let clients = (0..n)
            .map(|i| ClientSpec {
                id: ClientId(i as u32),
                compute_speed: if i < k { aggregator_speed } else { weak_speed },
                role: if i < k { Role::Aggregator } else { Role::Weak },
            })
            .collect();
        let assignment = (k..n)
            .map(|i| (ClientId(i as u32), ClientId(((i - k) % k) as u32)))
            .collect();
        Self {
            clients,
            server_speed,
            rates: RateMap::uniform(rate),
            assignment,
            aggregator_fraction: lambda,
        }
    }

    /// N.
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: ClientId) -> Result<&ClientSpec> {
        self.clients
            .iter()
            .find(|c| c.id == id)
            .ok_or(Error::UnknownClient(id.0))
    }

    pub fn aggregators(&self) -> impl Iterator<Item = &ClientSpec> {
        self.clients.iter().filter(|c| c.role == Role::Aggregator)
    }

    pub fn weak_clients(&self) -> impl Iterator<Item = &ClientSpec> {
        self.clients.iter().filter(|c| c.role == Role::Weak)
    }

    /// The aggregator serving `id` (an aggregator serves itself).
    pub fn aggregator_of(&self, id: ClientId) -> Result<ClientId> {
        let c = self.client(id)?;
        match c.role {
            Role::Aggregator => Ok(id),
            Role::Weak => self
                .assignment
                .get(&id)
                .copied()
                .ok_or_else(|| Error::InvalidFleet(vec![format!("client {id} unassigned")])),
        }
    }

    /// S_k in ascending id order, including `k` itself.
    pub fn members(&self, k: ClientId) -> Vec<ClientId> {
        let mut out: Vec<ClientId> = self
            .clients
            .iter()
            .filter(|c| match c.role {
                Role::Aggregator => c.id == k,
                Role::Weak => self.assignment.get(&c.id) == Some(&k),
            })
            .map(|c| c.id)
            .collect();
        out.sort();
        out
    }

    /// Σ_n x_{k,n}: how many client models aggregator `k` trains.
    pub fn load_of(&self, k: ClientId) -> usize {
        self.members(k).len()
    }

    /// Rate of the directed link; 0-cost self links are not looked up.
    pub fn rate(&self, from: Entity, to: Entity) -> Result<f64> {
        self.rates.get(from, to)
    }

    /// Copy with every compute speed and rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.clients {
            c.compute_speed *= factor;
        }
        out.server_speed *= factor;
        out.rates = self.rates.scaled(factor);
        out
    }

    /// Every invariant violation; empty means the fleet is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.clients.is_empty() {
            out.push("fleet has no clients".to_string());
        }
        let mut seen = BTreeSet::new();
        for c in &self.clients {
            if !seen.insert(c.id) {
                out.push(format!("duplicate client id {}", c.id));
            }
            if !(c.compute_speed.is_finite() && c.compute_speed > 0.0) {
                out.push(format!(
                    "client {} has non-positive compute speed {}",
                    c.id, c.compute_speed
                ));
            }
        }
        if !(self.server_speed.is_finite() && self.server_speed > 0.0) {
            out.push(format!("server has non-positive compute speed {}", self.server_speed));
        }
        let lambda = self.aggregator_fraction;
        let n_agg = self.aggregators().count();
        if !(lambda > 0.0 && lambda <= 1.0) {
            out.push(format!("aggregator fraction {lambda} outside (0, 1]"));
        } else if (lambda * self.clients.len() as f64).round() as usize != n_agg {
            out.push(format!(
                "aggregator fraction {lambda} x {} clients does not match {n_agg} aggregators",
                self.clients.len()
            ));
        }
        for (weak, agg) in &self.assignment {
            match self.client(*weak) {
                Err(_) => out.push(format!("assignment names unknown client {weak}")),
                Ok(c) if c.role == Role::Aggregator && agg != weak => {
                    out.push(format!("aggregator {weak} assigned to {agg}, expected itself"))
                }
                Ok(_) => {}
            }
            match self.client(*agg) {
                Err(_) => out.push(format!("client {weak} assigned to unknown aggregator {agg}")),
                Ok(c) if c.role != Role::Aggregator => {
                    out.push(format!("client {weak} assigned to non-aggregator {agg}"))
                }
                Ok(_) => {}
            }
        }
        for (link, r) in self.rates.links() {
            if !(r.is_finite() && *r > 0.0) {
                out.push(format!("rate {} -> {} is non-positive ({r})", link.0, link.1));
            }
        }
        if let Some(r) = self.rates.default_rate() {
            if !(r.is_finite() && r > 0.0) {
                out.push(format!("default rate is non-positive ({r})"));
            }
        }
        let need = |from: Entity, to: Entity, out: &mut Vec<String>| {
            if self.rates.get(from, to).is_err() {
                out.push(format!("missing rate {from} -> {to}"));
            }
        };
        for c in &self.clients {
            let me = Entity::Client(c.id);
            need(Entity::Server, me, &mut out);
            need(me, Entity::Server, &mut out);
            if c.role == Role::Weak {
                match self.assignment.get(&c.id) {
                    None => out.push(format!("weak client {} unassigned", c.id)),
                    Some(k) => {
                        let agg = Entity::Client(*k);
                        need(me, agg, &mut out);
                        need(agg, me, &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFleet(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(bits: &[u64], flops: &[f64]) -> ModelProfile {
        ModelProfile::new(bits.iter().zip(flops).map(|(&b, &f)| LayerProfile::new(b, f)).collect()).unwrap()
    }

    #[test]
    fn segment_sums() {
        let p = flat(&[10, 10, 10, 10], &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(p.segment_bits(1, 2).unwrap(), 20);
        assert_eq!(p.segment_flops(1, 2).unwrap(), 4.0);
        assert_eq!(p.segment_flops(3, 3).unwrap(), 2.0);
        assert!(matches!(p.segment_bits(3, 2), Err(Error::LayerRange { .. })));
        assert!(p.segment_flops(1, 5).is_err());
        assert!(p.segment_bits(0, 1).is_err());

        let z = flat(&[0, 0, 0], &[0.0; 3]);
        assert_eq!(z.segment_bits(1, 3).unwrap(), 0);
    }

    #[test]
    fn activation_bits_default_to_weight_bits() {
        let l = LayerProfile::new(42, 1.0);
        assert_eq!(l.activation_bits, 42);
        let l: LayerProfile = toml::from_str("weight_bits = 7\nflops = 3.0").unwrap();
        assert_eq!(l.activation_bits, 7);
        let l: LayerProfile = toml::from_str("weight_bits = 7\nflops = 3.0\nactivation_bits = 9").unwrap();
        assert_eq!(l.activation_bits, 9);
    }

    #[test]
    fn profile_needs_three_layers() {
        assert!(matches!(
            ModelProfile::new(vec![LayerProfile::new(1, 1.0); 2]),
            Err(Error::TooFewLayers(2))
        ));
    }

    #[test]
    fn split_bounds() {
        assert!(SplitConfig::new(1, 2, 3).is_ok());
        assert!(SplitConfig::new(0, 2, 4).is_err());
        assert!(SplitConfig::new(2, 2, 4).is_err());
        assert!(SplitConfig::new(1, 4, 4).is_err());
        let s = SplitConfig::new(2, 3, 5).unwrap();
        assert_eq!(s.weak_layers(), (1, 2));
        assert_eq!(s.aggregator_layers(), (3, 3));
        assert_eq!(s.server_layers(5), (4, 5));
    }

    #[test]
    fn dense_profile() {
        let p = ModelProfile::from_dense(&[4, 8, 8, 3], 2).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.layer(1).unwrap().weight_bits, 64 * 40);
        assert_eq!(p.layer(3).unwrap().flops, (2 * 8 * 3 * 2) as f64);
        assert_eq!(p.layer(2).unwrap().activation_bits, 64 * 8 * 2);
    }

    fn small_fleet() -> FleetSpec {
        let mut rates = RateMap::new();
        let (s, a, w) = (Entity::Server, Entity::Client(ClientId(0)), Entity::Client(ClientId(1)));
        rates.set_symmetric(s, a, 1.0);
        rates.set_symmetric(s, w, 1.0);
        rates.set_symmetric(a, w, 1.0);
        FleetSpec {
            clients: vec![
                ClientSpec {
                    id: ClientId(0),
                    compute_speed: 16.0,
                    role: Role::Aggregator,
                },
                ClientSpec {
                    id: ClientId(1),
                    compute_speed: 2.0,
                    role: Role::Weak,
                },
            ],
            server_speed: 100.0,
            rates,
            assignment: [(ClientId(1), ClientId(0))].into_iter().collect(),
            aggregator_fraction: 0.5,
        }
    }

    #[test]
    fn complete_fleet_is_valid() {
        let f = small_fleet();
        assert!(f.violations().is_empty(), "{:?}", f.violations());
        assert_eq!(f.members(ClientId(0)), vec![ClientId(0), ClientId(1)]);
        assert_eq!(f.load_of(ClientId(0)), 2);
        assert_eq!(f.aggregator_of(ClientId(1)).unwrap(), ClientId(0));
        assert_eq!(f.aggregator_of(ClientId(0)).unwrap(), ClientId(0));
    }

    #[test]
    fn unassigned_weak_client_reported() {
        let mut f = small_fleet();
        f.assignment.clear();
        let v = f.violations();
        assert!(v.iter().any(|m| m.contains("unassigned")), "{v:?}");
    }

    #[test]
    fn missing_rate_and_bad_speed_reported() {
        let mut f = small_fleet();
        f.rates = RateMap::new();
        f.clients[1].compute_speed = 0.0;
        let v = f.violations();
        assert!(v.iter().any(|m| m.contains("missing rate server -> 1")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("non-positive compute speed")), "{v:?}");
        assert!(matches!(f.validate(), Err(Error::InvalidFleet(_))));
    }

    #[test]
    fn reference_fleet_has_ten_aggregators() {
        let f = FleetSpec::uniform(100, 0.1, 2e9, 16e9, 100e9, 2e6);
        assert_eq!(f.aggregators().count(), 10);
        assert!(f.violations().is_empty());
        let total: usize = f.aggregators().map(|a| f.load_of(a.id)).sum();
        assert_eq!(total, 100);
    }

    #[test]
    fn lambda_mismatch_reported() {
        let mut f = FleetSpec::uniform(10, 0.2, 1.0, 1.0, 1.0, 1.0);
        f.aggregator_fraction = 0.5;
        assert!(!f.violations().is_empty());
    }
}

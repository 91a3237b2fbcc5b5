//! Per-round training delay of the three-way split.
//!
//! Phase 0 downloads the weak-side and aggregator-side models, phases 1 and
//! 2 are the forward and backward halves of one batch, and phase 3 uploads
//! the models for FedAvg. A round is `D0 + E·B·(D1 + D2) + D3`.
//!
//! Aggregation itself is treated as free. A client that is its own
//! aggregator hands activations to itself at zero cost.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::profiles::{ClientId, Entity, FleetSpec, ModelProfile, SplitConfig};
use crate::scheme::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayBreakdown {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d_round: f64,
    pub epochs: usize,
    pub batches: usize,
}

impl DelayBreakdown {
    fn compose(d0: f64, d1: f64, d2: f64, d3: f64, epochs: usize, batches: usize) -> Self {
        let d_round = d0 + (epochs * batches) as f64 * (d1 + d2) + d3;
        Self {
            d0,
            d1,
            d2,
            d3,
            d_round,
            epochs,
            batches,
        }
    }
}

/// Knobs for sensitivity studies. The default reproduces the equations as
/// written.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayOptions {
    /// Multiplier on the weak-side and aggregator-side backward workloads in
    /// phase 2. The server term always carries its own factor of 2.
    pub client_bp_factor: f64,
}

impl Default for DelayOptions {
    fn default() -> Self {
        Self { client_bp_factor: 1.0 }
    }
}

/// Shared lookups for one (profile, fleet, split) evaluation.
struct Ctx<'a> {
    profile: &'a ModelProfile,
    fleet: &'a FleetSpec,
    split: SplitConfig,
    loads: BTreeMap<ClientId, usize>,
}

impl<'a> Ctx<'a> {
    fn new(profile: &'a ModelProfile, fleet: &'a FleetSpec, split: SplitConfig) -> Result<Self> {
        split.check(profile.len())?;
        if fleet.is_empty() {
            return Err(Error::InvalidFleet(vec!["fleet has no clients".into()]));
        }
        let mut loads = BTreeMap::new();
        for c in &fleet.clients {
            *loads.entry(fleet.aggregator_of(c.id)?).or_insert(0) += 1;
        }
        Ok(Self {
            profile,
            fleet,
            split,
            loads,
        })
    }

    fn speed(&self, id: ClientId) -> Result<f64> {
        Ok(self.fleet.client(id)?.compute_speed)
    }

    /// Transmission time of `bits` between two clients; free on self links.
    fn hop(&self, from: ClientId, to: ClientId, bits: u64) -> Result<f64> {
        if from == to {
            return Ok(0.0);
        }
        Ok(bits as f64 / self.fleet.rate(Entity::Client(from), Entity::Client(to))?)
    }

    fn weak_flops(&self) -> Result<f64> {
        self.profile.segment_flops(1, self.split.h())
    }

    fn aggregator_flops(&self) -> Result<f64> {
        let (lo, hi) = self.split.aggregator_layers();
        self.profile.segment_flops(lo, hi)
    }

    fn server_flops(&self) -> Result<f64> {
        let (lo, hi) = self.split.server_layers(self.profile.len());
        self.profile.segment_flops(lo, hi)
    }

    /// Download (or, mirrored, upload) of both client-side segments.
    fn model_transfer(&self) -> Result<f64> {
        let weak_bits = self.profile.segment_bits(1, self.split.h())? as f64;
        let (lo, hi) = self.split.aggregator_layers();
        let agg_bits = self.profile.segment_bits(lo, hi)? as f64;
        let mut worst = 0.0f64;
        for c in &self.fleet.clients {
            let r = self.fleet.rate(Entity::Server, Entity::Client(c.id))?;
            worst = worst.max(weak_bits / r);
        }
        for k in self.loads.keys() {
            let r = self.fleet.rate(Entity::Server, Entity::Client(*k))?;
            worst = worst.max(agg_bits / r);
        }
        Ok(worst)
    }

    fn phase1(&self) -> Result<f64> {
        let s_h = self.profile.activation_bits(self.split.h())?;
        let s_v = self.profile.activation_bits(self.split.v())? as f64;
        let (fw, fa) = (self.weak_flops()?, self.aggregator_flops()?);
        let mut worst = 0.0f64;
        for c in &self.fleet.clients {
            let k = self.fleet.aggregator_of(c.id)?;
            let load = self.loads[&k] as f64;
            let t = fw / c.compute_speed
                + self.hop(c.id, k, s_h)?
                + fa * load / self.speed(k)?
                + load * s_v / self.fleet.rate(Entity::Client(k), Entity::Server)?;
            worst = worst.max(t);
        }
        Ok(worst)
    }

    fn phase2(&self, opts: &DelayOptions) -> Result<f64> {
        let s_h = self.profile.activation_bits(self.split.h())?;
        let (fw, fa) = (self.weak_flops()?, self.aggregator_flops()?);
        let bp = opts.client_bp_factor;
        let server = 2.0 * self.fleet.len() as f64 * self.server_flops()? / self.fleet.server_speed;
        let mut worst = 0.0f64;
        for c in &self.fleet.clients {
            let k = self.fleet.aggregator_of(c.id)?;
            let load = self.loads[&k] as f64;
            let t = bp * fa * load / self.speed(k)? + self.hop(k, c.id, s_h)? + bp * fw / c.compute_speed;
            worst = worst.max(t);
        }
        Ok(server.max(worst))
    }
}

/// Phase 0: slowest download of the weak-side or aggregator-side model.
pub fn phase0_delay(profile: &ModelProfile, fleet: &FleetSpec, split: SplitConfig) -> Result<f64> {
    Ctx::new(profile, fleet, split)?.model_transfer()
}

/// Phase 1: weak forward pass, hand-off to the aggregator, aggregator forward
/// for all of its clients and the cut-layer upload to the server.
pub fn phase1_delay(profile: &ModelProfile, fleet: &FleetSpec, split: SplitConfig) -> Result<f64> {
    Ctx::new(profile, fleet, split)?.phase1()
}

/// Phase 2: the larger of the server-side update and the client-side
/// backward chain.
pub fn phase2_delay(profile: &ModelProfile, fleet: &FleetSpec, split: SplitConfig) -> Result<f64> {
    Ctx::new(profile, fleet, split)?.phase2(&DelayOptions::default())
}

/// Phase 3: model upload. Uses the server-to-client rates, like phase 0.
pub fn phase3_delay(profile: &ModelProfile, fleet: &FleetSpec, split: SplitConfig) -> Result<f64> {
    Ctx::new(profile, fleet, split)?.model_transfer()
}

pub fn round_delay(
    profile: &ModelProfile,
    fleet: &FleetSpec,
    split: SplitConfig,
    epochs: usize,
    batches: usize,
) -> Result<DelayBreakdown> {
    round_delay_with(profile, fleet, split, epochs, batches, &DelayOptions::default())
}

pub fn round_delay_with(
    profile: &ModelProfile,
    fleet: &FleetSpec,
    split: SplitConfig,
    epochs: usize,
    batches: usize,
    opts: &DelayOptions,
) -> Result<DelayBreakdown> {
    check_counts(epochs, batches)?;
    let ctx = Ctx::new(profile, fleet, split)?;
    let d0 = ctx.model_transfer()?;
    let d1 = ctx.phase1()?;
    let d2 = ctx.phase2(opts)?;
    let d3 = ctx.model_transfer()?;
    Ok(DelayBreakdown::compose(d0, d1, d2, d3, epochs, batches))
}

fn check_counts(epochs: usize, batches: usize) -> Result<()> {
    if epochs == 0 || batches == 0 {
        return Err(Error::InvalidParameter(format!(
            "epochs and batches must be >= 1 (got E={epochs}, B={batches})"
        )));
    }
    Ok(())
}

/// Round delay of the two-way baselines, built on the same phase template
/// with the weak/aggregator distinction removed: every client trains layers
/// `1..=v` itself. SplitFed clients additionally wait for the cut-layer
/// gradient before their backward pass; LocSplitFed clients do not.
pub fn baseline_round_delay(
    scheme: Scheme,
    profile: &ModelProfile,
    fleet: &FleetSpec,
    cut: usize,
    epochs: usize,
    batches: usize,
) -> Result<DelayBreakdown> {
    check_counts(epochs, batches)?;
    let layers = profile.len();
    if cut == 0 || cut + 1 > layers {
        return Err(Error::LayerRange { lo: 1, hi: cut, layers });
    }
    if fleet.is_empty() {
        return Err(Error::InvalidFleet(vec!["fleet has no clients".into()]));
    }
    let client_bits = profile.segment_bits(1, cut)? as f64;
    let client_flops = profile.segment_flops(1, cut)?;
    let server_flops = profile.segment_flops(cut + 1, layers)?;
    let s_v = profile.activation_bits(cut)? as f64;
    let server = 2.0 * fleet.len() as f64 * server_flops / fleet.server_speed;

    let (mut d0, mut d1, mut wait) = (0.0f64, 0.0f64, 0.0f64);
    let mut client_bp = 0.0f64;
    for c in &fleet.clients {
        let me = Entity::Client(c.id);
        let down = fleet.rate(Entity::Server, me)?;
        d0 = d0.max(client_bits / down);
        d1 = d1.max(client_flops / c.compute_speed + s_v / fleet.rate(me, Entity::Server)?);
        wait = wait.max(s_v / down + client_flops / c.compute_speed);
        client_bp = client_bp.max(client_flops / c.compute_speed);
    }
    let d2 = match scheme {
        Scheme::Sfl => server + wait,
        Scheme::LocSplitFed => server.max(client_bp),
        Scheme::Csfl => {
            return Err(Error::InvalidParameter(
                "C-SFL delay needs a full split; use round_delay".into(),
            ))
        }
    };
    Ok(DelayBreakdown::compose(d0, d1, d2, d0, epochs, batches))
}

/// Round delay for any scheme. SplitFed and LocSplitFed use only `split.v()`.
pub fn scheme_round_delay(
    scheme: Scheme,
    profile: &ModelProfile,
    fleet: &FleetSpec,
    split: SplitConfig,
    epochs: usize,
    batches: usize,
) -> Result<DelayBreakdown> {
    match scheme {
        Scheme::Csfl => round_delay(profile, fleet, split, epochs, batches),
        _ => baseline_round_delay(scheme, profile, fleet, split.v(), epochs, batches),
    }
}

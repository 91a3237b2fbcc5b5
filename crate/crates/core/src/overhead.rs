//! Bits transmitted per round by each scheme.
//!
//! Activation and gradient traffic happens every epoch. In verbatim mode the
//! closed forms count it once per round (as if `E = 1`); otherwise those
//! terms are multiplied by the number of epochs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::profiles::{ModelProfile, SplitConfig};
use crate::scheme::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadReport {
    pub scheme: Scheme,
    pub bits_per_round: f64,
    pub activations_bits: f64,
    pub gradients_bits: f64,
    pub model_exchange_bits: f64,
}

impl OverheadReport {
    fn new(scheme: Scheme, activations_bits: f64, gradients_bits: f64, model_exchange_bits: f64) -> Self {
        Self {
            scheme,
            bits_per_round: activations_bits + gradients_bits + model_exchange_bits,
            activations_bits,
            gradients_bits,
            model_exchange_bits,
        }
    }
}

/// Counting mode shared by the three formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadMode {
    pub epochs: usize,
    pub verbatim: bool,
}

impl OverheadMode {
    /// Activation traffic once per round.
    pub const VERBATIM: Self = Self {
        epochs: 1,
        verbatim: true,
    };

    pub fn per_epoch(epochs: usize) -> Self {
        Self {
            epochs,
            verbatim: false,
        }
    }

    fn traffic_factor(&self) -> f64 {
        if self.verbatim {
            1.0
        } else {
            self.epochs as f64
        }
    }
}

fn check_cut(profile: &ModelProfile, v: usize) -> Result<()> {
    if v == 0 || v + 1 > profile.len() {
        return Err(Error::LayerRange {
            lo: 1,
            hi: v,
            layers: profile.len(),
        });
    }
    Ok(())
}

fn check_batches(batches: usize) -> Result<()> {
    if batches == 0 {
        return Err(Error::InvalidParameter("batches must be >= 1".into()));
    }
    Ok(())
}

/// `2·(s_v·B + Σ_{1..v} a_j)·N`: activations up, gradients down, client
/// model down and up.
pub fn overhead_splitfed(
    profile: &ModelProfile,
    clients: usize,
    batches: usize,
    v: usize,
    mode: OverheadMode,
) -> Result<OverheadReport> {
    check_cut(profile, v)?;
    check_batches(batches)?;
    let n = clients as f64;
    let act = profile.activation_bits(v)? as f64 * batches as f64 * n * mode.traffic_factor();
    let models = 2.0 * profile.segment_bits(1, v)? as f64 * n;
    Ok(OverheadReport::new(Scheme::Sfl, act, act, models))
}

/// `(s_v·B + 2·Σ_{1..v} a_j)·N`: no gradient downlink.
pub fn overhead_locsplitfed(
    profile: &ModelProfile,
    clients: usize,
    batches: usize,
    v: usize,
    mode: OverheadMode,
) -> Result<OverheadReport> {
    check_cut(profile, v)?;
    check_batches(batches)?;
    let n = clients as f64;
    let act = profile.activation_bits(v)? as f64 * batches as f64 * n * mode.traffic_factor();
    let models = 2.0 * profile.segment_bits(1, v)? as f64 * n;
    Ok(OverheadReport::new(Scheme::LocSplitFed, act, 0.0, models))
}

/// `2·(s_h·B + Σ_{1..h} a_j)·(1−λ)N + 2·Σ_{h+1..v} a_j·λN + s_v·B·N`.
pub fn overhead_csfl(
    profile: &ModelProfile,
    clients: usize,
    batches: usize,
    split: SplitConfig,
    lambda: f64,
    mode: OverheadMode,
) -> Result<OverheadReport> {
    split.check(profile.len())?;
    check_batches(batches)?;
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "aggregator fraction {lambda} outside (0, 1]"
        )));
    }
    let n = clients as f64;
    let weak = (1.0 - lambda) * n;
    let aggs = lambda * n;
    if (weak - weak.round()).abs() > 1e-6 || (aggs - aggs.round()).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} x {clients} clients is not a whole number of aggregators"
        )));
    }
    let (weak, aggs) = (weak.round(), aggs.round());
    let b = batches as f64;
    let t = mode.traffic_factor();
    let (h, v) = (split.h(), split.v());
    let (lo, hi) = split.aggregator_layers();

    let collab = profile.activation_bits(h)? as f64 * b * weak * t;
    let cut = profile.activation_bits(v)? as f64 * b * n * t;
    let weak_models = 2.0 * profile.segment_bits(1, h)? as f64 * weak;
    let agg_models = 2.0 * profile.segment_bits(lo, hi)? as f64 * aggs;
    Ok(OverheadReport::new(
        Scheme::Csfl,
        collab + cut,
        collab,
        weak_models + agg_models,
    ))
}

/// Dispatch on scheme. `lambda` is ignored by the two baselines.
pub fn overhead(
    scheme: Scheme,
    profile: &ModelProfile,
    clients: usize,
    batches: usize,
    split: SplitConfig,
    lambda: f64,
    mode: OverheadMode,
) -> Result<OverheadReport> {
    match scheme {
        Scheme::Sfl => overhead_splitfed(profile, clients, batches, split.v(), mode),
        Scheme::LocSplitFed => overhead_locsplitfed(profile, clients, batches, split.v(), mode),
        Scheme::Csfl => overhead_csfl(profile, clients, batches, split, lambda, mode),
    }
}

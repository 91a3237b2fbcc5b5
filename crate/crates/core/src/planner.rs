//! Exhaustive search for the `(h, v)` pair with the smallest round delay.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::delay::{round_delay_with, DelayBreakdown, DelayOptions};
use crate::error::{Error, Result};
use crate::overhead::{overhead_csfl, OverheadMode};
use crate::profiles::{FleetSpec, ModelProfile, SplitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub split: SplitConfig,
    pub delay: DelayBreakdown,
    pub csfl_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub best: SplitConfig,
    pub best_delay: DelayBreakdown,
    /// Every valid pair, by ascending round delay then `(h, v)`.
    pub candidates: Vec<Candidate>,
    /// Number of round-delay evaluations performed.
    pub evaluations: usize,
}

/// All pairs `min_h <= h < v <= V-1` in lexicographic order.
pub fn enumerate_splits(layers: usize, min_h: usize) -> Result<Vec<SplitConfig>> {
    if layers < 3 {
        return Err(Error::TooFewLayers(layers));
    }
    let min_h = min_h.max(1);
    let mut out = Vec::new();
    for h in min_h..layers.saturating_sub(1) {
        for v in h + 1..layers {
            out.push(SplitConfig::new(h, v, layers)?);
        }
    }
    Ok(out)
}

/// Σ_{h=min_h}^{V−2} (V−1−h).
pub fn split_count(layers: usize, min_h: usize) -> usize {
    let min_h = min_h.max(1);
    (min_h..layers.saturating_sub(1)).map(|h| layers - 1 - h).sum()
}

fn by_delay(a: &Candidate, b: &Candidate) -> Ordering {
    a.delay
        .d_round
        .total_cmp(&b.delay.d_round)
        .then_with(|| a.split.cmp(&b.split))
}

/// Evaluates every valid pair. Ties go to the smaller `h`, then smaller `v`.
/// Overheads use the per-epoch counting mode.
pub fn plan(
    profile: &ModelProfile,
    fleet: &FleetSpec,
    epochs: usize,
    batches: usize,
    min_h: usize,
) -> Result<PlanResult> {
    plan_with(
        profile,
        fleet,
        epochs,
        batches,
        min_h,
        &DelayOptions::default(),
        OverheadMode::per_epoch(epochs),
    )
}

/// [`plan`] with explicit delay knobs and overhead accounting for the
/// `csfl_bits` column.
pub fn plan_with(
    profile: &ModelProfile,
    fleet: &FleetSpec,
    epochs: usize,
    batches: usize,
    min_h: usize,
    opts: &DelayOptions,
    mode: OverheadMode,
) -> Result<PlanResult> {
    fleet.validate()?;
    let splits = enumerate_splits(profile.len(), min_h)?;
    if splits.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no valid split with h >= {min_h} for {} layers",
            profile.len()
        )));
    }
    let lambda = fleet.aggregator_fraction;
    let mut candidates = Vec::with_capacity(splits.len());
    for split in splits {
        let delay = round_delay_with(profile, fleet, split, epochs, batches, opts)?;
        let csfl_bits = overhead_csfl(profile, fleet.len(), batches, split, lambda, mode)
            .map(|r| r.bits_per_round)
            .unwrap_or(f64::NAN);
        candidates.push(Candidate {
            split,
            delay,
            csfl_bits,
        });
    }
    let evaluations = candidates.len();
    candidates.sort_by(by_delay);
    let first = candidates[0];
    Ok(PlanResult {
        best: first.split,
        best_delay: first.delay,
        candidates,
        evaluations,
    })
}

impl PlanResult {
    /// Candidate table: `h,v,d0_s,d1_s,d2_s,d3_s,d_round_s,csfl_bits`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "v", "d0_s", "d1_s", "d2_s", "d3_s", "d_round_s", "csfl_bits"])?;
        for c in &self.candidates {
            let d = &c.delay;
            w.write_record([
                c.split.h().to_string(),
                c.split.v().to_string(),
                d.d0.to_string(),
                d.d1.to_string(),
                d.d2.to_string(),
                d.d3.to_string(),
                d.d_round.to_string(),
                c.csfl_bits.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

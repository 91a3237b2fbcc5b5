//! Round and epoch state machines for SplitFed, LocSplitFed and C-SFL.
//!
//! Every client holds a replica of the full parameter vector for the
//! duration of a round; each role only ever writes its own block range.
//! Clients within an epoch are independent, so they are processed in
//! ascending index order and every reduction runs in that same order.
//! Simulated time comes from the delay model, never from the host clock.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Shard};
use crate::delay::scheme_round_delay;
use crate::engine::{
    accuracy, average_blocks_in_place, average_params, backward_range, forward_range, local_loss_and_grads,
    softmax_cross_entropy, AuxHead, Batch, NetSpec, ParamSet,
};
use crate::error::{Error, Result};
use crate::overhead::{overhead, OverheadMode};
use crate::profiles::{FleetSpec, ModelProfile, SplitConfig};
use crate::scheme::Scheme;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// SplitFed and LocSplitFed only use the cut layer `v`.
    pub split: SplitConfig,
    pub epochs: usize,
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl SchemeConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        self.split.check(blocks)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub cum_delay_s: f64,
    pub cum_bits: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

/// Global models between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// `W^w ∥ W^a ∥ W^s` as one vector.
    pub model: ParamSet,
    /// Local-loss head; unused by SplitFed.
    pub aux: AuxHead,
    pub round: usize,
}

impl TrainState {
    pub fn new(spec: &NetSpec, split: SplitConfig) -> Result<Self> {
        split.check(spec.blocks())?;
        Ok(Self {
            model: ParamSet::init(spec),
            aux: AuxHead::for_net(spec, split.v())?,
            round: 0,
        })
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The batches client `shard.client` visits in `round`: one seeded shuffle of
/// its shard per round, cut into whole batches. Every scheme and every epoch
/// of the round uses the same order.
pub fn batch_order(seed: u64, round: usize, shard: &Shard, batch_size: usize) -> Vec<Vec<usize>> {
    let key = mix(mix(seed ^ mix(round as u64)) ^ shard.client as u64);
    let mut idx = shard.indices.clone();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    idx.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// State visible at an epoch boundary, after that epoch's averaging.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub replicas: &'a [ParamSet],
    pub aux: &'a [ParamSet],
}

/// How client-side blocks are updated and grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flavor {
    /// Server gradient flows back to the client.
    Sfl,
    /// Local loss at the cut layer drives the client side.
    LocalLoss,
}

struct RoundPlan<'a> {
    flavor: Flavor,
    split: SplitConfig,
    lr: f64,
    epochs: usize,
    /// Client indices averaged together every epoch on blocks `h+1..=v`.
    epoch_groups: Option<&'a [Vec<usize>]>,
}

/// Server-side step: forward from the cut activations, global loss,
/// backward into `grads`. Returns the loss and the cut-layer gradient.
fn server_step(
    model: &ParamSet,
    cut: &crate::engine::Matrix,
    labels: &[usize],
    v: usize,
    grads: &mut ParamSet,
) -> Result<(f64, crate::engine::Matrix)> {
    let tape = forward_range(model, cut, v + 1, model.blocks())?;
    let (loss, dlogits) = softmax_cross_entropy(tape.output(), labels)?;
    let dcut = backward_range(model, &tape, dlogits, grads)?;
    Ok((loss, dcut))
}

fn sfl_batch(model: &mut ParamSet, batch: &Batch, v: usize, lr: f64) -> Result<f64> {
    let blocks = model.blocks();
    let client_tape = forward_range(model, &batch.inputs, 1, v)?;
    let mut grads = model.zeros_like();
    let (loss, dcut) = server_step(model, client_tape.output(), &batch.labels, v, &mut grads)?;
    backward_range(model, &client_tape, dcut, &mut grads)?;
    model.sgd_blocks(&grads, lr, v + 1, blocks)?;
    model.sgd_blocks(&grads, lr, 1, v)?;
    Ok(loss)
}

fn local_loss_batch(
    model: &mut ParamSet,
    aux: &mut ParamSet,
    batch: &Batch,
    split: SplitConfig,
    lr: f64,
) -> Result<f64> {
    let (h, v) = (split.h(), split.v());
    let blocks = model.blocks();
    let head = AuxHead { params: aux.clone() };
    let local = local_loss_and_grads(model, &head, batch, split)?;
    // server side runs on the activations sent before the client update
    let mut server_grads = model.zeros_like();
    let (loss, _) = server_step(model, &local.cut_activations, &batch.labels, v, &mut server_grads)?;
    model.sgd_blocks(&server_grads, lr, v + 1, blocks)?;
    // aggregator side, then weak side
    model.sgd_blocks(&local.model, lr, h + 1, v)?;
    model.sgd_blocks(&local.model, lr, 1, h)?;
    aux.sgd_blocks(&local.aux, lr, 1, 1)?;
    Ok(loss)
}

fn average_into(items: &mut [ParamSet], members: &[usize], lo: usize, hi: usize) -> Result<()> {
    let mut refs: Vec<&mut ParamSet> = items
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| members.binary_search(i).is_ok())
        .map(|(_, p)| p)
        .collect();
    average_blocks_in_place(&mut refs, lo, hi)
}

fn run_round(
    state: &mut TrainState,
    dataset: &Dataset,
    shards: &[Shard],
    plan: &RoundPlan<'_>,
    batch_size: usize,
    seed: u64,
    observer: &mut dyn FnMut(EpochView<'_>),
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::InvalidParameter("no client shards".into()));
    }
    let blocks = state.model.blocks();
    let (h, v) = (plan.split.h(), plan.split.v());
    let n = shards.len();
    let all: Vec<usize> = (0..n).collect();
    let orders: Vec<Vec<Batch>> = shards
        .iter()
        .map(|s| {
            batch_order(seed, state.round, s, batch_size)
                .iter()
                .map(|idx| dataset.batch(idx))
                .collect()
        })
        .collect();
    let mut replicas = vec![state.model.clone(); n];
    let mut aux = vec![state.aux.params.clone(); n];
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for epoch in 0..plan.epochs {
        for (c, batches) in orders.iter().enumerate() {
            for batch in batches {
                let loss = match plan.flavor {
                    Flavor::Sfl => sfl_batch(&mut replicas[c], batch, v, plan.lr)?,
                    Flavor::LocalLoss => local_loss_batch(&mut replicas[c], &mut aux[c], batch, plan.split, plan.lr)?,
                };
                loss_sum += loss;
                loss_count += 1;
            }
        }
        average_into(&mut replicas, &all, v + 1, blocks)?;
        if let Some(groups) = plan.epoch_groups {
            for members in groups {
                average_into(&mut replicas, members, h + 1, v)?;
                average_into(&mut aux, members, 1, 1)?;
            }
        }
        observer(EpochView {
            epoch,
            replicas: &replicas,
            aux: &aux,
        });
    }

    // round end: FedAvg of the client side
    if plan.epoch_groups.is_some() {
        average_into(&mut replicas, &all, 1, h)?;
        average_into(&mut replicas, &all, h + 1, v)?;
    } else {
        average_into(&mut replicas, &all, 1, v)?;
    }
    if plan.flavor == Flavor::LocalLoss {
        let refs: Vec<&ParamSet> = aux.iter().collect();
        state.aux.params = average_params(&refs)?;
    }
    state.model = replicas.swap_remove(0);
    state.round += 1;
    Ok(if loss_count == 0 {
        f64::NAN
    } else {
        loss_sum / loss_count as f64
    })
}

fn noop(_: EpochView<'_>) {}

/// One SplitFed round. Returns the mean global training loss.
pub fn run_round_sfl(
    state: &mut TrainState,
    dataset: &Dataset,
    shards: &[Shard],
    config: &SchemeConfig,
    seed: u64,
) -> Result<f64> {
    config.validate(state.model.blocks())?;
    let plan = RoundPlan {
        flavor: Flavor::Sfl,
        split: config.split,
        lr: config.lr,
        epochs: config.epochs,
        epoch_groups: None,
    };
    run_round(state, dataset, shards, &plan, config.batch_size, seed, &mut noop)
}

/// One LocSplitFed round.
pub fn run_round_locsplitfed(
    state: &mut TrainState,
    dataset: &Dataset,
    shards: &[Shard],
    config: &SchemeConfig,
    seed: u64,
) -> Result<f64> {
    config.validate(state.model.blocks())?;
    let plan = RoundPlan {
        flavor: Flavor::LocalLoss,
        split: config.split,
        lr: config.lr,
        epochs: config.epochs,
        epoch_groups: None,
    };
    run_round(state, dataset, shards, &plan, config.batch_size, seed, &mut noop)
}

/// Positions in `fleet.clients` of each aggregator's S_k, ascending.
pub fn aggregator_groups(fleet: &FleetSpec) -> Result<Vec<Vec<usize>>> {
    fleet.validate()?;
    let pos = |id| fleet.clients.iter().position(|c| c.id == id).unwrap();
    let mut groups: Vec<Vec<usize>> = fleet
        .aggregators()
        .map(|k| {
            let mut g: Vec<usize> = fleet.members(k.id).into_iter().map(pos).collect();
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort();
    Ok(groups)
}

/// One C-SFL round. Shard `i` belongs to `fleet.clients[i]`.
pub fn run_round_csfl(
    state: &mut TrainState,
    dataset: &Dataset,
    shards: &[Shard],
    fleet: &FleetSpec,
    config: &SchemeConfig,
    seed: u64,
) -> Result<f64> {
    run_round_csfl_observed(state, dataset, shards, fleet, config, seed, &mut noop)
}

/// [`run_round_csfl`] with a callback at every epoch boundary.
pub fn run_round_csfl_observed(
    state: &mut TrainState,
    dataset: &Dataset,
    shards: &[Shard],
    fleet: &FleetSpec,
    config: &SchemeConfig,
    seed: u64,
    observer: &mut dyn FnMut(EpochView<'_>),
) -> Result<f64> {
    config.validate(state.model.blocks())?;
    if shards.len() != fleet.len() {
        return Err(Error::InvalidParameter(format!(
            "{} shards for {} clients",
            shards.len(),
            fleet.len()
        )));
    }
    let groups = aggregator_groups(fleet)?;
    let plan = RoundPlan {
        flavor: Flavor::LocalLoss,
        split: config.split,
        lr: config.lr,
        epochs: config.epochs,
        epoch_groups: Some(&groups),
    };
    run_round(state, dataset, shards, &plan, config.batch_size, seed, observer)
}

/// Everything a simulation needs besides the scheme itself.
pub struct Setup<'a> {
    pub net: &'a NetSpec,
    pub profile: &'a ModelProfile,
    pub fleet: &'a FleetSpec,
    pub dataset: &'a Dataset,
    pub shards: &'a [Shard],
}

/// Runs `config.rounds` rounds and records the trace. Delay and bits are
/// charged per round from the analytical models.
pub fn simulate(config: &SchemeConfig, setup: &Setup<'_>, seed: u64) -> Result<Vec<RoundTrace>> {
    simulate_with_state(config, setup, seed).map(|(t, _)| t)
}

/// [`simulate`], also returning the final global state.
pub fn simulate_with_state(
    config: &SchemeConfig,
    setup: &Setup<'_>,
    seed: u64,
) -> Result<(Vec<RoundTrace>, TrainState)> {
    let blocks = setup.net.blocks();
    config.validate(blocks)?;
    if setup.profile.len() != blocks {
        return Err(Error::InvalidParameter(format!(
            "cost profile has {} layers, network has {blocks} blocks",
            setup.profile.len()
        )));
    }
    setup.fleet.validate()?;
    if setup.shards.len() != setup.fleet.len() {
        return Err(Error::InvalidParameter(format!(
            "{} shards for {} clients",
            setup.shards.len(),
            setup.fleet.len()
        )));
    }
    let batches = setup
        .shards
        .iter()
        .map(|s| s.batches(config.batch_size))
        .max()
        .unwrap_or(0);
    if batches == 0 {
        return Err(Error::InvalidParameter(format!(
            "no client has a full batch of {}",
            config.batch_size
        )));
    }
    let delay = scheme_round_delay(
        config.scheme,
        setup.profile,
        setup.fleet,
        config.split,
        config.epochs,
        batches,
    )?;
    let bits = overhead(
        config.scheme,
        setup.profile,
        setup.fleet.len(),
        batches,
        config.split,
        setup.fleet.aggregator_fraction,
        OverheadMode::per_epoch(config.epochs),
    )?;

    let mut state = TrainState::new(setup.net, config.split)?;
    let test = setup.dataset.test_batch();
    let mut out = Vec::with_capacity(config.rounds);
    let (mut cum_delay, mut cum_bits) = (0.0, 0.0);
    for _ in 0..config.rounds {
        let loss = match config.scheme {
            Scheme::Sfl => run_round_sfl(&mut state, setup.dataset, setup.shards, config, seed)?,
            Scheme::LocSplitFed => run_round_locsplitfed(&mut state, setup.dataset, setup.shards, config, seed)?,
            Scheme::Csfl => run_round_csfl(&mut state, setup.dataset, setup.shards, setup.fleet, config, seed)?,
        };
        cum_delay += delay.d_round;
        cum_bits += bits.bits_per_round;
        out.push(RoundTrace {
            round: state.round,
            cum_delay_s: cum_delay,
            cum_bits,
            train_loss: loss,
            test_acc: accuracy(&state.model, &test.inputs, &test.labels)?,
        });
    }
    Ok((out, state))
}

/// `round,cum_delay_s,cum_bits,train_loss,test_acc`.
pub fn write_trace_csv<W: Write>(trace: &[RoundTrace], out: W) -> Result<()> {
    // explicit header so an empty trace still gets one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["round", "cum_delay_s", "cum_bits", "train_loss", "test_acc"])?;
    for t in trace {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

/// Test accuracy of the latest round whose cumulative delay is within
/// `budget_s` (0 before the first round completes).
pub fn accuracy_at_delay(trace: &[RoundTrace], budget_s: f64) -> f64 {
    trace
        .iter()
        .take_while(|t| t.cum_delay_s <= budget_s)
        .last()
        .map_or(0.0, |t| t.test_acc)
}

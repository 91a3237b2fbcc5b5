//! Independent oracles shared by the integration tests. Nothing here calls
//! into the delay model, planner or backprop code it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use csfl_core::engine::{forward, softmax_cross_entropy, AuxHead, Batch, Matrix, ParamSet};
use csfl_core::{ClientId, ClientSpec, Entity, FleetSpec, LayerProfile, ModelProfile, RateMap, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fleet described by plain arrays, indexed by client position.
#[derive(Debug, Clone)]
pub struct RawFleet {
    pub speed: Vec<f64>,
    /// Aggregator position for each client (itself for aggregators).
    pub agg: Vec<usize>,
    pub server_speed: f64,
    pub down: Vec<f64>,
    pub up: Vec<f64>,
    /// to_agg[n] = rate n -> agg[n], from_agg[n] = rate agg[n] -> n.
    pub to_agg: Vec<f64>,
    pub from_agg: Vec<f64>,
}

impl RawFleet {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Self {
        let agg: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let mut r = |lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        Self {
            speed: r(1e9, 2e10),
            server_speed: 1e11,
            down: r(1e6, 1e7),
            up: r(1e6, 1e7),
            to_agg: r(1e6, 1e8),
            from_agg: r(1e6, 1e8),
            agg,
        }
    }

    pub fn k(&self) -> usize {
        (0..self.agg.len()).filter(|&i| self.agg[i] == i).count()
    }

    pub fn to_fleet(&self) -> FleetSpec {
        let n = self.agg.len();
        let id = |i: usize| ClientId(i as u32);
        let e = |i: usize| Entity::Client(id(i));
        let mut rates = RateMap::new();
        let mut assignment = BTreeMap::new();
        for i in 0..n {
            rates.set(Entity::Server, e(i), self.down[i]);
            rates.set(e(i), Entity::Server, self.up[i]);
            if self.agg[i] != i {
                rates.set(e(i), e(self.agg[i]), self.to_agg[i]);
                rates.set(e(self.agg[i]), e(i), self.from_agg[i]);
                assignment.insert(id(i), id(self.agg[i]));
            }
        }
        FleetSpec {
            clients: (0..n)
                .map(|i| ClientSpec {
                    id: id(i),
                    compute_speed: self.speed[i],
                    role: if self.agg[i] == i { Role::Aggregator } else { Role::Weak },
                })
                .collect(),
            server_speed: self.server_speed,
            rates,
            assignment,
            aggregator_fraction: self.k() as f64 / n as f64,
        }
    }
}

pub fn random_profile(rng: &mut ChaCha8Rng, layers: usize) -> ModelProfile {
    ModelProfile::new(
        (0..layers)
            .map(|_| {
                LayerProfile::new(rng.random_range(1_000..10_000_000), rng.random_range(1e6..1e10))
                    .with_activation_bits(rng.random_range(1_000..10_000_000))
            })
            .collect(),
    )
    .unwrap()
}

/// Straight transcription of the four phase formulas over plain arrays
/// (half-open segments, zero-cost self links, aggregator terms at p_k).
pub fn oracle_phases(p: &ModelProfile, f: &RawFleet, h: usize, v: usize) -> [f64; 4] {
    let l = p.layers();
    let big_v = l.len();
    let sum_a = |lo: usize, hi: usize| (lo..=hi).map(|j| l[j - 1].weight_bits as f64).sum::<f64>();
    let sum_f = |lo: usize, hi: usize| (lo..=hi).map(|j| l[j - 1].flops).sum::<f64>();
    let n = f.agg.len();
    let load = |k: usize| (0..n).filter(|&i| f.agg[i] == k).count() as f64;
    let s_h = l[h - 1].activation_bits as f64;
    let s_v = l[v - 1].activation_bits as f64;

    let mut d0: f64 = 0.0;
    for i in 0..n {
        d0 = d0.max(sum_a(1, h) / f.down[i]);
        if f.agg[i] == i {
            d0 = d0.max(sum_a(h + 1, v) / f.down[i]);
        }
    }
    let mut d1: f64 = 0.0;
    let mut d2: f64 = 2.0 * n as f64 * sum_f(v + 1, big_v) / f.server_speed;
    for i in 0..n {
        let k = f.agg[i];
        let (hand_up, hand_down) = if k == i {
            (0.0, 0.0)
        } else {
            (s_h / f.to_agg[i], s_h / f.from_agg[i])
        };
        d1 = d1
            .max(sum_f(1, h) / f.speed[i] + hand_up + sum_f(h + 1, v) * load(k) / f.speed[k] + load(k) * s_v / f.up[k]);
        d2 = d2.max(sum_f(h + 1, v) * load(k) / f.speed[k] + hand_down + sum_f(1, h) / f.speed[i]);
    }
    [d0, d1, d2, d0]
}

pub fn oracle_round(p: &ModelProfile, f: &RawFleet, h: usize, v: usize, e: usize, b: usize) -> f64 {
    let [d0, d1, d2, d3] = oracle_phases(p, f, h, v);
    d0 + (e * b) as f64 * (d1 + d2) + d3
}

/// Argmin over all pairs by a plain double loop; ties keep the first pair.
pub fn oracle_best(p: &ModelProfile, f: &RawFleet, e: usize, b: usize, min_h: usize) -> ((usize, usize), f64) {
    let big_v = p.len();
    let mut best = ((0, 0), f64::INFINITY);
    for h in min_h..=big_v - 2 {
        for v in h + 1..=big_v - 1 {
            let d = oracle_round(p, f, h, v, e, b);
            if d < best.1 {
                best = ((h, v), d);
            }
        }
    }
    best
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize, classes: usize) -> Batch {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Matrix::from_vec(rows, cols, data).unwrap(), labels).unwrap()
}

pub fn global_loss(params: &ParamSet, batch: &Batch) -> f64 {
    let logits = forward(params, &batch.inputs, params.blocks()).unwrap();
    softmax_cross_entropy(&logits, &batch.labels).unwrap().0
}

pub fn local_loss(params: &ParamSet, aux: &AuxHead, batch: &Batch, v: usize) -> f64 {
    let cut = forward(params, &batch.inputs, v).unwrap();
    let logits = forward(&aux.params, &cut, 1).unwrap();
    softmax_cross_entropy(&logits, &batch.labels).unwrap().0
}

/// Central differences of `loss` w.r.t. every entry of `x`.
pub fn central_differences(x: &[f64], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = loss(&probe);
            probe[i] = orig - step;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest |a−b| / max(|a|, |b|, 1e-6) over all entries.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use csfl_core::engine::{global_loss_and_grads, local_loss_and_grads, NetSpec};
use csfl_core::SplitConfig;

/// Random net with 3..=5 blocks, widths <= 8, batch <= 4.
pub fn random_net(rng: &mut ChaCha8Rng) -> (ParamSet, Batch) {
    let blocks = rng.random_range(3..=5);
    let dims: Vec<usize> = (0..=blocks).map(|_| rng.random_range(2..=8)).collect();
    let spec = NetSpec::new(dims.clone(), rng.random()).unwrap();
    let mut params = ParamSet::init(&spec);
    // non-zero biases so ReLU kinks are not hit by construction
    for x in params.as_mut_slice() {
        if *x == 0.0 {
            *x = rng.random_range(-0.1..0.1);
        }
    }
    let rows = rng.random_range(1..=4);
    let batch = random_batch(rng, rows, dims[0], *dims.last().unwrap());
    (params, batch)
}

pub const FD_STEP: f64 = 1e-5;

/// Max relative error of the global-loss backprop against central
/// differences.
pub fn global_grad_error(params: &ParamSet, batch: &Batch) -> f64 {
    let (_, grads) = global_loss_and_grads(params, batch).unwrap();
    let mut probe = params.clone();
    let fd = central_differences(params.as_slice(), FD_STEP, |x| {
        probe.as_mut_slice().copy_from_slice(x);
        global_loss(&probe, batch)
    });
    max_rel_error(grads.as_slice(), &fd)
}

/// Max relative error of the local-loss backprop (blocks 1..=v and the aux
/// head) against central differences, for a random split.
pub fn local_grad_error(rng: &mut ChaCha8Rng, params: &ParamSet, batch: &Batch) -> f64 {
    let blocks = params.blocks();
    let v = rng.random_range(2..blocks);
    let h = rng.random_range(1..v);
    let split = SplitConfig::new(h, v, blocks).unwrap();
    let classes = *params.dims().last().unwrap();
    let aux = AuxHead::init(params.dims()[v], classes, rng.random()).unwrap();
    let g = local_loss_and_grads(params, &aux, batch, split).unwrap();

    let mut probe = params.clone();
    let fd_model = central_differences(params.as_slice(), FD_STEP, |x| {
        probe.as_mut_slice().copy_from_slice(x);
        local_loss(&probe, &aux, batch, v)
    });
    let mut head = aux.clone();
    let fd_aux = central_differences(aux.params.as_slice(), FD_STEP, |x| {
        head.params.as_mut_slice().copy_from_slice(x);
        local_loss(params, &head, batch, v)
    });
    max_rel_error(g.model.as_slice(), &fd_model).max(max_rel_error(g.aux.as_slice(), &fd_aux))
}

use csfl_core::data::{partition_iid, synth_blobs, Dataset, Shard};
use csfl_core::engine::sgd_step;
use csfl_core::protocol::batch_order;

/// Plain minibatch SGD on the whole model, visiting the same batches a
/// single client would: each round reuses its shuffle for every epoch.
#[allow(clippy::too_many_arguments)]
pub fn centralized_sgd(
    start: &ParamSet,
    dataset: &Dataset,
    shard: &Shard,
    rounds: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> ParamSet {
    let mut params = start.clone();
    for round in 0..rounds {
        let order = batch_order(seed, round, shard, batch_size);
        for _ in 0..epochs {
            for idx in &order {
                let (_, g) = global_loss_and_grads(&params, &dataset.batch(idx)).unwrap();
                params = sgd_step(&params, &g, lr).unwrap();
            }
        }
    }
    params
}

/// Small learning scenario: three Gaussian blobs in 8 dimensions, a
/// four-block MLP, eight clients with two aggregators.
pub struct Scenario {
    pub net: NetSpec,
    pub profile: ModelProfile,
    pub fleet: FleetSpec,
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    pub split: SplitConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub rounds: usize,
    pub lr: f64,
    pub seed: u64,
}

pub fn blob_scenario(seed: u64) -> Scenario {
    let dims = vec![8, 16, 16, 16, 3];
    let batch_size = 8;
    let dataset = synth_blobs(3, 8, 125, 0.15, seed).unwrap();
    let fleet = FleetSpec::uniform(8, 0.25, 2e9, 16e9, 100e9, 2e6);
    let shards = partition_iid(&dataset, fleet.len(), seed).unwrap();
    Scenario {
        net: NetSpec::new(dims.clone(), seed).unwrap(),
        profile: ModelProfile::from_dense(&dims, batch_size).unwrap(),
        fleet,
        dataset,
        shards,
        split: SplitConfig::new(1, 2, 4).unwrap(),
        batch_size,
        epochs: 3,
        rounds: 30,
        lr: 0.05,
        seed,
    }
}

//! Fixtures shared by the benchmarks.

use csfl_core::data::{partition_iid, synth_blobs, Dataset, Shard};
use csfl_core::{FleetSpec, LayerProfile, ModelProfile, NetSpec, SplitConfig};

/// `layers` layers with costs that grow toward the middle of the model.
pub fn profile(layers: usize) -> ModelProfile {
    ModelProfile::new(
        (0..layers)
            .map(|j| {
                let w = 1 + j.min(layers - j) as u64;
                LayerProfile::new(w * 1_000_000, w as f64 * 1e8).with_activation_bits(4_000_000 / w)
            })
            .collect(),
    )
    .expect("at least three layers")
}

/// 100 clients, 10% aggregators.
pub fn fleet() -> FleetSpec {
    FleetSpec::uniform(100, 0.1, 2e9, 16e9, 100e9, 2e6)
}

pub struct Training {
    pub net: NetSpec,
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    pub split: SplitConfig,
    pub fleet: FleetSpec,
}

pub fn training() -> Training {
    let dims = vec![8, 16, 16, 16, 3];
    let dataset = synth_blobs(3, 8, 125, 0.15, 42).expect("valid blob parameters");
    let fleet = FleetSpec::uniform(8, 0.25, 2e9, 16e9, 100e9, 2e6);
    let shards = partition_iid(&dataset, fleet.len(), 42).expect("enough samples");
    Training {
        net: NetSpec::new(dims, 42).expect("valid dims"),
        dataset,
        shards,
        split: SplitConfig::new(1, 2, 4).expect("valid split"),
        fleet,
    }
}

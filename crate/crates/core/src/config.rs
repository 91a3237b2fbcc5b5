//! TOML experiment files.
//!
//! ```toml
//! [model]
//! net_dims = [8, 16, 16, 16, 3]   # dense widths, input first
//! # or an explicit cost profile:
//! # [[model.layers]]
//! # weight_bits = 8000000
//! # flops = 2e9
//!
//! [fleet]
//! server_speed = 100e9
//! aggregator_fraction = 0.25
//! [fleet.uniform]
//! clients = 8
//! weak_speed = 2e9
//! aggregator_speed = 16e9
//! rate = 2e6
//!
//! [scheme]
//! h = 1
//! v = 2
//! epochs = 3
//! rounds = 30
//! lr = 0.05
//! batch_size = 8
//!
//! [data]
//! source = "blobs"
//!
//! [run]
//! seed = 42
//! ```
//!
//! Instead of `[fleet.uniform]` the fleet may list `[[fleet.clients]]`
//! (`id`, `compute_speed`, `role`), a `[fleet.assignment]` table mapping weak
//! client ids to aggregator ids, and a `[fleet.rates]` table whose keys are
//! `"from->to"` (`server` or a client id) plus an optional `default`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{self, Dataset, Shard};
use crate::delay::DelayOptions;
use crate::engine::NetSpec;
use crate::error::{Error, Result};
use crate::profiles::{ClientId, ClientSpec, Entity, FleetSpec, LayerProfile, ModelProfile, RateMap, SplitConfig};
use crate::protocol::SchemeConfig;
use crate::scheme::Scheme;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub fleet: FleetSection,
    pub scheme: SchemeSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub run: RunSection,
    /// Directory the file was read from; relative data paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub net_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub layers: Vec<LayerProfile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub server_speed: f64,
    pub aggregator_fraction: f64,
    #[serde(default)]
    pub uniform: Option<UniformFleet>,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub assignment: BTreeMap<String, u32>,
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformFleet {
    pub clients: usize,
    pub weak_speed: f64,
    pub aggregator_speed: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    #[serde(default)]
    pub name: Option<String>,
    pub h: usize,
    pub v: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// B for planning when no dataset is configured.
    #[serde(default)]
    pub batches: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default = "three")]
    pub num_classes: usize,
    #[serde(default = "eight")]
    pub dim: usize,
    #[serde(default = "samples")]
    pub samples_per_class: usize,
    #[serde(default = "spread")]
    pub spread: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    #[serde(default = "iid")]
    pub partition: Partition,
    #[serde(default = "two")]
    pub shards_per_client: usize,
}

fn three() -> usize {
    3
}
fn eight() -> usize {
    8
}
fn two() -> usize {
    2
}
fn samples() -> usize {
    125
}
fn spread() -> f64 {
    0.15
}
fn iid() -> Partition {
    Partition::Iid
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub min_h: Option<usize>,
    #[serde(default)]
    pub paper_verbatim: bool,
    /// Multiplier on client-side backward workloads in the delay model.
    #[serde(default)]
    pub bp_factor: Option<f64>,
}

fn parse_link(key: &str) -> Result<(Entity, Entity)> {
    let (a, b) = key
        .split_once("->")
        .ok_or_else(|| Error::Config(format!("rate key {key:?} is not \"from->to\"")))?;
    Ok((a.parse()?, b.parse()?))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn net_spec(&self, seed: u64) -> Result<NetSpec> {
        let dims = self
            .model
            .net_dims
            .clone()
            .ok_or_else(|| Error::Config("model.net_dims is required for training".into()))?;
        NetSpec::new(dims, seed)
    }

    /// Explicit `[[model.layers]]` if given, else the dense network's costs
    /// at the configured batch size.
    pub fn profile(&self) -> Result<ModelProfile> {
        if !self.model.layers.is_empty() {
            return ModelProfile::new(self.model.layers.clone());
        }
        match &self.model.net_dims {
            Some(dims) => ModelProfile::from_dense(dims, self.scheme.batch_size),
            None => Err(Error::Config("model needs either layers or net_dims".into())),
        }
    }

    pub fn fleet(&self) -> Result<FleetSpec> {
        let f = &self.fleet;
        let mut fleet = match &f.uniform {
            Some(u) => FleetSpec::uniform(
                u.clients,
                f.aggregator_fraction,
                u.weak_speed,
                u.aggregator_speed,
                f.server_speed,
                u.rate,
            ),
            None => FleetSpec {
                clients: f.clients.clone(),
                server_speed: f.server_speed,
                rates: RateMap::new(),
                assignment: BTreeMap::new(),
                aggregator_fraction: f.aggregator_fraction,
            },
        };
        if f.uniform.is_some() && !f.clients.is_empty() {
            return Err(Error::Config("fleet.uniform and fleet.clients are exclusive".into()));
        }
        for (weak, agg) in &f.assignment {
            let weak: u32 = weak
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("assignment key {weak:?} is not a client id")))?;
            fleet.assignment.insert(ClientId(weak), ClientId(*agg));
        }
        for (key, rate) in &f.rates {
            if key == "default" {
                fleet.rates.set_default(Some(*rate));
            } else {
                let (from, to) = parse_link(key)?;
                fleet.rates.set(from, to, *rate);
            }
        }
        Ok(fleet)
    }

    pub fn split(&self) -> Result<SplitConfig> {
        SplitConfig::new(self.scheme.h, self.scheme.v, self.profile()?.len())
    }

    /// Scheme named in the file, if any (`all` yields `None`).
    pub fn scheme_name(&self) -> Result<Option<Scheme>> {
        match self.scheme.name.as_deref() {
            None | Some("all") => Ok(None),
            Some(s) => s.parse().map(Some),
        }
    }

    pub fn scheme_config(&self, scheme: Scheme) -> Result<SchemeConfig> {
        Ok(SchemeConfig {
            scheme,
            split: self.split()?,
            epochs: self.scheme.epochs,
            rounds: self.scheme.rounds,
            lr: self.scheme.lr,
            batch_size: self.scheme.batch_size,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let d = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("a [data] section is required".into()))?;
        match d.source {
            DataSource::Blobs => data::synth_blobs(d.num_classes, d.dim, d.samples_per_class, d.spread, seed),
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, name: &str| {
                    p.as_deref()
                        .map(|p| self.resolve(p))
                        .ok_or_else(|| Error::Config(format!("data.{name} is required for IDX input")))
                };
                let train = data::load_idx(need(&d.images, "images")?, need(&d.labels, "labels")?)?;
                match (&d.test_images, &d.test_labels) {
                    (Some(ti), Some(tl)) => {
                        data::join_train_test(train, data::load_idx(self.resolve(ti), self.resolve(tl))?)
                    }
                    (None, None) => {
                        let classes = train.num_classes;
                        Dataset::with_random_split(train.inputs, train.labels, classes, seed)
                    }
                    _ => Err(Error::Config("give both test_images and test_labels or neither".into())),
                }
            }
        }
    }

    pub fn shards(&self, dataset: &Dataset, clients: usize, seed: u64) -> Result<Vec<Shard>> {
        let (partition, spc) = self
            .data
            .as_ref()
            .map_or((Partition::Iid, 2), |d| (d.partition, d.shards_per_client));
        match partition {
            Partition::Iid => data::partition_iid(dataset, clients, seed),
            Partition::Noniid => data::partition_noniid(dataset, clients, spc, seed),
        }
    }

    /// B used by the planner and the overhead table.
    pub fn batches(&self, seed: u64) -> Result<usize> {
        if let Some(b) = self.scheme.batches {
            return Ok(b);
        }
        if self.data.is_none() {
            return Err(Error::Config(
                "scheme.batches is required without a [data] section".into(),
            ));
        }
        let dataset = self.dataset(seed)?;
        let shards = self.shards(&dataset, self.fleet()?.len(), seed)?;
        Ok(shards
            .iter()
            .map(|s| s.batches(self.scheme.batch_size))
            .max()
            .unwrap_or(0))
    }

    pub fn min_h(&self) -> usize {
        self.run.min_h.unwrap_or(1)
    }

    pub fn delay_options(&self) -> Result<DelayOptions> {
        let f = self.run.bp_factor.unwrap_or(1.0);
        if !(f.is_finite() && f >= 0.0) {
            return Err(Error::Config(format!("run.bp_factor {f} must be finite and >= 0")));
        }
        Ok(DelayOptions { client_bp_factor: f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXPLICIT: &str = r#"
[model]
[[model.layers]]
weight_bits = 10
flops = 1.0
[[model.layers]]
weight_bits = 10
flops = 1.0
activation_bits = 4
[[model.layers]]
weight_bits = 10
flops = 1.0

[fleet]
server_speed = 100.0
aggregator_fraction = 0.5
[[fleet.clients]]
id = 0
compute_speed = 16.0
role = "aggregator"
[[fleet.clients]]
id = 1
compute_speed = 2.0
role = "weak"
[fleet.assignment]
1 = 0
[fleet.rates]
"server->0" = 2.0
"0->server" = 2.0
"server->1" = 2.0
"1->server" = 2.0
"1->0" = 2.0
"0->1" = 2.0

[scheme]
h = 1
v = 2
batches = 2
"#;

    #[test]
    fn explicit_fleet() {
        let c = ExperimentConfig::from_toml_str(EXPLICIT).unwrap();
        let p = c.profile().unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.layer(2).unwrap().activation_bits, 4);
        let f = c.fleet().unwrap();
        assert!(f.violations().is_empty(), "{:?}", f.violations());
        assert_eq!(f.aggregator_of(ClientId(1)).unwrap(), ClientId(0));
        assert_eq!(c.batches(0).unwrap(), 2);
        assert_eq!(c.split().unwrap(), SplitConfig::new(1, 2, 3).unwrap());
    }

    #[test]
    fn missing_rate_names_the_pair() {
        let text = EXPLICIT.replace("\"1->0\" = 2.0\n", "");
        let f = ExperimentConfig::from_toml_str(&text).unwrap().fleet().unwrap();
        let v = f.violations();
        assert!(v.iter().any(|m| m == "missing rate 1 -> 0"), "{v:?}");
    }

    #[test]
    fn uniform_fleet_and_net_profile() {
        let text = r#"
[model]
net_dims = [8, 16, 16, 16, 3]
[fleet]
server_speed = 1e11
aggregator_fraction = 0.25
[fleet.uniform]
clients = 8
weak_speed = 2e9
aggregator_speed = 16e9
rate = 2e6
[scheme]
h = 1
v = 2
batch_size = 8
[data]
source = "blobs"
"#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.profile().unwrap().len(), 4);
        assert_eq!(c.fleet().unwrap().aggregators().count(), 2);
        let d = c.dataset(1).unwrap();
        assert_eq!(d.train.len(), 300);
        assert_eq!(c.batches(1).unwrap(), 38 / 8);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = EXPLICIT.replace("[scheme]", "[scheme]\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}

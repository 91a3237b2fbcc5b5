//! Datasets and federated partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{Batch, Matrix};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset with an 80/20 train/test split drawn by `seed`.
    pub fn with_random_split(inputs: Matrix, labels: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = labels.len() * 4 / 5;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            inputs,
            labels,
            num_classes,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn test_batch(&self) -> Batch {
        self.batch(&self.test)
    }
}

/// One Gaussian cluster per class around a uniform random mean; features are
/// then min-max scaled to `[0, 1]`.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 || !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidParameter(
            "blobs need positive class count, dimension, sample count and a non-negative spread".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spread * z);
            }
            labels.push(class);
        }
    }
    for c in 0..dim {
        let col = data.iter().skip(c).step_by(dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
        let width = hi - lo;
        for x in data.iter_mut().skip(c).step_by(dim) {
            *x = if width > 0.0 { (*x - lo) / width } else { 0.0 };
        }
    }
    let inputs = Matrix::from_vec(n, dim, data)?;
    Dataset::with_random_split(inputs, labels, num_classes, seed.wrapping_add(1))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file: rows×cols bytes per item, scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::from_vec(count, dim, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Parses an image/label pair. Every sample goes to the training split.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let inputs = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if inputs.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.rows(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        train: (0..labels.len()).collect(),
        test: Vec::new(),
        inputs,
        labels,
        num_classes,
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Appends `test` as the held-out split of `train`.
pub fn join_train_test(train: Dataset, test: Dataset) -> Result<Dataset> {
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train width {} vs test width {}",
            train.dim(),
            test.dim()
        )));
    }
    let offset = train.len();
    let mut data = train.inputs.as_slice().to_vec();
    data.extend_from_slice(test.inputs.as_slice());
    let mut labels = train.labels;
    labels.extend_from_slice(&test.labels);
    Ok(Dataset {
        inputs: Matrix::from_vec(labels.len(), train.inputs.cols(), data)?,
        num_classes: train.num_classes.max(test.num_classes),
        train: (0..offset).collect(),
        test: (offset..labels.len()).collect(),
        labels,
    })
}

/// Encodes inputs (as 1×dim images, values ×255 rounded) and labels in IDX.
pub fn to_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if dataset.num_classes > 256 {
        return Err(Error::InvalidParameter("IDX labels hold at most 256 classes".into()));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.inputs.as_slice().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    images.extend_from_slice(&(dataset.dim() as u32).to_be_bytes());
    images.extend(
        dataset
            .inputs
            .as_slice()
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn save_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = to_idx(dataset)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// A client's slice of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub client: usize,
    /// Sorted indices into the dataset.
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// B: whole batches available at this batch size.
    pub fn batches(&self, batch_size: usize) -> usize {
        self.indices.len().checked_div(batch_size).unwrap_or(0)
    }
}

fn check_clients(dataset: &Dataset, clients: usize) -> Result<()> {
    if clients == 0 || clients > dataset.train.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot split {} training samples over {clients} clients",
            dataset.train.len()
        )));
    }
    Ok(())
}

fn finish(mut shards: Vec<Vec<usize>>) -> Vec<Shard> {
    shards
        .iter_mut()
        .enumerate()
        .map(|(client, idx)| {
            idx.sort_unstable();
            Shard {
                client,
                indices: std::mem::take(idx),
            }
        })
        .collect()
}

/// Class-balanced split: shuffle, group by class, then deal round-robin with
/// one counter running across classes.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed: u64) -> Result<Vec<Shard>> {
    check_clients(dataset, clients)?;
    let mut order = dataset.train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&i| dataset.labels[i]);
    let mut shards = vec![Vec::new(); clients];
    for (slot, i) in order.into_iter().enumerate() {
        shards[slot % clients].push(i);
    }
    Ok(finish(shards))
}

/// Label-sorted shard dealing: the training set is sorted by label, cut into
/// `clients · shards_per_client` contiguous pieces, and each client receives
/// `shards_per_client` pieces chosen by a seeded permutation.
pub fn partition_noniid(dataset: &Dataset, clients: usize, shards_per_client: usize, seed: u64) -> Result<Vec<Shard>> {
    check_clients(dataset, clients)?;
    let pieces = clients * shards_per_client;
    if shards_per_client == 0 || pieces > dataset.train.len() {
        return Err(Error::InvalidParameter(format!(
            "{} training samples cannot fill {pieces} shards",
            dataset.train.len()
        )));
    }
    let mut order = dataset.train.clone();
    order.sort_by_key(|&i| (dataset.labels[i], i));
    let total = order.len();
    let bounds: Vec<usize> = (0..=pieces).map(|p| p * total / pieces).collect();
    let mut perm: Vec<usize> = (0..pieces).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shards = (0..clients)
        .map(|c| {
            perm[c * shards_per_client..(c + 1) * shards_per_client]
                .iter()
                .flat_map(|&p| order[bounds[p]..bounds[p + 1]].iter().copied())
                .collect()
        })
        .collect();
    Ok(finish(shards))
}

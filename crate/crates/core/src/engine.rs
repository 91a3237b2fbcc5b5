//! Dense-network kernel used by the protocol simulator.
//!
//! A network is a chain of `V` dense blocks. Block `j` maps
//! `dims[j-1] -> dims[j]` and applies ReLU, except the last block which
//! produces class logits. All parameters of all blocks live in one flat
//! `f64` vector so that the weak, aggregator and server segments are plain
//! contiguous ranges.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::profiles::SplitConfig;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// A mini-batch of samples with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// Boundary widths: `dims[0]` is the input width and the last entry is
    /// the number of classes.
    pub layer_dims: Vec<usize>,
    pub seed: u64,
}

impl NetSpec {
    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Shape(format!(
                "layer dims must hold at least two positive widths, got {layer_dims:?}"
            )));
        }
        Ok(Self { layer_dims, seed })
    }

    /// V.
    pub fn blocks(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

/// Flat parameter vector with a per-block index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CSFL";

impl ParamSet {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("bad layer dims {dims:?}")));
        }
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        let len = *offsets.last().unwrap();
        Ok(Self {
            dims: dims.to_vec(),
            offsets,
            data: vec![0.0; len],
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(spec: &NetSpec) -> Self {
        Self::init_dims(&spec.layer_dims, spec.seed)
    }

    fn init_dims(dims: &[usize], seed: u64) -> Self {
        let mut p = Self::zeros(dims).expect("validated dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in 1..=p.blocks() {
            let (fan_in, fan_out) = (p.dims[j - 1], p.dims[j]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let start = p.offsets[j - 1];
            for w in &mut p.data[start..start + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            offsets: self.offsets.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn blocks(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_blocks(&self, lo: usize, hi: usize) -> Result<()> {
        if lo == 0 || lo > hi || hi > self.blocks() {
            return Err(Error::LayerRange {
                lo,
                hi,
                layers: self.blocks(),
            });
        }
        Ok(())
    }

    /// Flat index range covering blocks `lo..=hi`.
    pub fn range(&self, lo: usize, hi: usize) -> Result<Range<usize>> {
        self.check_blocks(lo, hi)?;
        Ok(self.offsets[lo - 1]..self.offsets[hi])
    }

    pub fn segment(&self, lo: usize, hi: usize) -> Result<&[f64]> {
        let r = self.range(lo, hi)?;
        Ok(&self.data[r])
    }

    pub fn segment_mut(&mut self, lo: usize, hi: usize) -> Result<&mut [f64]> {
        let r = self.range(lo, hi)?;
        Ok(&mut self.data[r])
    }

    /// Weak-side view, blocks `1..=h`.
    pub fn weak(&self, split: SplitConfig) -> Result<&[f64]> {
        self.segment(1, split.h())
    }

    /// Aggregator-side view, blocks `h+1..=v`.
    pub fn aggregator(&self, split: SplitConfig) -> Result<&[f64]> {
        self.segment(split.h() + 1, split.v())
    }

    /// Server-side view, blocks `v+1..=V`.
    pub fn server(&self, split: SplitConfig) -> Result<&[f64]> {
        self.segment(split.v() + 1, self.blocks())
    }

    fn same_shape(&self, other: &ParamSet) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "parameter dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Copies blocks `lo..=hi` from `src`.
    pub fn copy_blocks_from(&mut self, src: &ParamSet, lo: usize, hi: usize) -> Result<()> {
        self.same_shape(src)?;
        let r = self.range(lo, hi)?;
        self.data[r.clone()].copy_from_slice(&src.data[r]);
        Ok(())
    }

    /// `self[lo..=hi] -= lr * grads[lo..=hi]`.
    pub fn sgd_blocks(&mut self, grads: &ParamSet, lr: f64, lo: usize, hi: usize) -> Result<()> {
        self.same_shape(grads)?;
        let r = self.range(lo, hi)?;
        for (p, g) in self.data[r.clone()].iter_mut().zip(&grads.data[r]) {
            *p -= lr * g;
        }
        Ok(())
    }

    fn weights(&self, j: usize) -> &[f64] {
        let start = self.offsets[j - 1];
        &self.data[start..start + self.dims[j - 1] * self.dims[j]]
    }

    fn bias(&self, j: usize) -> &[f64] {
        let end = self.offsets[j];
        &self.data[end - self.dims[j]..end]
    }

    fn block_mut(&mut self, j: usize) -> (&mut [f64], &mut [f64]) {
        let (start, end) = (self.offsets[j - 1], self.offsets[j]);
        let n_w = self.dims[j - 1] * self.dims[j];
        self.data[start..end].split_at_mut(n_w)
    }

    /// Little-endian blob: `"CSFL"`, V as u32, length as u64, then the
    /// values as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.blocks() as u32).to_le_bytes());
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Inverse of [`ParamSet::to_bytes`]; `dims` must match the stored layout.
    pub fn from_bytes(bytes: &[u8], dims: &[usize]) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing header".into()));
        }
        let blocks = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if blocks != p.blocks() || len != p.len() {
            return Err(Error::Checkpoint(format!(
                "header says {blocks} blocks / {len} values, expected {} / {}",
                p.blocks(),
                p.len()
            )));
        }
        let body = &bytes[16..];
        if body.len() != 8 * len {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                8 * len,
                body.len()
            )));
        }
        for (x, chunk) in p.data.iter_mut().zip(body.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(p)
    }
}

/// The local-loss predictor: one linear map from cut-layer activations to
/// class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHead {
    pub params: ParamSet,
}

impl AuxHead {
    pub fn init(cut_width: usize, num_classes: usize, seed: u64) -> Result<Self> {
        ParamSet::zeros(&[cut_width, num_classes])?;
        Ok(Self {
            params: ParamSet::init_dims(&[cut_width, num_classes], seed),
        })
    }

    /// Aux head for a network split at cut layer `v`.
    pub fn for_net(spec: &NetSpec, cut: usize) -> Result<Self> {
        if cut == 0 || cut >= spec.blocks() {
            return Err(Error::LayerRange {
                lo: 1,
                hi: cut,
                layers: spec.blocks(),
            });
        }
        Self::init(
            spec.layer_dims[cut],
            spec.num_classes(),
            spec.seed ^ 0x9e37_79b9_7f4a_7c15,
        )
    }

    /// Aux head whose weights copy block `j` of `params` (which must map the
    /// cut width to the class count).
    pub fn from_block(params: &ParamSet, j: usize) -> Result<Self> {
        params.check_blocks(j, j)?;
        let mut head = ParamSet::zeros(&[params.dims[j - 1], params.dims[j]])?;
        head.data.copy_from_slice(params.segment(j, j)?);
        Ok(Self { params: head })
    }

    pub fn input_width(&self) -> usize {
        self.params.dims[0]
    }
}

/// Activations recorded by a forward pass over blocks `lo..=hi`.
#[derive(Debug, Clone)]
pub struct Tape {
    lo: usize,
    /// `acts[0]` is the input; `acts[i]` the output of block `lo + i - 1`.
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().unwrap()
    }

    pub fn into_output(mut self) -> Matrix {
        self.acts.pop().unwrap()
    }

    fn hi(&self) -> usize {
        self.lo + self.acts.len() - 2
    }
}

fn is_relu(params: &ParamSet, j: usize) -> bool {
    j < params.blocks()
}

fn dense_forward(params: &ParamSet, j: usize, x: &Matrix) -> Matrix {
    let (fan_in, fan_out) = (params.dims[j - 1], params.dims[j]);
    let (w, b) = (params.weights(j), params.bias(j));
    let relu = is_relu(params, j);
    let mut y = Matrix::zeros(x.rows, fan_out);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = &mut y.data[r * fan_out..(r + 1) * fan_out];
        yr.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate().take(fan_in) {
            let wi = &w[i * fan_out..(i + 1) * fan_out];
            for (yo, &wio) in yr.iter_mut().zip(wi) {
                *yo += xi * wio;
            }
        }
        if relu {
            for yo in yr.iter_mut() {
                if *yo < 0.0 {
                    *yo = 0.0;
                }
            }
        }
    }
    y
}

/// Forward pass through blocks `lo..=hi`, keeping the activations needed
/// for [`backward_range`].
pub fn forward_range(params: &ParamSet, x: &Matrix, lo: usize, hi: usize) -> Result<Tape> {
    params.check_blocks(lo, hi)?;
    if x.cols != params.dims[lo - 1] {
        return Err(Error::Shape(format!(
            "block {lo} expects width {}, got {}",
            params.dims[lo - 1],
            x.cols
        )));
    }
    let mut acts = Vec::with_capacity(hi - lo + 2);
    acts.push(x.clone());
    for j in lo..=hi {
        let y = dense_forward(params, j, acts.last().unwrap());
        acts.push(y);
    }
    Ok(Tape { lo, acts })
}

/// Activations after block `upto`.
pub fn forward(params: &ParamSet, x: &Matrix, upto: usize) -> Result<Matrix> {
    Ok(forward_range(params, x, 1, upto)?.into_output())
}

/// Back-propagates `dout` (gradient w.r.t. the tape's output) through the
/// recorded blocks, adding parameter gradients into `grads` and returning the
/// gradient w.r.t. the tape's input.
pub fn backward_range(params: &ParamSet, tape: &Tape, dout: Matrix, grads: &mut ParamSet) -> Result<Matrix> {
    params.same_shape(grads)?;
    let out = tape.output();
    if dout.rows != out.rows || dout.cols != out.cols {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{} vs activations {}x{}",
            dout.rows, dout.cols, out.rows, out.cols
        )));
    }
    let mut delta = dout;
    for j in (tape.lo..=tape.hi()).rev() {
        let i = j - tape.lo;
        let (x, y) = (&tape.acts[i], &tape.acts[i + 1]);
        if is_relu(params, j) {
            for (d, &yv) in delta.data.iter_mut().zip(&y.data) {
                if yv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let (fan_in, fan_out) = (params.dims[j - 1], params.dims[j]);
        let (gw, gb) = grads.block_mut(j);
        for r in 0..x.rows {
            let xr = x.row(r);
            let dr = delta.row(r);
            for (i, &xi) in xr.iter().enumerate() {
                let gwi = &mut gw[i * fan_out..(i + 1) * fan_out];
                for (g, &d) in gwi.iter_mut().zip(dr) {
                    *g += xi * d;
                }
            }
            for (g, &d) in gb.iter_mut().zip(dr) {
                *g += d;
            }
        }
        let w = params.weights(j);
        let mut dx = Matrix::zeros(x.rows, fan_in);
        for r in 0..x.rows {
            let dr = delta.row(r);
            let dxr = &mut dx.data[r * fan_in..(r + 1) * fan_in];
            for (i, v) in dxr.iter_mut().enumerate() {
                let wi = &w[i * fan_out..(i + 1) * fan_out];
                let mut acc = 0.0;
                for (&wio, &d) in wi.iter().zip(dr) {
                    acc += wio * d;
                }
                *v = acc;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows {
        let row = &mut p.data[r * p.cols..(r + 1) * p.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean cross-entropy of `logits` against `labels`, and its gradient
/// w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows != labels.len() || logits.rows == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            logits.cols
        )));
    }
    let n = logits.rows as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data[r * logits.cols..(r + 1) * logits.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = &mut grad.data[r * logits.cols..(r + 1) * logits.cols];
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}

/// Cross-entropy at the output layer with gradients for every block.
pub fn global_loss_and_grads(params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
    let tape = forward_range(params, &batch.inputs, 1, params.blocks())?;
    let (loss, dlogits) = softmax_cross_entropy(tape.output(), &batch.labels)?;
    let mut grads = params.zeros_like();
    backward_range(params, &tape, dlogits, &mut grads)?;
    Ok((loss, grads))
}

/// Gradients produced by the local loss at the cut layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub loss: f64,
    /// Non-zero only on blocks `1..=v`.
    pub model: ParamSet,
    pub aux: ParamSet,
    /// Cut-layer activations the server consumes.
    pub cut_activations: Matrix,
}

/// Cross-entropy of the aux head on the cut-layer activations, with
/// gradients for blocks `1..=v` and the head.
pub fn local_loss_and_grads(params: &ParamSet, aux: &AuxHead, batch: &Batch, split: SplitConfig) -> Result<LocalGrads> {
    split.check(params.blocks())?;
    let v = split.v();
    if aux.input_width() != params.dims[v] {
        return Err(Error::Shape(format!(
            "aux head expects width {}, cut layer has {}",
            aux.input_width(),
            params.dims[v]
        )));
    }
    let tape = forward_range(params, &batch.inputs, 1, v)?;
    let head_tape = forward_range(&aux.params, tape.output(), 1, 1)?;
    let (loss, dlogits) = softmax_cross_entropy(head_tape.output(), &batch.labels)?;
    let mut aux_grads = aux.params.zeros_like();
    let dcut = backward_range(&aux.params, &head_tape, dlogits, &mut aux_grads)?;
    let mut grads = params.zeros_like();
    backward_range(params, &tape, dcut, &mut grads)?;
    Ok(LocalGrads {
        loss,
        model: grads,
        aux: aux_grads,
        cut_activations: tape.into_output(),
    })
}

/// `params − lr·grads`.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    out.sgd_blocks(grads, lr, 1, params.blocks())?;
    Ok(out)
}

/// Elementwise mean of equally shaped slices, summed in the given order.
pub fn average_slices(items: &[&[f64]]) -> Result<Vec<f64>> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("cannot average an empty list".into()))?;
    let mut acc = first.to_vec();
    for item in rest {
        if item.len() != acc.len() {
            return Err(Error::Shape(format!(
                "averaging slices of length {} and {}",
                acc.len(),
                item.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(item.iter()) {
            *a += x;
        }
    }
    let n = items.len() as f64;
    for (i, a) in acc.iter_mut().enumerate() {
        // unanimous positions keep their exact value
        let x = first[i];
        if rest.iter().all(|item| item[i].to_bits() == x.to_bits()) {
            *a = x;
        } else {
            *a /= n;
        }
    }
    Ok(acc)
}

/// FedAvg: unweighted elementwise mean, reduced in list order.
pub fn average_params(items: &[&ParamSet]) -> Result<ParamSet> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot average an empty list".into()))?;
    for p in items {
        first.same_shape(p)?;
    }
    let slices: Vec<&[f64]> = items.iter().map(|p| p.as_slice()).collect();
    let mut out = first.zeros_like();
    out.data = average_slices(&slices)?;
    Ok(out)
}

/// Averages blocks `lo..=hi` across `items` and writes the mean back into
/// every one of them.
pub fn average_blocks_in_place(items: &mut [&mut ParamSet], lo: usize, hi: usize) -> Result<()> {
    let Some(first) = items.first() else {
        return Err(Error::InvalidParameter("cannot average an empty list".into()));
    };
    let r = first.range(lo, hi)?;
    for p in items.iter() {
        first.same_shape(p)?;
    }
    let mean = {
        let slices: Vec<&[f64]> = items.iter().map(|p| &p.data[r.clone()]).collect();
        average_slices(&slices)?
    };
    for p in items.iter_mut() {
        p.data[r.clone()].copy_from_slice(&mean);
    }
    Ok(())
}

/// Index of the largest logit per row (first on ties).
pub fn predict(params: &ParamSet, inputs: &Matrix) -> Result<Vec<usize>> {
    let logits = forward(params, inputs, params.blocks())?;
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose prediction matches the label.
pub fn accuracy(params: &ParamSet, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(params, inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

//! One RBM block trained by CD-1 with a ternary per-synapse update.
//!
//! Each synapse sees the stored states of its two neurons before and after one
//! Gibbs step. Two AND gates and a comparator turn those into a vote in
//! {-1, 0, +1}; votes are summed over a batch and the quantized mean is written
//! once at the end of the batch, so a weight device is programmed at most once
//! per batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::bernoulli_binarize;
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::neuron::{NeuronLayer, NeuronLayerConfig, RefMode};
use crate::synapse::{encode_weight, DenseWeights, QuantConfig, SynapseArray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbmConfig {
    /// Learning rate, in weight units per unit of mean vote.
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub use_bias: bool,
    /// Standard deviation of the initial weights.
    pub init_sigma: f64,
    /// Negative phase used when the hidden layer is clamped to labels.
    pub clamped_negative: ClampedNegative,
    /// Start the visible biases at the log-odds of the mean training
    /// intensity instead of zero.
    pub data_visible_bias: bool,
}

/// How the negative phase runs for a block trained with clamped hidden units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampedNegative {
    /// Reconstruct `v1` from the label, then sample `h1` from `v1`.
    Reconstruct,
    /// Keep `v1 = v0` and sample `h1` freely from the data. The vote then
    /// compares label and prediction for the same input.
    #[default]
    HoldVisible,
}

impl Default for RbmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            epochs: 200,
            batch_size: 100,
            momentum: 0.5,
            weight_decay: 2e-4,
            use_bias: true,
            init_sigma: 0.01,
            clamped_negative: ClampedNegative::default(),
            data_visible_bias: false,
        }
    }
}

impl RbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParam(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParam("weight_decay must be >= 0".into()));
        }
        if !(self.init_sigma.is_finite() && self.init_sigma >= 0.0) {
            return Err(Error::InvalidParam("init_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Everything needed to build one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub rbm: RbmConfig,
    /// `None` stores weights as unquantized floats (software reference).
    pub quant: Option<QuantConfig>,
    pub gain: f64,
    pub ref_mode: RefMode,
    pub storage: DeviceParams,
}

/// Synaptic storage: OxRAM bit groups, or plain floats for the software model.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightStore {
    Quantized(SynapseArray),
    Float(DenseWeights),
}

impl WeightStore {
    pub fn dense(&self) -> &DenseWeights {
        match self {
            WeightStore::Quantized(a) => a.decoded(),
            WeightStore::Float(w) => w,
        }
    }

    pub fn n_visible(&self) -> usize {
        self.dense().n_visible()
    }

    pub fn n_hidden(&self) -> usize {
        self.dense().n_hidden()
    }

    /// Weight bit-cell devices; zero for float storage.
    pub fn device_count(&self) -> u64 {
        match self {
            WeightStore::Quantized(a) => (a.n_visible() * a.n_hidden()) as u64 * a.quant().bits as u64,
            WeightStore::Float(_) => 0,
        }
    }

    pub fn max_bit_flips(&self) -> u32 {
        match self {
            WeightStore::Quantized(a) => a.max_bit_flips(),
            WeightStore::Float(_) => 0,
        }
    }

    pub fn total_bit_flips(&self) -> u64 {
        match self {
            WeightStore::Quantized(a) => a.total_bit_flips(),
            WeightStore::Float(_) => 0,
        }
    }

    /// Moves weight `(i, j)` by `step` (in weight units); quantized storage
    /// rounds the step to whole codes.
    fn apply_step(&mut self, i: usize, j: usize, step: f64) {
        match self {
            WeightStore::Quantized(a) => {
                let delta = (step / a.quant().lsb()).round_ties_even();
                a.apply_delta(i, j, delta as i64);
            }
            WeightStore::Float(w) => {
                let cur = w.get(i, j);
                w.set(i, j, cur + step);
            }
        }
    }

    /// FNV-style checksum over the stored values, for frozen-layer checks.
    pub fn checksum(&self) -> u64 {
        let d = self.dense();
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for i in 0..d.n_visible() {
            for &w in d.visible_row(i) {
                acc ^= w.to_bits();
                acc = acc.wrapping_mul(0x0100_0000_01b3);
            }
        }
        acc
    }
}

/// Per-synapse CD-1 comparator output: `(v_i AND h_j) - (v1_i AND h1_j)`,
/// visible-major.
pub fn ternary_update(v: &[bool], h: &[bool], v1: &[bool], h1: &[bool]) -> Result<Vec<i8>> {
    if v1.len() != v.len() {
        return Err(Error::dims("reconstructed visible", v.len(), v1.len()));
    }
    if h1.len() != h.len() {
        return Err(Error::dims("reconstructed hidden", h.len(), h1.len()));
    }
    let mut grid = Vec::with_capacity(v.len() * h.len());
    for i in 0..v.len() {
        for j in 0..h.len() {
            let positive = v[i] & h[j];
            let negative = v1[i] & h1[j];
            grid.push(positive as i8 - negative as i8);
        }
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean absolute difference between data and one-step reconstruction.
    pub recon_error: f64,
    /// Weight devices programmed by this batch's write.
    pub weight_flips: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon_error: f64,
    pub max_weight_flips: u32,
    pub max_neuron_flips: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbmBlock {
    config: RbmConfig,
    weights: WeightStore,
    visible: NeuronLayer,
    hidden: NeuronLayer,
    v_bias: Vec<f64>,
    h_bias: Vec<f64>,
    velocity: Vec<f64>,
    tallies: Tallies,
}

/// Training bookkeeping used for endurance bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tallies {
    /// Batch weight writes performed so far.
    pub batch_writes: u64,
    pub presentations: Presentations,
    /// Training-set size of the most recent [`RbmBlock::train`] call.
    pub samples_per_epoch: u64,
    /// Epochs completed over all training calls.
    pub epochs: u64,
}

/// Training presentations by negative-phase flavour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Presentations {
    /// Hidden layer sampled from the data.
    pub free: u64,
    /// Hidden clamped, visible reconstructed from the label.
    pub clamped: u64,
    /// Hidden clamped, visible held at the data.
    pub held: u64,
}

impl Presentations {
    pub fn total(&self) -> u64 {
        self.free + self.clamped + self.held
    }

    /// Reference draws per visible neuron: one per reconstruction.
    pub fn visible_draws(&self) -> u64 {
        self.free + self.clamped
    }

    /// Reference draws per hidden neuron: data and reconstruction phases when
    /// free, reconstruction phase only when clamped.
    pub fn hidden_draws(&self) -> u64 {
        2 * self.free + self.clamped + self.held
    }

    /// State writes per visible neuron: data and reconstruction, or data only
    /// when held.
    pub fn visible_stores(&self) -> u64 {
        2 * (self.free + self.clamped) + self.held
    }

    /// State writes per hidden neuron.
    pub fn hidden_stores(&self) -> u64 {
        2 * self.total()
    }
}

impl RbmBlock {
    pub fn new<R: Rng + ?Sized>(params: &BlockParams, rng: &mut R) -> Result<Self> {
        params.rbm.validate()?;
        let (nv, nh) = (params.n_visible, params.n_hidden);
        let init = Normal::new(0.0, params.rbm.init_sigma)
            .map_err(|e| Error::InvalidParam(format!("init_sigma: {e}")))?;
        let draws: Vec<f64> = (0..nv * nh).map(|_| init.sample(rng)).collect();
        let weights = match &params.quant {
            Some(q) => {
                let codes = draws.iter().map(|&w| encode_weight(w, q)).collect();
                WeightStore::Quantized(SynapseArray::from_codes(nv, nh, q.clone(), codes)?)
            }
            None => WeightStore::Float(DenseWeights::from_fn(nv, nh, |i, j| draws[i * nh + j])),
        };
        let layer = |size| {
            NeuronLayer::new(
                NeuronLayerConfig {
                    size,
                    gain: params.gain,
                    ref_mode: params.ref_mode.clone(),
                },
                params.storage.clone(),
            )
        };
        Self::from_parts(
            params.rbm.clone(),
            weights,
            layer(nv)?,
            layer(nh)?,
            vec![0.0; nv],
            vec![0.0; nh],
        )
    }

    pub fn from_parts(
        config: RbmConfig,
        weights: WeightStore,
        visible: NeuronLayer,
        hidden: NeuronLayer,
        v_bias: Vec<f64>,
        h_bias: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (nv, nh) = (weights.n_visible(), weights.n_hidden());
        if visible.size() != nv {
            return Err(Error::dims("visible layer", nv, visible.size()));
        }
        if hidden.size() != nh {
            return Err(Error::dims("hidden layer", nh, hidden.size()));
        }
        if v_bias.len() != nv {
            return Err(Error::dims("visible bias", nv, v_bias.len()));
        }
        if h_bias.len() != nh {
            return Err(Error::dims("hidden bias", nh, h_bias.len()));
        }
        Ok(Self {
            config,
            weights,
            visible,
            hidden,
            v_bias,
            h_bias,
            velocity: vec![0.0; nv * nh],
            tallies: Tallies::default(),
        })
    }

    pub fn config(&self) -> &RbmConfig {
        &self.config
    }

    pub fn n_visible(&self) -> usize {
        self.weights.n_visible()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.n_hidden()
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightStore {
        &mut self.weights
    }

    pub fn visible(&self) -> &NeuronLayer {
        &self.visible
    }

    pub fn hidden(&self) -> &NeuronLayer {
        &self.hidden
    }

    pub fn v_bias(&self) -> &[f64] {
        &self.v_bias
    }

    pub fn h_bias(&self) -> &[f64] {
        &self.h_bias
    }

    pub fn set_biases(&mut self, v_bias: Vec<f64>, h_bias: Vec<f64>) -> Result<()> {
        if v_bias.len() != self.n_visible() {
            return Err(Error::dims("visible bias", self.n_visible(), v_bias.len()));
        }
        if h_bias.len() != self.n_hidden() {
            return Err(Error::dims("hidden bias", self.n_hidden(), h_bias.len()));
        }
        self.v_bias = v_bias;
        self.h_bias = h_bias;
        Ok(())
    }

    pub fn batch_writes(&self) -> u64 {
        self.tallies.batch_writes
    }

    pub fn presentations(&self) -> Presentations {
        self.tallies.presentations
    }

    pub fn tallies(&self) -> Tallies {
        self.tallies
    }

    pub(crate) fn restore_tallies(&mut self, tallies: Tallies) {
        self.tallies = tallies;
    }

    /// Sets `b_i = logit(mean_i) / gain`, with the mean clamped to
    /// [0.01, 0.99], so that an untrained block reproduces the pixel means.
    fn init_visible_bias(&mut self, data: &[Vec<f64>]) {
        let g = self.visible.gain();
        let n = data.len() as f64;
        for (i, b) in self.v_bias.iter_mut().enumerate() {
            let m = (data.iter().map(|x| x[i]).sum::<f64>() / n).clamp(0.01, 0.99);
            *b = (m / (1.0 - m)).ln() / g;
        }
    }

    /// Samples hidden states from the clamped visible vector. Both are written
    /// to their layers' state memories.
    pub fn positive_phase<R: Rng + ?Sized>(&mut self, v0: &[bool], rng: &mut R) -> Result<Vec<bool>> {
        let pre = self.weights.dense().hidden_preactivation(v0, &self.h_bias)?;
        self.visible.store_layer(v0, rng)?;
        self.hidden.sample_layer(&pre, rng)
    }

    /// One Gibbs step down and back up from `h0`.
    pub fn negative_phase<R: Rng + ?Sized>(&mut self, h0: &[bool], rng: &mut R) -> Result<(Vec<bool>, Vec<bool>)> {
        let pre_v = self.weights.dense().visible_preactivation(h0, &self.v_bias)?;
        let v1 = self.visible.sample_layer(&pre_v, rng)?;
        let pre_h = self.weights.dense().hidden_preactivation(&v1, &self.h_bias)?;
        let h1 = self.hidden.sample_layer(&pre_h, rng)?;
        Ok((v1, h1))
    }

    /// CD-1 over a batch of binary visible vectors with one weight write at
    /// the end.
    pub fn cd_batch_step<R: Rng + ?Sized>(&mut self, batch: &[Vec<bool>], rng: &mut R) -> Result<BatchStats> {
        self.cd_step(batch, None, rng)
    }

    /// CD-1 with the hidden layer clamped to `targets` in the positive phase.
    pub fn cd_batch_step_clamped<R: Rng + ?Sized>(
        &mut self,
        batch: &[Vec<bool>],
        targets: &[Vec<bool>],
        rng: &mut R,
    ) -> Result<BatchStats> {
        if targets.len() != batch.len() {
            return Err(Error::dims("clamped targets", batch.len(), targets.len()));
        }
        self.cd_step(batch, Some(targets), rng)
    }

    fn cd_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Vec<bool>],
        targets: Option<&[Vec<bool>]>,
        rng: &mut R,
    ) -> Result<BatchStats> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (nv, nh) = (self.n_visible(), self.n_hidden());
        let mut votes = VoteGrid::new(nv, nh);
        let mut dv = vec![0i64; nv];
        let mut dh = vec![0i64; nh];
        let mut mismatches = 0usize;
        for (k, v0) in batch.iter().enumerate() {
            if v0.len() != nv {
                return Err(Error::dims("visible vector", nv, v0.len()));
            }
            let h0 = match targets {
                Some(t) => {
                    let h0 = t[k].clone();
                    if h0.len() != nh {
                        return Err(Error::dims("clamped hidden", nh, h0.len()));
                    }
                    self.visible.store_layer(v0, rng)?;
                    self.hidden.store_layer(&h0, rng)?;
                    h0
                }
                None => self.positive_phase(v0, rng)?,
            };
            let hold = targets.is_some() && self.config.clamped_negative == ClampedNegative::HoldVisible;
            let (v1, h1) = if hold {
                let pre_h = self.weights.dense().hidden_preactivation(v0, &self.h_bias)?;
                (v0.clone(), self.hidden.sample_layer(&pre_h, rng)?)
            } else {
                self.negative_phase(&h0, rng)?
            };
            match (targets, hold) {
                (None, _) => self.tallies.presentations.free += 1,
                (Some(_), false) => self.tallies.presentations.clamped += 1,
                (Some(_), true) => self.tallies.presentations.held += 1,
            }
            votes.add(v0, &h0, &v1, &h1);
            for i in 0..nv {
                dv[i] += v0[i] as i64 - v1[i] as i64;
                mismatches += (v0[i] != v1[i]) as usize;
            }
            for j in 0..nh {
                dh[j] += h0[j] as i64 - h1[j] as i64;
            }
        }
        let n = batch.len() as f64;
        let weight_flips = self.write_votes(&votes, batch.len());
        if self.config.use_bias {
            let eps = self.config.epsilon;
            for (b, d) in self.v_bias.iter_mut().zip(&dv) {
                *b += eps * *d as f64 / n;
            }
            for (b, d) in self.h_bias.iter_mut().zip(&dh) {
                *b += eps * *d as f64 / n;
            }
        }
        Ok(BatchStats {
            recon_error: mismatches as f64 / (n * nv as f64),
            weight_flips,
        })
    }

    /// Applies the batch-mean votes as one weight write. Returns the number of
    /// weight devices that switched.
    pub fn write_votes(&mut self, votes: &VoteGrid, batch_len: usize) -> u64 {
        let before = self.weights.total_bit_flips();
        let nh = self.n_hidden();
        let cfg = &self.config;
        let n = batch_len as f64;
        for (idx, (&vote, vel)) in votes.sums.iter().zip(self.velocity.iter_mut()).enumerate() {
            let (i, j) = (idx / nh, idx % nh);
            let w = self.weights.dense().get(i, j);
            let step = cfg.momentum * *vel + cfg.epsilon * vote as f64 / n - cfg.weight_decay * w;
            *vel = step;
            if step != 0.0 {
                self.weights.apply_step(i, j, step);
            }
        }
        self.tallies.batch_writes += 1;
        self.weights.total_bit_flips() - before
    }

    /// Trains on `data` (intensities in [0, 1]), binarizing every presentation.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &[Vec<f64>], rng: &mut R) -> Result<Vec<EpochStats>> {
        self.train_inner(data, None, rng)
    }

    /// Like [`RbmBlock::train`] with the hidden layer clamped to per-sample
    /// binary targets during the positive phase.
    pub fn train_clamped<R: Rng + ?Sized>(
        &mut self,
        data: &[Vec<f64>],
        targets: &[Vec<bool>],
        rng: &mut R,
    ) -> Result<Vec<EpochStats>> {
        if targets.len() != data.len() {
            return Err(Error::dims("targets", data.len(), targets.len()));
        }
        self.train_inner(data, Some(targets), rng)
    }

    fn train_inner<R: Rng + ?Sized>(
        &mut self,
        data: &[Vec<f64>],
        targets: Option<&[Vec<bool>]>,
        rng: &mut R,
    ) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(x) = data.iter().find(|x| x.len() != self.n_visible()) {
            return Err(Error::dims("training vector", self.n_visible(), x.len()));
        }
        if self.config.epochs > 0 {
            self.tallies.samples_per_epoch = data.len() as u64;
            if self.config.data_visible_bias && self.config.use_bias && self.tallies.epochs == 0 {
                self.init_visible_bias(data);
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(rng);
            let mut err_sum = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<Vec<bool>> = chunk.iter().map(|&k| bernoulli_binarize(&data[k], rng)).collect();
                let stats = match targets {
                    Some(t) => {
                        let tb: Vec<Vec<bool>> = chunk.iter().map(|&k| t[k].clone()).collect();
                        self.cd_batch_step_clamped(&batch, &tb, rng)?
                    }
                    None => self.cd_batch_step(&batch, rng)?,
                };
                err_sum += stats.recon_error * chunk.len() as f64;
                seen += chunk.len();
            }
            self.tallies.epochs += 1;
            curve.push(EpochStats {
                epoch: epoch + 1,
                recon_error: err_sum / seen as f64,
                max_weight_flips: self.weights.max_bit_flips(),
                max_neuron_flips: self.max_neuron_switches(),
            });
        }
        Ok(curve)
    }

    /// Largest switching count over all state and reference devices.
    pub fn max_neuron_switches(&self) -> u64 {
        [
            self.visible.max_state_switches(),
            self.visible.max_ref_switches(),
            self.hidden.max_state_switches(),
            self.hidden.max_ref_switches(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    /// Mean-field upward pass: hidden firing probabilities for a real input.
    pub fn hidden_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pre = self.weights.dense().hidden_preactivation_real(x, &self.h_bias)?;
        Ok(pre.into_iter().map(|a| self.hidden.firing_probability(a)).collect())
    }

    /// Mean-field downward pass through the transposed weights.
    pub fn visible_probs(&self, y: &[f64]) -> Result<Vec<f64>> {
        let pre = self.weights.dense().visible_preactivation_real(y, &self.v_bias)?;
        Ok(pre.into_iter().map(|a| self.visible.firing_probability(a)).collect())
    }
}

/// Running sum of ternary votes over a batch, visible-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteGrid {
    n_hidden: usize,
    sums: Vec<i32>,
}

impl VoteGrid {
    pub fn new(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            n_hidden,
            sums: vec![0; n_visible * n_hidden],
        }
    }

    /// Adds one sample's votes. Equivalent to summing [`ternary_update`] but
    /// visits only active pairs.
    pub fn add(&mut self, v: &[bool], h: &[bool], v1: &[bool], h1: &[bool]) {
        let on = |xs: &[bool]| -> Vec<usize> { xs.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect() };
        let (hp, hn) = (on(h), on(h1));
        for i in on(v) {
            let row = &mut self.sums[i * self.n_hidden..(i + 1) * self.n_hidden];
            for &j in &hp {
                row[j] += 1;
            }
        }
        for i in on(v1) {
            let row = &mut self.sums[i * self.n_hidden..(i + 1) * self.n_hidden];
            for &j in &hn {
                row[j] -= 1;
            }
        }
    }

    pub fn merge(&mut self, other: &VoteGrid) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
    }

    pub fn sums(&self) -> &[i32] {
        &self.sums
    }
}

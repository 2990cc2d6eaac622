//! Deep generative models built from stacked RBM blocks.
//!
//! Both model kinds are trained greedily, one block at a time, with no
//! backward pass. A block's hidden firing probabilities, passed through the
//! normalization block of that interface, become the next block's training
//! data. A DBN ends in an associative block whose hidden units are the ten
//! class outputs; it learns class alignment by clamping those units to the
//! one-hot label in the positive phase. An SDA decodes through the transposed
//! encoder weights, so the decoder can never drift from the encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, ImageSet, N_CLASSES};
use crate::error::{Error, Result};
use crate::neuron::{normalize_with, NormalizerConfig};
use crate::rbm::{BlockParams, EpochStats, RbmBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "dbn")]
    Dbn,
    #[serde(rename = "sda")]
    Sda,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dbn => "dbn",
            ModelKind::Sda => "sda",
        }
    }
}

/// Full architecture: one [`BlockParams`] per adjacent layer pair and one
/// optional normalizer per interface between blocks (`None` is identity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub blocks: Vec<BlockParams>,
    pub normalizers: Vec<Option<NormalizerConfig>>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::InvalidParam("a network needs at least two layers".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidParam("layer sizes must be >= 1".into()));
        }
        if self.blocks.len() != sizes.len() - 1 {
            return Err(Error::dims("blocks", sizes.len() - 1, self.blocks.len()));
        }
        if self.normalizers.len() != self.blocks.len() - 1 {
            return Err(Error::dims("interface normalizers", self.blocks.len() - 1, self.normalizers.len()));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if b.n_visible != sizes[l] || b.n_hidden != sizes[l + 1] {
                return Err(Error::InvalidParam(format!(
                    "block {l} is {}x{}, layers say {}x{}",
                    b.n_visible,
                    b.n_hidden,
                    sizes[l],
                    sizes[l + 1]
                )));
            }
            b.rbm.validate()?;
        }
        for n in self.normalizers.iter().flatten() {
            n.validate()?;
        }
        if self.kind == ModelKind::Dbn {
            if sizes.len() < 3 {
                return Err(Error::InvalidParam("a DBN needs a feature layer below the class layer".into()));
            }
            if sizes[sizes.len() - 1] != N_CLASSES {
                return Err(Error::InvalidParam(format!(
                    "DBN output layer must have {N_CLASSES} units, got {}",
                    sizes[sizes.len() - 1]
                )));
            }
        }
        Ok(())
    }

    /// Layer sizes of the unrolled autoencoder, e.g. 784-100-784.
    pub fn unrolled_sizes(&self) -> Vec<usize> {
        let mut s = self.layer_sizes.clone();
        s.extend(self.layer_sizes.iter().rev().skip(1));
        s
    }
}

/// Interface normalizer resolved to its operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Stage {
    gain: f64,
    bias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgmModel {
    spec: NetworkSpec,
    blocks: Vec<RbmBlock>,
    stages: Vec<Option<Stage>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrainingStats {
    pub block: usize,
    pub curve: Vec<EpochStats>,
    /// Weight checksum when this block finished training. Later blocks never
    /// touch it, so it still matches the trained model.
    pub checksum: u64,
}

impl DgmModel {
    /// Untrained model with freshly initialized blocks.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .blocks
            .iter()
            .map(|b| RbmBlock::new(b, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, blocks)
    }

    pub fn from_parts(spec: NetworkSpec, blocks: Vec<RbmBlock>) -> Result<Self> {
        spec.validate()?;
        if blocks.len() != spec.blocks.len() {
            return Err(Error::dims("blocks", spec.blocks.len(), blocks.len()));
        }
        for (b, p) in blocks.iter().zip(&spec.blocks) {
            if b.n_visible() != p.n_visible || b.n_hidden() != p.n_hidden {
                return Err(Error::InvalidParam("block dimensions disagree with spec".into()));
            }
        }
        let stages = spec
            .normalizers
            .iter()
            .map(|n| {
                n.as_ref()
                    .map(|cfg| cfg.operating_point().map(|(gain, bias)| Stage { gain, bias }))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, blocks, stages })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn blocks(&self) -> &[RbmBlock] {
        &self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_sizes[0]
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::KindMismatch {
                expected: kind.name(),
                found: self.kind().name(),
            });
        }
        Ok(())
    }

    fn stage(&self, interface: usize, signal: Vec<f64>) -> Vec<f64> {
        match self.stages[interface] {
            Some(Stage { gain, bias }) => normalize_with(&signal, gain, bias),
            None => signal,
        }
    }

    /// Mean-field output of block `l` fed to block `l + 1`.
    fn propagate(&self, l: usize, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.blocks[l].hidden_probs(x)?;
        Ok(self.stage(l, p))
    }

    /// Training data for block `l + 1` from the data of block `l`.
    fn lift(&self, l: usize, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter().map(|x| self.propagate(l, x)).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("model input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    /// Features entering the top associative block of a DBN, or the code
    /// layer of an SDA.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n_enc = match self.kind() {
            ModelKind::Dbn => self.blocks.len() - 1,
            ModelKind::Sda => self.blocks.len(),
        };
        let mut signal = x.to_vec();
        for l in 0..n_enc {
            let p = self.blocks[l].hidden_probs(&signal)?;
            signal = if l + 1 < self.blocks.len() { self.stage(l, p) } else { p };
        }
        Ok(signal)
    }

    /// Class scores sorted descending; ties rank the lower class first.
    pub fn dbn_classify(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.expect_kind(ModelKind::Dbn)?;
        let features = self.encode(x)?;
        let top = &self.blocks[self.blocks.len() - 1];
        let scores = top.hidden_probs(&features)?;
        Ok(rank_scores(&scores))
    }

    /// Deterministic encode then decode through the tied transposed weights.
    pub fn sda_denoise(&self, x_noisy: &[f64]) -> Result<Vec<f64>> {
        self.expect_kind(ModelKind::Sda)?;
        let mut signal = self.encode(x_noisy)?;
        for l in (0..self.blocks.len()).rev() {
            let down = self.blocks[l].visible_probs(&signal)?;
            signal = if l > 0 { self.stage(l - 1, down) } else { down };
        }
        Ok(signal)
    }

    /// Greedy layer-wise training on `train`. Returns one curve per block.
    pub fn train_greedy<R: Rng + ?Sized>(&mut self, train: &ImageSet, rng: &mut R) -> Result<Vec<LayerTrainingStats>> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if train.dim() != self.input_dim() {
            return Err(Error::dims("training images", self.input_dim(), train.dim()));
        }
        let n_unsup = match self.kind() {
            ModelKind::Dbn => self.blocks.len() - 1,
            ModelKind::Sda => self.blocks.len(),
        };
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut data = train.images.clone();
        for l in 0..self.blocks.len() {
            if l > 0 {
                data = self.lift(l - 1, &data)?;
            }
            let curve = if l < n_unsup {
                self.blocks[l].train(&data, rng)?
            } else {
                train_dbn_top(&mut self.blocks[l], &data, &train.labels, rng)?
            };
            stats.push(LayerTrainingStats {
                block: l,
                curve,
                checksum: self.blocks[l].weights().checksum(),
            });
        }
        Ok(stats)
    }

    /// Mean-field evaluation on `test`: top-k accuracy for a DBN, MSE against
    /// the clean images after salt-and-pepper corruption for an SDA. Noise is
    /// drawn serially from `rng`; the deterministic passes are split over
    /// `threads` workers, so the result does not depend on `threads`.
    pub fn evaluate(&self, test: &ImageSet, noise_density: f64, threads: usize, rng: &mut impl Rng) -> Result<Metrics> {
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match self.kind() {
            ModelKind::Dbn => {
                let rankings = par_map(&test.images, threads, |x| self.dbn_classify(x))?;
                Ok(Metrics::Dbn(top_k_accuracy(&rankings, &test.labels)))
            }
            ModelKind::Sda => {
                let noisy = test
                    .images
                    .iter()
                    .map(|x| crate::data::salt_and_pepper(x, noise_density, rng))
                    .collect::<Result<Vec<_>>>()?;
                let recon = par_map(&noisy, threads, |x| self.sda_denoise(x))?;
                Ok(Metrics::Sda {
                    mse: mse(&test.images, &recon),
                })
            }
        }
    }
}

/// Order-preserving map over contiguous chunks on scoped threads.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let workers: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for w in workers {
            out.extend(w.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Trains the associative top block with the class units clamped to the
/// one-hot label during the positive phase.
pub fn train_dbn_top<R: Rng + ?Sized>(
    block: &mut RbmBlock,
    features: &[Vec<f64>],
    labels: &[u8],
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    if features.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: features.len(),
            labels: labels.len(),
        });
    }
    if block.n_hidden() != N_CLASSES {
        return Err(Error::dims("class units", N_CLASSES, block.n_hidden()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
        return Err(Error::InvalidParam(format!("label {l} out of range")));
    }
    let targets: Vec<Vec<bool>> = labels.iter().map(|&l| one_hot(l)).collect();
    block.train_clamped(features, &targets, rng)
}

/// Indices sorted by descending score, lowest index first among equals.
pub fn rank_scores(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKAccuracy {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metrics {
    Dbn(TopKAccuracy),
    Sda { mse: f64 },
}

pub fn top_k_accuracy(rankings: &[Vec<(usize, f64)>], labels: &[u8]) -> TopKAccuracy {
    let n = rankings.len().max(1) as f64;
    let hits = |k: usize| {
        rankings
            .iter()
            .zip(labels)
            .filter(|(r, &l)| r.iter().take(k).any(|&(c, _)| c == l as usize))
            .count() as f64
            / n
    };
    TopKAccuracy {
        top1: hits(1),
        top3: hits(3),
        top5: hits(5),
    }
}

/// Mean squared error over every pixel of every image.
pub fn mse(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in reference.iter().zip(estimate) {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

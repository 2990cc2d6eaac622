//! Config-driven runs: training, evaluation, denoising mosaics and
//! endurance reports, with every artifact written deterministically.
//!
//! Random streams are derived from the config seed so that changing one
//! stage does not perturb the others: stream 0 selects the data subset,
//! stream 1 initializes and trains the model, stream 2 draws evaluation noise
//! and stream 3 draws the noise of denoising mosaics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{ExperimentConfig, Implementation};
use crate::data::{load_idx, reduced_subset, salt_and_pepper, ImageSet};
use crate::dgm::{mse, DgmModel, LayerTrainingStats, Metrics, ModelKind};
use crate::endurance::{endurance_report, write_csv, EnduranceRow};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ENDURANCE_FILE: &str = "endurance.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub const EPOCHS_HEADER: &str = "block,epoch,recon_error,max_weight_flips,max_neuron_flips";
pub const DBN_METRICS_HEADER: &str = "name,model,implementation,layers,gains,top1,top3,top5";
pub const SDA_METRICS_HEADER: &str = "name,model,implementation,layers,gains,noise_density,mse";

const DATA_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const MOSAIC_STREAM: u64 = 3;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loads the dataset named by `cfg` and draws the reduced train/test split.
pub fn load_split(cfg: &ExperimentConfig, config_dir: &Path) -> Result<(ImageSet, ImageSet)> {
    let (images, labels) = cfg.data_paths(config_dir);
    let set = load_idx(&images, &labels)?;
    reduced_subset(&set, cfg.data.n_train, cfg.data.n_test, &mut rng_stream(cfg.seed, DATA_STREAM))
}

pub struct TrainOutcome {
    pub model: DgmModel,
    pub curves: Vec<LayerTrainingStats>,
    pub metrics: Metrics,
    pub endurance: Vec<EnduranceRow>,
    pub out_dir: PathBuf,
}

/// Trains, evaluates and writes checkpoint, epoch, metric and endurance files
/// plus the resolved config into `out_dir`.
pub fn run_train(cfg: &ExperimentConfig, config_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_split(cfg, config_dir)?;
    let mut rng = rng_stream(cfg.seed, TRAIN_STREAM);
    let mut model = DgmModel::new(cfg.network_spec()?, &mut rng)?;
    let curves = model.train_greedy(&train, &mut rng)?;
    let metrics = evaluate_split(&model, cfg, &test)?;
    let endurance = endurance_report(&model);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    checkpoint::save(&model, &out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(EPOCHS_FILE), &epochs_csv(&curves))?;
    write_file(&out_dir.join(METRICS_FILE), &metrics_csv(cfg, &model, &metrics))?;
    write_file(&out_dir.join(ENDURANCE_FILE), &endurance_csv(&endurance))?;
    write_file(&out_dir.join(CONFIG_FILE), &cfg.to_toml_string()?)?;
    Ok(TrainOutcome {
        model,
        curves,
        metrics,
        endurance,
        out_dir: out_dir.to_path_buf(),
    })
}

fn evaluate_split(model: &DgmModel, cfg: &ExperimentConfig, test: &ImageSet) -> Result<Metrics> {
    let mut rng = rng_stream(cfg.seed, EVAL_STREAM);
    model.evaluate(test, cfg.data.noise_density, cfg.threads, &mut rng)
}

/// Re-evaluates a checkpoint on the test split described by `cfg`.
pub fn run_eval(checkpoint_path: &Path, cfg: &ExperimentConfig, config_dir: &Path) -> Result<(DgmModel, Metrics)> {
    let model = checkpoint::load(checkpoint_path)?;
    if model.kind() != cfg.kind {
        return Err(Error::KindMismatch {
            expected: cfg.kind.name(),
            found: model.kind().name(),
        });
    }
    let (_, test) = load_split(cfg, config_dir)?;
    let metrics = evaluate_split(&model, cfg, &test)?;
    Ok((model, metrics))
}

pub fn epochs_csv(curves: &[LayerTrainingStats]) -> String {
    let mut s = format!("{EPOCHS_HEADER}\n");
    for c in curves {
        for e in &c.curve {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{}",
                c.block + 1,
                e.epoch,
                e.recon_error,
                e.max_weight_flips,
                e.max_neuron_flips
            );
        }
    }
    s
}

fn layers_label(model: &DgmModel) -> String {
    let sizes = match model.kind() {
        ModelKind::Dbn => model.spec().layer_sizes.clone(),
        ModelKind::Sda => model.spec().unrolled_sizes(),
    };
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn gains_label(model: &DgmModel) -> String {
    model
        .spec()
        .blocks
        .iter()
        .map(|b| format!("{:.4}", b.gain))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn metrics_csv(cfg: &ExperimentConfig, model: &DgmModel, metrics: &Metrics) -> String {
    let implementation = match cfg.implementation {
        Implementation::Hybrid => "hybrid",
        Implementation::Software => "software",
    };
    let prefix = format!(
        "{},{},{},{},{}",
        cfg.name,
        model.kind().name(),
        implementation,
        layers_label(model),
        gains_label(model)
    );
    match metrics {
        Metrics::Dbn(a) => format!(
            "{DBN_METRICS_HEADER}\n{prefix},{:.4},{:.4},{:.4}\n",
            a.top1, a.top3, a.top5
        ),
        Metrics::Sda { mse } => format!(
            "{SDA_METRICS_HEADER}\n{prefix},{},{:.6}\n",
            cfg.data.noise_density, mse
        ),
    }
}

pub fn endurance_csv(rows: &[EnduranceRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("endurance CSV is ASCII")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Which split a denoising mosaic draws its images from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub struct DenoiseOutcome {
    /// MSE of the reconstructions against the clean images.
    pub mse: f64,
    /// MSE of the corrupted inputs against the clean images.
    pub noisy_mse: f64,
    pub images: usize,
}

/// Corrupts the first `count` images of a split, reconstructs them with an
/// SDA checkpoint and writes a mosaic of (corrupted | reconstructed) pairs.
pub fn run_denoise(
    checkpoint_path: &Path,
    cfg: &ExperimentConfig,
    config_dir: &Path,
    split: Split,
    count: usize,
    density: f64,
    mosaic_path: &Path,
) -> Result<DenoiseOutcome> {
    let model = checkpoint::load(checkpoint_path)?;
    if model.kind() != ModelKind::Sda {
        return Err(Error::KindMismatch {
            expected: ModelKind::Sda.name(),
            found: model.kind().name(),
        });
    }
    let (train, test) = load_split(cfg, config_dir)?;
    let set = match split {
        Split::Train => train,
        Split::Test => test,
    };
    if count == 0 || count > set.len() {
        return Err(Error::InvalidParam(format!("count must be in 1..={}, got {count}", set.len())));
    }
    let mut rng = rng_stream(cfg.seed, MOSAIC_STREAM);
    let clean = &set.images[..count];
    let noisy = clean
        .iter()
        .map(|x| salt_and_pepper(x, density, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let recon = noisy
        .iter()
        .map(|x| model.sda_denoise(x))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[f64], &[f64])> = noisy.iter().zip(&recon).map(|(a, b)| (&a[..], &b[..])).collect();
    let pgm = pair_mosaic_pgm(&pairs, set.rows, set.cols, 10);
    fs::write(mosaic_path, pgm).map_err(|e| Error::io(mosaic_path, e))?;
    Ok(DenoiseOutcome {
        mse: mse(clean, &recon),
        noisy_mse: mse(clean, &noisy),
        images: count,
    })
}

/// Binary PGM (P5, maxval 255) laying out image pairs side by side in a grid
/// `per_row` tiles wide. Each tile is `rows x 2*cols`; unused cells are black.
pub fn pair_mosaic_pgm(pairs: &[(&[f64], &[f64])], rows: usize, cols: usize, per_row: usize) -> Vec<u8> {
    let tiles_down = pairs.len().div_ceil(per_row).max(1);
    let (width, height) = (per_row * 2 * cols, tiles_down * rows);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height, 0);
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (t, (left, right)) in pairs.iter().enumerate() {
        let (ty, tx) = (t / per_row, t % per_row);
        for r in 0..rows {
            let line = header + (ty * rows + r) * width + tx * 2 * cols;
            for c in 0..cols {
                out[line + c] = px(left[r * cols + c]);
                out[line + cols + c] = px(right[r * cols + c]);
            }
        }
    }
    out
}

use std::path::{Path, PathBuf};

use oxdgm::checkpoint;
use oxdgm::config::ExperimentConfig;
use oxdgm::data::{load_idx, salt_and_pepper, ImageSet};
use oxdgm::dgm::{mse, DgmModel, Metrics};
use oxdgm::endurance::{endurance_report, DeviceRole};
use oxdgm::experiment::{load_split, rng_stream};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn shipped_set() -> ImageSet {
    let d = data_dir();
    load_idx(d.join("images-idx3-ubyte.gz"), d.join("labels-idx1-ubyte.gz")).unwrap()
}

fn config(kind: &str, implementation: &str, layers: &str, n_train: usize, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(&format!(
        "name = \"t\"\nkind = \"{kind}\"\nimplementation = \"{implementation}\"\nlayers = {layers}\n\
         [data]\nn_train = {n_train}\nn_test = 200\n[training]\nepochs = {epochs}\n"
    ))
    .unwrap();
    cfg.data.dir = data_dir();
    cfg
}

fn train(cfg: &ExperimentConfig) -> (DgmModel, ImageSet, ImageSet) {
    let (train, test) = load_split(cfg, Path::new(".")).unwrap();
    let mut rng = rng_stream(cfg.seed, 1);
    let mut model = DgmModel::new(cfg.network_spec().unwrap(), &mut rng).unwrap();
    model.train_greedy(&train, &mut rng).unwrap();
    (model, train, test)
}

#[test]
fn shipped_dataset_is_well_formed() {
    let set = shipped_set();
    assert_eq!(set.len(), 10_000);
    assert_eq!((set.rows, set.cols), (28, 28));
    assert!(set.images.iter().all(|x| x.len() == 784 && x.iter().all(|p| (0.0..=1.0).contains(p))));
    let mut per_class = [0usize; 10];
    for &l in &set.labels {
        per_class[l as usize] += 1;
    }
    assert!(per_class.iter().all(|&n| n >= 600), "{per_class:?}");
    // Pixels are bytes scaled by 1/255.
    assert!(set.images[0].iter().all(|p| ((p * 255.0).round() - p * 255.0).abs() < 1e-9));
}

#[test]
fn reduced_split_is_class_balanced() {
    let cfg = config("sda", "software", "[784, 10]", 500, 1);
    let (train, test) = load_split(&cfg, Path::new(".")).unwrap();
    assert_eq!((train.len(), test.len()), (500, 200));
    for c in 0..10u8 {
        assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 50);
        assert_eq!(test.labels.iter().filter(|&&l| l == c).count(), 20);
    }
}

#[test]
fn small_dbn_learns_well_above_chance() {
    for implementation in ["hybrid", "software"] {
        let cfg = config("dbn", implementation, "[784, 60, 10]", 1000, 10);
        let (model, _, test) = train(&cfg);
        let Metrics::Dbn(acc) = model.evaluate(&test, 0.0, 1, &mut rng_stream(1, 2)).unwrap() else {
            panic!("expected accuracies")
        };
        assert!(acc.top1 > 0.6, "{implementation}: {acc:?}");
        assert!(acc.top1 <= acc.top3 && acc.top3 <= acc.top5);
    }
}

#[test]
fn small_sda_denoises() {
    // Same settings as the shipped denoiser configs.
    let mut cfg = config("sda", "hybrid", "[784, 60]", 1000, 40);
    cfg.gain_scale = 12.0;
    cfg.training.data_visible_bias = true;
    let (model, _, test) = train(&cfg);
    let mut rng = rng_stream(1, 3);
    let clean = &test.images[..100];
    let noisy: Vec<Vec<f64>> = clean.iter().map(|x| salt_and_pepper(x, 0.1, &mut rng).unwrap()).collect();
    let recon: Vec<Vec<f64>> = noisy.iter().map(|x| model.sda_denoise(x).unwrap()).collect();
    let (before, after) = (mse(clean, &noisy), mse(clean, &recon));
    assert!(after < 0.8 * before, "noisy {before} recon {after}");
    let clean_recon: Vec<Vec<f64>> = clean.iter().map(|x| model.sda_denoise(x).unwrap()).collect();
    assert!(mse(clean, &clean_recon) <= after);
}

#[test]
fn checkpoint_reload_reproduces_evaluation_and_endurance() {
    let cfg = config("dbn", "hybrid", "[784, 30, 20, 10]", 300, 2);
    let (model, _, test) = train(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let eval = |m: &DgmModel| m.evaluate(&test, 0.1, 1, &mut rng_stream(9, 2)).unwrap();
    assert_eq!(eval(&model), eval(&back));
    assert_eq!(endurance_report(&model), endurance_report(&back));
}

#[test]
fn endurance_counts_follow_the_schedule() {
    // 300 samples, batch 100, 2 epochs per block.
    let cfg = config("sda", "hybrid", "[784, 30, 20]", 300, 2);
    let (model, _, _) = train(&cfg);
    let rows = endurance_report(&model);
    let find = |g: &str, role: DeviceRole| rows.iter().find(|r| r.group == g && r.role == role).unwrap();
    // Layer 1 is only ever a visible layer: one draw per presentation.
    assert_eq!(find("L1-784", DeviceRole::Reference).max, 600);
    // Layer 2: two hidden draws in block 1 plus one visible draw in block 2.
    assert_eq!(find("L2-30", DeviceRole::Reference).max, 1800);
    assert_eq!(find("L2-30", DeviceRole::Reference).total, 1800 * 30);
    assert_eq!(find("L3-20", DeviceRole::Reference).max, 1200);
    for w in ["W1", "W2"] {
        let row = find(w, DeviceRole::Weight);
        assert_eq!(row.bound, 6);
        assert!(row.max <= 6 && row.max > 0);
    }
}

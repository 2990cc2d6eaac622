//! MNIST ingestion and the input-side stochastic transforms.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const N_CLASSES: usize = 10;

/// Images as rows of intensities in [0, 1] with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl ImageSet {
    pub fn new(images: Vec<Vec<f64>>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(bad) = images.iter().find(|x| x.len() != rows * cols) {
            return Err(Error::dims("image", rows * cols, bad.len()));
        }
        if images.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParam("pixel values must lie in [0, 1]".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::InvalidParam(format!("label {l} out of range")));
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: indices.iter().map(|&k| self.images[k].clone()).collect(),
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn class_histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], path: &Path, words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("header needs {} bytes, file has {}", 4 * words, bytes.len()),
        });
    }
    Ok((0..words).map(|k| BigEndian::read_u32(&bytes[4 * k..])).collect())
}

/// Parses an IDX3 image file into rows of intensities scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let magic = header(bytes, path, 1)?[0];
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let h = header(bytes, path, 4)?;
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{n} images of {rows}x{cols} need {need} bytes, found {}", body.len()),
        });
    }
    let images = body[..need]
        .chunks_exact(rows * cols)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((images, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = header(bytes, path, 1)?[0];
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let h = header(bytes, path, 2)?;
    let n = h[1] as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{n} labels, found {} bytes", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label pair (plain or gzip).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (images, rows, cols) = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    ImageSet::new(images, labels, rows, cols)
}

/// Class-balanced, disjoint train/test index lists.
pub fn reduced_subset_indices<R: Rng + ?Sized>(
    set: &ImageSet,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !n_train.is_multiple_of(N_CLASSES) || !n_test.is_multiple_of(N_CLASSES) {
        return Err(Error::InvalidParam(format!(
            "subset sizes must be multiples of {N_CLASSES}, got {n_train}/{n_test}"
        )));
    }
    let (tr, te) = (n_train / N_CLASSES, n_test / N_CLASSES);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for class in 0..N_CLASSES as u8 {
        let mut members: Vec<usize> = (0..set.len()).filter(|&k| set.labels[k] == class).collect();
        if members.len() < tr + te {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                required: tr + te,
            });
        }
        members.shuffle(rng);
        train.extend_from_slice(&members[..tr]);
        test.extend_from_slice(&members[tr..tr + te]);
    }
    train.shuffle(rng);
    test.shuffle(rng);
    Ok((train, test))
}

pub fn reduced_subset<R: Rng + ?Sized>(
    set: &ImageSet,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(ImageSet, ImageSet)> {
    let (train, test) = reduced_subset_indices(set, n_train, n_test, rng)?;
    Ok((set.subset(&train), set.subset(&test)))
}

/// Replaces each pixel, with probability `density`, by 0 or 1 at equal odds.
pub fn salt_and_pepper<R: Rng + ?Sized>(x: &[f64], density: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidParam(format!("noise density {density} outside [0, 1]")));
    }
    Ok(x.iter()
        .map(|&p| {
            if rng.random::<f64>() < density {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                p
            }
        })
        .collect())
}

/// Independent Bernoulli draw per component. Exact 0 and 1 consume no
/// randomness.
pub fn bernoulli_binarize<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vec<bool> {
    x.iter()
        .map(|&p| {
            if p <= 0.0 {
                false
            } else if p >= 1.0 {
                true
            } else {
                rng.random::<f64>() < p
            }
        })
        .collect()
}

/// One-hot encoding of a class label.
pub fn one_hot(label: u8) -> Vec<bool> {
    (0..N_CLASSES).map(|c| c == label as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn toy_set(per_class: usize) -> ImageSet {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..10u8 {
            for k in 0..per_class {
                images.push(vec![(k % 7) as f64 / 7.0; 4]);
                labels.push(c);
            }
        }
        ImageSet::new(images, labels, 2, 2).unwrap()
    }

    #[test]
    fn parses_header_and_scales_pixels() {
        let p = Path::new("mem");
        let (imgs, r, c) = parse_idx_images(&idx_images(3, 28, 28, 255), p).unwrap();
        assert_eq!((imgs.len(), r, c), (3, 28, 28));
        assert!(imgs.iter().flatten().all(|&x| x == 1.0));
        assert_eq!(parse_idx_labels(&idx_labels(&[1, 2, 3]), p).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn wrong_magic_is_bad_magic() {
        let p = Path::new("mem");
        let labels = idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels, p), Err(Error::BadMagic { .. })));
        let imgs = idx_images(1, 2, 2, 0);
        let err = parse_idx_labels(&imgs, p).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_body_and_header() {
        let p = Path::new("mem");
        let mut imgs = idx_images(2, 28, 28, 0);
        imgs.truncate(16 + 784 + 10);
        assert!(matches!(parse_idx_images(&imgs, p), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8], p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(3, 2, 2, 10)).unwrap();
        fs::write(&lp, idx_labels(&[0, 1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 3, labels: 2 })));
    }

    #[test]
    fn gzip_files_are_inflated() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.gz");
        let lp = dir.path().join("lbl");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&idx_images(2, 2, 2, 51)).unwrap();
        fs::write(&ip, enc.finish().unwrap()).unwrap();
        fs::write(&lp, idx_labels(&[4, 5])).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.images[0][0], 0.2);
    }

    #[test]
    fn subset_is_balanced_disjoint_and_seeded() {
        let set = toy_set(12);
        let pick = |seed| reduced_subset_indices(&set, 50, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (train, test) = pick(9);
        assert_eq!(set.subset(&train).class_histogram(), [5; 10]);
        assert_eq!(set.subset(&test).class_histogram(), [2; 10]);
        assert!(train.iter().all(|k| !test.contains(k)));
        assert_eq!(pick(9), (train.clone(), test));
        assert_ne!(pick(10).0, train);
    }

    #[test]
    fn subset_rejects_short_classes() {
        let set = toy_set(6);
        let err = reduced_subset(&set, 50, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass { required: 7, .. }));
    }

    #[test]
    fn salt_and_pepper_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..784).map(|k| (k % 10) as f64 / 10.0).collect();
        assert_eq!(salt_and_pepper(&x, 0.0, &mut rng).unwrap(), x);
        let y = salt_and_pepper(&x, 1.0, &mut rng).unwrap();
        assert!(y.iter().all(|&p| p == 0.0 || p == 1.0));
        assert!(salt_and_pepper(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn salt_and_pepper_count_is_binomial() {
        // Pixels at 0.5 can never be mistaken for a corrupted value.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![0.5; 784];
        let sd = (784.0f64 * 0.1 * 0.9).sqrt();
        let mut total = 0usize;
        for _ in 0..200 {
            let n = salt_and_pepper(&x, 0.1, &mut rng).unwrap().iter().filter(|&&p| p != 0.5).count();
            assert!((n as f64 - 78.4).abs() < 4.0 * sd, "{n}");
            total += n;
        }
        let mean = total as f64 / 200.0;
        assert!((mean - 78.4).abs() < 3.0 * sd / (200f64).sqrt(), "{mean}");
    }

    #[test]
    fn binarize_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(bernoulli_binarize(&[0.0; 5], &mut rng), vec![false; 5]);
        assert_eq!(bernoulli_binarize(&[1.0; 5], &mut rng), vec![true; 5]);
        let ones = (0..10_000).filter(|_| bernoulli_binarize(&[0.3], &mut rng)[0]).count();
        assert!((ones as f64 / 1e4 - 0.3).abs() < 0.02);
    }

    #[test]
    fn one_hot_layout() {
        let h = one_hot(3);
        assert_eq!(h.iter().filter(|&&b| b).count(), 1);
        assert!(h[3]);
    }
}

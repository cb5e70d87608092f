//! Datasets: MNIST IDX parsing, synthetic Gaussian blobs, subsampling and seeded batching.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dropout::RngStream;
use crate::error::{contract, io_err, Error, Result};
use crate::numeric::Matrix;

/// Inputs in `[0, 1]`, one row per sample, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(contract(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Splits off the first `n` samples (as stored) from the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(contract(format!("split at {n} beyond {} samples", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Error, PartialEq)]
pub enum IdxError {
    #[error("wrong IDX magic {found} (expected {expected})")]
    WrongMagic { expected: u32, found: u32 },
    #[error("IDX payload truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("corrupt gzip stream: {0}")]
    Gzip(String),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Inflates gzip-wrapped payloads (detected by the `1f 8b` magic), passes others through.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>, IdxError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| IdxError::Gzip(e.to_string()))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an IDX3 image file into a `count × (rows·cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let features = rows * cols;
    let needed = 16 + count * features;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let data = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_vec(count, features, data).expect("length computed from header"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Builds a dataset from raw (optionally gzipped) IDX image and label payloads.
pub fn mnist_from_bytes(images: Vec<u8>, labels: Vec<u8>) -> Result<Dataset> {
    let inputs = parse_idx_images(&maybe_gunzip(images)?)?;
    let labels = parse_idx_labels(&maybe_gunzip(labels)?)?;
    if inputs.rows() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: inputs.rows(),
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(inputs, labels, classes)
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images).map_err(io_err(images))?;
    let lab = fs::read(labels).map_err(io_err(labels))?;
    mnist_from_bytes(img, lab)
}

/// Locates the standard file pair (`{prefix}-images-idx3-ubyte[.gz]`, `{prefix}-labels-idx1-ubyte[.gz]`)
/// inside `dir` and loads it. `prefix` is `train` or `t10k`.
pub fn load_mnist_dir(dir: &Path, prefix: &str) -> Result<Dataset> {
    let find = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    load_mnist_idx(
        &find(format!("{prefix}-images-idx3-ubyte")),
        &find(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Gaussian clusters around seeded centres, clipped to `[0, 1]`.
///
/// Centres are uniform in `[0.1, 0.9]^dim`. Samples are stored class by class.
pub fn synthetic_blobs(
    classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(contract(format!("need at least 2 classes, got {classes}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(contract(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut stream = RngStream::new(seed, 0);
    let rng = stream.rng_mut();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(
                center
                    .iter()
                    .map(|&m| (m + spread * noise.sample(rng)).clamp(0.0, 1.0)),
            );
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, classes)
}

/// `n` samples drawn uniformly without replacement, in sampled order.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(contract(format!(
            "cannot subsample {n} from {} samples",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut stream = RngStream::new(seed, 0);
    let (chosen, _) = idx.partial_shuffle(stream.rng_mut(), n);
    let chosen = chosen.to_vec();
    Ok(dataset.select(&chosen))
}

/// Index batches covering every sample once, in an order seeded by `(shuffle_seed, epoch)`.
/// The last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut stream = RngStream::new(shuffle_seed, epoch);
    order.shuffle(stream.rng_mut());
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batches of `(inputs, labels)` for one epoch.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> impl Iterator<Item = (Matrix, Vec<usize>)> + '_ {
    batch_indices(dataset.len(), batch_size, shuffle_seed, epoch)
        .into_iter()
        .map(move |idx| {
            let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
            (dataset.inputs.select_rows(&idx), labels)
        })
}

/// Text fixture: a header line `classes <c> dim <d> samples <n>`, then one line per sample,
/// `<label> <x_1> ... <x_d>`, whitespace separated. Lines starting with `#` are comments.
pub fn write_fixture(dataset: &Dataset) -> String {
    let mut out = format!(
        "classes {} dim {} samples {}\n",
        dataset.classes,
        dataset.features(),
        dataset.len()
    );
    for i in 0..dataset.len() {
        write!(out, "{}", dataset.labels[i]).unwrap();
        for v in dataset.input(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_fixture(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let fixture_err = |line: usize, msg: &str| Error::Fixture {
        line,
        msg: msg.to_string(),
    };
    let (hline, header) = lines.next().ok_or_else(|| fixture_err(1, "missing header"))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    let (classes, dim, samples) = match tok.as_slice() {
        ["classes", c, "dim", d, "samples", n] => (
            c.parse::<usize>().map_err(|_| fixture_err(hline, "bad class count"))?,
            d.parse::<usize>().map_err(|_| fixture_err(hline, "bad dim"))?,
            n.parse::<usize>().map_err(|_| fixture_err(hline, "bad sample count"))?,
        ),
        _ => return Err(fixture_err(hline, "expected `classes <c> dim <d> samples <n>`")),
    };
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for (lineno, line) in lines {
        let mut it = line.split_whitespace();
        let label = it
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| fixture_err(lineno, "bad label"))?;
        let row: Vec<f64> = it
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fixture_err(lineno, "bad value"))?;
        if row.len() != dim {
            return Err(fixture_err(lineno, &format!("expected {dim} values, got {}", row.len())));
        }
        labels.push(label);
        data.extend(row);
    }
    if labels.len() != samples {
        return Err(fixture_err(
            hline,
            &format!("header declares {samples} samples, found {}", labels.len()),
        ));
    }
    Dataset::new(Matrix::from_vec(samples, dim, data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn two_sample_fixture_is_parsed_big_endian() {
        // 2 samples of 2x3 pixels; dimension fields would read as 0x02000000 etc. if little-endian
        let px = [0u8, 255, 128, 1, 2, 3, 255, 0, 0, 0, 0, 51];
        let ds = mnist_from_bytes(idx_images(2, 2, 3, &px), idx_labels(&[7, 2])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features(), 6);
        assert_eq!(ds.labels(), &[7, 2]);
        assert_eq!(ds.input(0)[0], 0.0);
        assert_eq!(ds.input(0)[1], 1.0);
        assert!((ds.input(1)[5] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gzip_wrapped_files_are_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let raw = idx_labels(&[1, 2, 3]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx_labels(&maybe_gunzip(gz).unwrap()).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn label_magic_in_image_slot_is_rejected() {
        let err = parse_idx_images(&idx_labels(&[1])).unwrap_err();
        assert_eq!(
            err,
            IdxError::WrongMagic {
                expected: 2051,
                found: 2049
            }
        );
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let px = [0u8; 5];
        assert!(matches!(
            parse_idx_images(&idx_images(2, 2, 2, &px)),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(IdxError::Truncated { .. })));
        let err = mnist_from_bytes(idx_images(1, 1, 1, &[9]), idx_labels(&[1, 2])).unwrap_err();
        assert!(matches!(
            err,
            Error::Idx(IdxError::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synthetic_blobs(3, 4, 10, 0.1, 5).unwrap();
        assert_eq!(a, synthetic_blobs(3, 4, 10, 0.1, 5).unwrap());
        assert_ne!(a, synthetic_blobs(3, 4, 10, 0.1, 6).unwrap());
        assert!(a.inputs().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synthetic_blobs(1, 4, 10, 0.1, 5).is_err());
    }

    #[test]
    fn zero_spread_puts_samples_on_centres() {
        let ds = synthetic_blobs(4, 3, 5, 0.0, 1).unwrap();
        for c in 0..4 {
            let first = ds.input(c * 5).to_vec();
            for k in 1..5 {
                assert_eq!(ds.input(c * 5 + k), first.as_slice());
            }
        }
    }

    #[test]
    fn nearest_centre_oracle_separates_tight_blobs() {
        let ds = synthetic_blobs(5, 8, 200, 0.01, 3).unwrap();
        let mut centers = vec![vec![0.0; 8]; 5];
        for i in 0..ds.len() {
            for (c, v) in centers[ds.labels()[i]].iter_mut().zip(ds.input(i)) {
                *c += v / 200.0;
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let d = |c: &Vec<f64>| c.iter().zip(ds.input(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..5).min_by(|&a, &b| d(&centers[a]).total_cmp(&d(&centers[b]))).unwrap();
                best == ds.labels()[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn subsample_cases() {
        let ds = synthetic_blobs(3, 2, 10, 0.1, 1).unwrap();
        let full = subsample(&ds, 30, 4).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..30).map(|i| full.input(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = (0..30).map(|i| ds.input(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert_eq!(subsample(&ds, 7, 4).unwrap(), subsample(&ds, 7, 4).unwrap());
        assert!(subsample(&ds, 31, 4).is_err());
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let b = batch_indices(103, 10, 9, 0);
        assert_eq!(b.len(), 11);
        assert_eq!(b.last().unwrap().len(), 3);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 103);
        assert_eq!(b, batch_indices(103, 10, 9, 0));
        assert_ne!(b, batch_indices(103, 10, 9, 1));
    }

    #[test]
    fn batch_iter_yields_matching_rows() {
        let ds = synthetic_blobs(3, 2, 5, 0.1, 1).unwrap();
        let total: usize = batch_iter(&ds, 4, 2, 0).map(|(x, y)| {
            assert_eq!(x.rows(), y.len());
            y.len()
        }).sum();
        assert_eq!(total, 15);
    }

    #[test]
    fn fixture_round_trip_and_errors() {
        let ds = synthetic_blobs(3, 4, 3, 0.2, 8).unwrap();
        assert_eq!(parse_fixture(&write_fixture(&ds)).unwrap(), ds);
        let text = "# tiny\nclasses 2 dim 2 samples 2\n0 0.1 0.2\n1 0.9 0.8\n";
        let parsed = parse_fixture(text).unwrap();
        assert_eq!(parsed.labels(), &[0, 1]);
        assert!(matches!(parse_fixture("classes 2 dim 2 samples 1\n0 0.1\n"), Err(Error::Fixture { line: 2, .. })));
        assert!(parse_fixture("classes 2 dim 1 samples 1\n5 0.1\n").is_err());
        assert!(parse_fixture("nonsense\n").is_err());
    }

    proptest! {
        #[test]
        fn every_sample_once_per_epoch(len in 1usize..500, batch in 1usize..70, seed: u64, epoch in 0u64..5) {
            let mut seen: Vec<usize> = batch_indices(len, batch, seed, epoch).concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }
    }
}

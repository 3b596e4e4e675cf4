//! Dataset loading and generation.
//!
//! IDX image/label files (MNIST layout, big-endian) are parsed into inputs in
//! `[-1, 1]`; Feynman-equation regression sets are sampled uniformly on
//! `(-1, 1)^arity`. Splits and per-epoch batch orders are seeded.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Targets;
use crate::numeric::Mat;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Draws whose denominator magnitude falls below this are redrawn.
pub const SINGULARITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
    Holdout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetData {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl TargetData {
    pub fn len(&self) -> usize {
        match self {
            TargetData::Classes { labels, .. } => labels.len(),
            TargetData::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> TargetData {
        match self {
            TargetData::Classes { labels, classes } => TargetData::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            TargetData::Values(v) => TargetData::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            TargetData::Classes { labels, .. } => Targets::Classes(labels),
            TargetData::Values(v) => Targets::Values(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub targets: TargetData,
    pub split: Split,
    /// `(rows, cols)` for image data.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Mat, targets: TargetData, split: Split) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Data(format!(
                "{} input rows vs {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Dataset {
            inputs,
            targets,
            split,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
            split,
            image_shape: self.image_shape,
        }
    }

    /// First `n` rows (or all when shorter).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split)
    }

    /// 2x2 average pooling of square-grid image inputs (28x28 -> 14x14).
    pub fn avg_pool2(&self) -> Result<Dataset> {
        let (h, w) = self
            .image_shape
            .ok_or_else(|| Error::Data("pooling needs image-shaped inputs".into()))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Data(format!("cannot 2x2-pool a {h}x{w} image")));
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Mat::zeros(self.len(), ph * pw);
        for b in 0..self.len() {
            let src = self.inputs.row(b);
            let dst = out.row_mut(b);
            for r in 0..ph {
                for c in 0..pw {
                    let at = |dr: usize, dc: usize| src[(2 * r + dr) * w + 2 * c + dc];
                    dst[r * pw + c] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                }
            }
        }
        Ok(Dataset {
            inputs: out,
            targets: self.targets.clone(),
            split: self.split,
            image_shape: Some((ph, pw)),
        })
    }
}

#[inline]
pub fn normalize_pixel(p: u8) -> f64 {
    2.0 * (p as f64 / 255.0) - 1.0
}

#[inline]
fn denormalize_pixel(x: f64) -> u8 {
    ((x + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn header(bytes: &[u8], path: &Path, magic: u32, words: usize) -> Result<Vec<u32>> {
    let truncated = |expected| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    let found = read_u32(bytes, 0).ok_or_else(|| truncated(4))?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    (1..=words)
        .map(|w| read_u32(bytes, 4 * w).ok_or_else(|| truncated(4 * (words + 1))))
        .collect()
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let h = header(bytes, path, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (h[0] as usize, h[1] as usize, h[2] as usize);
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let h = header(bytes, path, LABEL_MAGIC, 1)?;
    let n = h[0] as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image/label pair; pixels map to `2 * p / 255 - 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("label {bad} outside 0-9")));
    }
    let inputs = Mat::from_vec(n, rows * cols, pixels.into_iter().map(normalize_pixel).collect())?;
    Ok(Dataset {
        inputs,
        targets: TargetData::Classes {
            labels: labels.into_iter().map(usize::from).collect(),
            classes: 10,
        },
        split: Split::Full,
        image_shape: Some((rows, cols)),
    })
}

/// Serializes an image dataset back to IDX bytes `(images, labels)`.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = dataset
        .image_shape
        .ok_or_else(|| Error::Data("IDX export needs image-shaped inputs".into()))?;
    let TargetData::Classes { labels, .. } = &dataset.targets else {
        return Err(Error::Data("IDX export needs class labels".into()));
    };
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.inputs.as_slice().len());
    for word in [IMAGE_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    images.extend(dataset.inputs.as_slice().iter().map(|&x| denormalize_pixel(x)));
    let mut lbl = Vec::with_capacity(8 + labels.len());
    for word in [LABEL_MAGIC, n] {
        lbl.extend_from_slice(&word.to_be_bytes());
    }
    for &l in labels {
        let l = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?;
        lbl.push(l);
    }
    Ok((images, lbl))
}

pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

/// A physics formula from the Feynman regression benchmark.
#[derive(Clone, Copy)]
pub struct FeynmanFormula {
    pub id: &'static str,
    pub expression: &'static str,
    pub arity: usize,
    eval: fn(&[f64]) -> f64,
    /// Magnitude of the smallest denominator, when the formula has one.
    denominator: Option<fn(&[f64]) -> f64>,
}

impl std::fmt::Debug for FeynmanFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeynmanFormula")
            .field("id", &self.id)
            .field("expression", &self.expression)
            .field("arity", &self.arity)
            .finish()
    }
}

impl FeynmanFormula {
    pub fn eval(&self, v: &[f64]) -> f64 {
        (self.eval)(v)
    }

    pub fn is_singular(&self, v: &[f64]) -> bool {
        self.denominator.is_some_and(|d| d(v).abs() < SINGULARITY_EPS)
    }
}

fn sq(x: f64) -> f64 {
    x * x
}

macro_rules! formula {
    ($id:literal, $expr:literal, $arity:literal, $eval:expr) => {
        FeynmanFormula {
            id: $id,
            expression: $expr,
            arity: $arity,
            eval: $eval,
            denominator: None,
        }
    };
    ($id:literal, $expr:literal, $arity:literal, $eval:expr, $den:expr) => {
        FeynmanFormula {
            id: $id,
            expression: $expr,
            arity: $arity,
            eval: $eval,
            denominator: Some($den),
        }
    };
}

pub static FEYNMAN_FORMULAS: [FeynmanFormula; 24] = [
    formula!(
        "I.6.2",
        "exp(-theta^2/(2 sigma^2)) / sqrt(2 pi sigma^2)",
        2,
        |v| (-sq(v[0]) / (2.0 * sq(v[1]))).exp() / (2.0 * PI * sq(v[1])).sqrt(),
        |v| v[1]
    ),
    formula!(
        "I.6.2b",
        "exp(-(theta-theta1)^2/(2 sigma^2)) / sqrt(2 pi sigma^2)",
        3,
        |v| (-sq(v[0] - v[1]) / (2.0 * sq(v[2]))).exp() / (2.0 * PI * sq(v[2])).sqrt(),
        |v| v[2]
    ),
    formula!(
        "I.9.18",
        "a / ((b-1)^2 + (c-d)^2 + (e-f)^2)",
        6,
        |v| v[0] / (sq(v[1] - 1.0) + sq(v[2] - v[3]) + sq(v[4] - v[5])),
        |v| sq(v[1] - 1.0) + sq(v[2] - v[3]) + sq(v[4] - v[5])
    ),
    formula!("I.12.11", "1 + a sin(theta)", 2, |v| 1.0 + v[0] * v[1].sin()),
    formula!("I.13.12", "a (1/b - 1)", 2, |v| v[0] * (1.0 / v[1] - 1.0), |v| v
        [1]),
    formula!(
        "I.15.3x",
        "(1 - a) / sqrt(1 - b^2)",
        2,
        |v| (1.0 - v[0]) / (1.0 - sq(v[1])).sqrt(),
        |v| (1.0 - sq(v[1])).sqrt()
    ),
    formula!(
        "I.16.6",
        "(a + b) / (1 + a b)",
        2,
        |v| (v[0] + v[1]) / (1.0 + v[0] * v[1]),
        |v| 1.0 + v[0] * v[1]
    ),
    formula!(
        "I.18.4",
        "(1 + a b) / (1 + a)",
        2,
        |v| (1.0 + v[0] * v[1]) / (1.0 + v[0]),
        |v| 1.0 + v[0]
    ),
    formula!("I.26.2", "asin(n sin(theta2))", 2, |v| (v[0] * v[1].sin()).asin()),
    formula!(
        "I.27.2",
        "1 / (1 + a b)",
        2,
        |v| 1.0 / (1.0 + v[0] * v[1]),
        |v| 1.0 + v[0] * v[1]
    ),
    formula!("I.29.16", "sqrt(1 + a^2 - 2 a cos(theta1 - theta2))", 3, |v| (1.0
        + sq(v[0])
        - 2.0 * v[0] * (v[1] - v[2]).cos())
    .sqrt()),
    formula!(
        "I.30.3",
        "sin^2(n theta / 2) / sin^2(theta / 2)",
        2,
        |v| sq((v[0] * v[1] / 2.0).sin()) / sq((v[1] / 2.0).sin()),
        |v| sq((v[1] / 2.0).sin())
    ),
    formula!("I.40.1", "n0 exp(-a)", 2, |v| v[0] * (-v[1]).exp()),
    formula!("I.50.26", "cos(a) + alpha cos^2(a)", 2, |v| v[0].cos()
        + v[1] * sq(v[0].cos())),
    formula!("II.2.42", "(a - 1) b", 2, |v| (v[0] - 1.0) * v[1]),
    formula!("II.6.15a", "c sqrt(a^2 + b^2) / (4 pi)", 3, |v| v[2]
        * (sq(v[0]) + sq(v[1])).sqrt()
        / (4.0 * PI)),
    formula!("II.11.7", "n0 (1 + a cos(theta))", 3, |v| v[0]
        * (1.0 + v[1] * v[2].cos())),
    formula!(
        "II.11.27",
        "n alpha / (1 - n alpha / 3)",
        2,
        |v| v[0] * v[1] / (1.0 - v[0] * v[1] / 3.0),
        |v| 1.0 - v[0] * v[1] / 3.0
    ),
    formula!("II.35.18", "n0 / (exp(a) + exp(-a))", 2, |v| v[0]
        / (v[1].exp() + (-v[1]).exp())),
    formula!("II.36.38", "a + alpha b", 3, |v| v[0] + v[1] * v[2]),
    formula!("II.38.3", "a / b", 2, |v| v[0] / v[1], |v| v[1]),
    formula!(
        "III.9.52",
        "a sin^2((b - c)/2) / ((b - c)/2)^2",
        3,
        |v| v[0] * sq(((v[1] - v[2]) / 2.0).sin()) / sq((v[1] - v[2]) / 2.0),
        |v| sq((v[1] - v[2]) / 2.0)
    ),
    formula!("III.10.19", "sqrt(1 + a^2 + b^2)", 2, |v| (1.0
        + sq(v[0])
        + sq(v[1]))
    .sqrt()),
    formula!("III.17.37", "beta (1 + alpha cos(theta))", 3, |v| v[1]
        * (1.0 + v[0] * v[2].cos())),
];

pub fn feynman_formula(id: &str) -> Result<&'static FeynmanFormula> {
    FEYNMAN_FORMULAS
        .iter()
        .find(|f| f.id == id)
        .ok_or_else(|| Error::Config(format!("unknown Feynman formula '{id}'")))
}

/// Samples `n` points uniformly on `(-1, 1)^arity`, redrawing near-singular points.
pub fn gen_feynman(formula: &FeynmanFormula, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * formula.arity);
    let mut targets = Vec::with_capacity(n);
    let mut point = vec![0.0; formula.arity];
    while targets.len() < n {
        for v in point.iter_mut() {
            // open interval: random_range(-1.0..1.0) can return -1.0
            *v = loop {
                let u: f64 = rng.random_range(-1.0..1.0);
                if u > -1.0 {
                    break u;
                }
            };
        }
        if formula.is_singular(&point) {
            continue;
        }
        let y = formula.eval(&point);
        if !y.is_finite() {
            continue;
        }
        inputs.extend_from_slice(&point);
        targets.push(y);
    }
    Dataset::new(
        Mat::from_vec(n, formula.arity, inputs)?,
        TargetData::Values(targets),
        Split::Full,
    )
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub holdout: Dataset,
}

/// Seeded shuffle, then contiguous train/test/holdout split by fractions.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = dataset.len();
    let n_test = (fractions[1] * n as f64).round() as usize;
    let n_hold = (fractions[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_test + n_hold);
    split_counts(dataset, [n_train, n_test, n_hold], seed).and_then(|s| {
        for (f, part, name) in [
            (fractions[0], &s.train, "train"),
            (fractions[1], &s.test, "test"),
            (fractions[2], &s.holdout, "holdout"),
        ] {
            if f > 0.0 && part.is_empty() {
                return Err(Error::Data(format!("{name} split is empty")));
            }
        }
        Ok(s)
    })
}

/// Seeded shuffle, then the first `counts[0]` rows train, the next `counts[1]`
/// test and the next `counts[2]` holdout. Remaining rows are dropped.
pub fn split_counts(dataset: &Dataset, counts: [usize; 3], seed: u64) -> Result<Splits> {
    let total: usize = counts.iter().sum();
    if total > dataset.len() {
        return Err(Error::Data(format!(
            "requested {total} rows from a dataset of {}",
            dataset.len()
        )));
    }
    if counts[0] == 0 {
        return Err(Error::Data("train split is empty".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = order.split_at(counts[0]);
    let (b, rest) = rest.split_at(counts[1]);
    let c = &rest[..counts[2]];
    Ok(Splits {
        train: dataset.select(a, Split::Train),
        test: dataset.select(b, Split::Test),
        holdout: dataset.select(c, Split::Holdout),
    })
}

/// Row indices of each batch for one epoch. The order is a seeded shuffle
/// determined by `(seed, epoch)`.
pub fn epoch_batches(rows: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

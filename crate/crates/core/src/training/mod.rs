//! Local data handling and SGD: the learning substrate the protocol masks.

mod idx;
mod model;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{Dyadic, FixedPointError, FpVector};
use crate::randomness::Seed;

pub use idx::{load_idx, parse_idx, IDX_CLASSES, IMAGES_MAGIC, LABELS_MAGIC};
pub use model::{softmax_cross_entropy, Architecture, Model};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrainingError {
    #[error("{file}: bad magic at byte {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("{file}: expected {expected} bytes, file has {actual}")]
    Truncated {
        file: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte {offset} is outside 0..{classes}")]
    LabelOutOfRange {
        offset: usize,
        label: u8,
        classes: usize,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot split {samples} samples into {parts} parts")]
    TooFewSamples { samples: usize, parts: usize },
    #[error("batch of {batch} exceeds shard of {shard}")]
    BatchTooLarge { batch: usize, shard: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has {dataset} features/{dataset_classes} classes, model expects {model}/{model_classes}")]
    ShapeMismatch {
        dataset: usize,
        dataset_classes: usize,
        model: usize,
        model_classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(&'static str),
    #[error("invalid adversary spec {0:?}")]
    Adversary(String),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Labelled samples. Feature storage is shared between a dataset and the
/// shards split from it; only row indices and labels are per-shard.
#[derive(Clone)]
pub struct Dataset {
    features: Arc<Vec<f32>>,
    feature_dim: usize,
    rows: Vec<u32>,
    labels: Vec<u8>,
    classes: usize,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("len", &self.len())
            .field("feature_dim", &self.feature_dim)
            .field("classes", &self.classes)
            .finish()
    }
}

impl Dataset {
    pub fn new(
        features: Arc<Vec<f32>>,
        feature_dim: usize,
        labels: Vec<u8>,
        classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || classes < 2 {
            return Err(TrainingError::Invalid(
                "need features and at least 2 classes",
            ));
        }
        if features.len() != feature_dim * labels.len() {
            return Err(TrainingError::Invalid(
                "feature buffer does not match label count",
            ));
        }
        if labels.iter().any(|&l| l as usize >= classes) {
            return Err(TrainingError::Invalid("label outside class range"));
        }
        let rows = (0..labels.len() as u32).collect();
        Ok(Self {
            features,
            feature_dim,
            rows,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Row of the underlying storage for each sample; identifies samples
    /// across shards.
    pub fn source_rows(&self) -> &[u32] {
        &self.rows
    }

    pub fn sample(&self, i: usize) -> (&[f32], u8) {
        let row = self.rows[i] as usize;
        let start = row * self.feature_dim;
        (
            &self.features[start..start + self.feature_dim],
            self.labels[i],
        )
    }

    /// The samples at `positions`, sharing the feature buffer.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            features: Arc::clone(&self.features),
            feature_dim: self.feature_dim,
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            classes: self.classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    fn check_arch(&self, arch: &Architecture) -> Result<()> {
        if arch.inputs() != self.feature_dim || arch.classes() != self.classes {
            return Err(TrainingError::ShapeMismatch {
                dataset: self.feature_dim,
                dataset_classes: self.classes,
                model: arch.inputs(),
                model_classes: arch.classes(),
            });
        }
        Ok(())
    }
}

/// Seeded shuffle split into `parts` disjoint, near-equal datasets; the
/// first `len % parts` parts get one extra sample. Part 0 is the server's
/// root dataset.
pub fn partition(dataset: &Dataset, parts: usize, seed: Seed) -> Result<Vec<Dataset>> {
    if parts < 2 || dataset.len() < parts {
        return Err(TrainingError::TooFewSamples {
            samples: dataset.len(),
            parts,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.0));
    let base = dataset.len() / parts;
    let extra = dataset.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(dataset.select(&order[start..start + size]));
        start += size;
    }
    Ok(out)
}

/// Gaussian-blob classification data with features clamped to `[0, 1]`,
/// used where the protocol needs arbitrary model sizes.
pub fn synthetic_dataset(
    seed: Seed,
    samples: usize,
    feature_dim: usize,
    classes: usize,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let centroids: Vec<f32> = (0..classes * feature_dim).map(|_| rng.gen()).collect();
    let mut features = Vec::with_capacity(samples * feature_dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c as u8);
        for j in 0..feature_dim {
            let noise: f32 = rng.gen_range(-0.35..0.35);
            features.push((centroids[c * feature_dim + j] + noise).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Arc::new(features), feature_dim, labels, classes)
}

/// Mean cross-entropy loss and gradient over `positions` of `data`, in
/// real arithmetic.
pub fn batch_gradient(
    arch: &Architecture,
    params: &[f64],
    data: &Dataset,
    positions: &[usize],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; arch.param_count()];
    let mut loss = 0.0;
    for &p in positions {
        let (x, y) = data.sample(p);
        loss += arch.accumulate_gradient(params, x, y, &mut grad);
    }
    let n = positions.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// One seeded minibatch gradient of `model` on `shard`, quantized at the
/// model's scale.
pub fn local_gradient(
    model: &Model,
    shard: &Dataset,
    batch: usize,
    seed: Seed,
) -> Result<FpVector> {
    shard.check_arch(&model.arch)?;
    if batch == 0 || batch > shard.len() {
        return Err(TrainingError::BatchTooLarge {
            batch,
            shard: shard.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let positions = index::sample(&mut rng, shard.len(), batch).into_vec();
    let params = model.params.to_f64();
    let (_, grad) = batch_gradient(&model.arch, &params, shard, &positions);
    Ok(FpVector::quantize(&grad, model.params.scale())?)
}

/// Server-only SGD steps on the root dataset, using the same floored
/// fixed-point update as the protocol.
pub fn pretrain(
    model: &Model,
    root: &Dataset,
    steps: usize,
    batch: usize,
    eta: Dyadic,
    seed: Seed,
) -> Result<Model> {
    let mut params = model.params.clone();
    for step in 0..steps {
        let current = Model::new(model.arch, params.clone());
        let g = local_gradient(
            &current,
            root,
            batch,
            Seed(seed.0.wrapping_add(step as u64)),
        )?;
        params = params.checked_sub(&eta.mul_floor(&g)?)?;
    }
    Ok(Model::new(model.arch, params))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Argmax accuracy and mean cross-entropy.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(TrainingError::Empty);
    }
    test.check_arch(&model.arch)?;
    let params = model.params.to_f64();
    let (correct, loss) = (0..test.len())
        .into_par_iter()
        .map_init(Vec::new, |logits, i| {
            let (x, y) = test.sample(i);
            model.arch.logits(&params, x, logits);
            // First maximal index wins ties.
            let predicted = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &z)| {
                    if z > best.1 {
                        (c, z)
                    } else {
                        best
                    }
                })
                .0;
            let (_, loss) = softmax_cross_entropy(logits, y);
            (usize::from(predicted == y as usize), loss)
        })
        // Sum per index in a fixed tree so the float total is reproducible.
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0usize, 0.0f64), |(c, l), (dc, dl)| (c + dc, l + dl));
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: loss / test.len() as f64,
        correct,
        total: test.len(),
    })
}

/// How a participant behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AdversaryKind {
    #[default]
    Honest,
    /// Every label of the shard is replaced, once, by a uniformly chosen
    /// different class.
    LabelFlip,
    /// The gradient is negated.
    SignFlip,
    /// The gradient raws are multiplied by an integer factor > 1.
    ScaleAmplify(i64),
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Honest => f.write_str("honest"),
            Self::LabelFlip => f.write_str("label_flip"),
            Self::SignFlip => f.write_str("sign_flip"),
            Self::ScaleAmplify(k) => write!(f, "scale_amplify:{k}"),
        }
    }
}

impl FromStr for AdversaryKind {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TrainingError::Adversary(s.to_string());
        match s.split_once(':') {
            None => match s {
                "honest" => Ok(Self::Honest),
                "label_flip" => Ok(Self::LabelFlip),
                "sign_flip" => Ok(Self::SignFlip),
                _ => Err(bad()),
            },
            Some(("scale_amplify", factor)) => {
                let factor: i64 = factor.parse().map_err(|_| bad())?;
                if factor <= 1 {
                    return Err(bad());
                }
                Ok(Self::ScaleAmplify(factor))
            }
            Some(_) => Err(bad()),
        }
    }
}

impl AdversaryKind {
    /// Applies the data-poisoning part of the behaviour to a shard.
    pub fn poison_shard(&self, shard: &Dataset, seed: Seed) -> Dataset {
        let mut out = shard.clone();
        if let Self::LabelFlip = self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
            let classes = shard.classes as u32;
            for label in &mut out.labels {
                let shift = rng.gen_range(1..classes);
                *label = ((u32::from(*label) + shift) % classes) as u8;
            }
        }
        out
    }

    /// Applies the gradient-tampering part of the behaviour.
    pub fn perturb_gradient(&self, g: FpVector) -> Result<FpVector> {
        Ok(match *self {
            Self::Honest | Self::LabelFlip => g,
            Self::SignFlip => g.checked_neg()?,
            Self::ScaleAmplify(factor) => g.checked_mul_int(factor)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::dot;
    use std::collections::HashSet;

    fn tiny(features: Vec<f32>, feature_dim: usize, labels: Vec<u8>, classes: usize) -> Dataset {
        Dataset::new(Arc::new(features), feature_dim, labels, classes).unwrap()
    }

    #[test]
    fn partition_sizes_and_cover() {
        let n = 60_000;
        let ds = tiny(vec![0.0; n], 1, vec![0; n], 2);
        let parts = partition(&ds, 21, Seed(1)).unwrap();
        assert_eq!(parts.len(), 21);
        let mut seen = HashSet::new();
        for p in &parts {
            assert!(p.len() == 2857 || p.len() == 2858, "{}", p.len());
            for &r in p.source_rows() {
                assert!(seen.insert(r), "row {r} in two parts");
            }
        }
        assert_eq!(seen.len(), n);
        // 60000 = 21 * 2857 + 3
        assert_eq!(parts.iter().filter(|p| p.len() == 2858).count(), 3);

        let again = partition(&ds, 21, Seed(1)).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            assert_eq!(a.source_rows(), b.source_rows());
        }
    }

    #[test]
    fn partition_small_and_errors() {
        let ds = tiny(vec![0.0; 4], 1, vec![0, 1, 0, 1], 2);
        let parts = partition(&ds, 2, Seed(3)).unwrap();
        assert_eq!(
            parts.iter().map(Dataset::len).collect::<Vec<_>>(),
            vec![2, 2]
        );
        assert!(partition(&ds, 5, Seed(3)).is_err());
        assert!(partition(&ds, 1, Seed(3)).is_err());
    }

    #[test]
    fn zero_model_gradient_closed_form() {
        // Two samples, one per class, at w = 0: probabilities are uniform,
        // so grad W[c] = mean((1/2 - [y = c]) x), grad b = 0.
        let ds = tiny(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2);
        let arch = Architecture::Logistic {
            inputs: 2,
            classes: 2,
        };
        let model = Model::initial(arch, Seed(0), 20).unwrap();
        let g = local_gradient(&model, &ds, 2, Seed(9)).unwrap();
        let q = 1 << 18; // 0.25 at scale 20
        assert_eq!(g.raw(), &[-q, q, q, -q, 0, 0]);
        assert_eq!(g, local_gradient(&model, &ds, 2, Seed(9)).unwrap());
        assert!(local_gradient(&model, &ds, 3, Seed(9)).is_err());
    }

    fn central_difference(
        arch: &Architecture,
        params: &[f64],
        data: &Dataset,
        pos: &[usize],
    ) -> Vec<f64> {
        let h = 1e-5;
        let loss = |p: &[f64]| -> f64 {
            pos.iter()
                .map(|&i| {
                    let (x, y) = data.sample(i);
                    arch.sample_loss(p, x, y)
                })
                .sum::<f64>()
                / pos.len() as f64
        };
        (0..params.len())
            .map(|k| {
                let mut up = params.to_vec();
                let mut down = params.to_vec();
                up[k] += h;
                down[k] -= h;
                (loss(&up) - loss(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = synthetic_dataset(Seed(4), 12, 2, 3).unwrap();
        let data_mlp = synthetic_dataset(Seed(5), 12, 1, 2).unwrap();
        let archs = [
            (
                Architecture::Logistic {
                    inputs: 2,
                    classes: 3,
                },
                &data,
            ),
            (
                Architecture::Mlp {
                    inputs: 1,
                    hidden: 2,
                    classes: 2,
                },
                &data_mlp,
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (arch, data) in archs {
            assert!(arch.param_count() <= 10);
            let pos: Vec<usize> = (0..data.len()).collect();
            for _ in 0..100 {
                let params: Vec<f64> = (0..arch.param_count())
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect();
                let (_, analytic) = batch_gradient(&arch, &params, data, &pos);
                let numeric = central_difference(&arch, &params, data, &pos);
                for (a, n) in analytic.iter().zip(&numeric) {
                    let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{arch:?}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn adversaries() {
        let g = FpVector::from_raw(vec![3, -4, 5], 20).unwrap();
        assert_eq!(
            AdversaryKind::Honest.perturb_gradient(g.clone()).unwrap(),
            g
        );
        let flipped = AdversaryKind::SignFlip.perturb_gradient(g.clone()).unwrap();
        assert!(dot(&g, &flipped).unwrap() < 0);
        let amp = AdversaryKind::ScaleAmplify(10)
            .perturb_gradient(g.clone())
            .unwrap();
        assert_eq!(amp.raw(), &[30, -40, 50]);

        let ds = synthetic_dataset(Seed(1), 500, 3, 10).unwrap();
        let poisoned = AdversaryKind::LabelFlip.poison_shard(&ds, Seed(2));
        assert!(ds
            .labels()
            .iter()
            .zip(poisoned.labels())
            .all(|(a, b)| a != b));
        assert!(poisoned.labels().iter().all(|&l| l < 10));
        let hit: HashSet<_> = poisoned.labels().iter().collect();
        assert_eq!(hit.len(), 10);
        assert_eq!(
            AdversaryKind::Honest.poison_shard(&ds, Seed(2)).labels(),
            ds.labels()
        );
    }

    #[test]
    fn adversary_parsing() {
        for s in ["honest", "label_flip", "sign_flip", "scale_amplify:10"] {
            assert_eq!(s.parse::<AdversaryKind>().unwrap().to_string(), s);
        }
        for s in [
            "scale_amplify:1",
            "scale_amplify",
            "nope",
            "scale_amplify:x",
        ] {
            assert!(s.parse::<AdversaryKind>().is_err(), "{s}");
        }
    }

    #[test]
    fn evaluate_constant_predictor() {
        // Bias favours class 0 on every input: exactly 1 in 10 correct.
        let n = 100;
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let ds = tiny(vec![0.5; n], 1, labels, 10);
        let arch = Architecture::Logistic {
            inputs: 1,
            classes: 10,
        };
        let mut raw = vec![0i64; arch.param_count()];
        raw[10] = 1 << 20;
        let model = Model::new(arch, FpVector::from_raw(raw, 20).unwrap());
        let eval = evaluate(&model, &ds).unwrap();
        assert_eq!((eval.correct, eval.total), (10, 100));
        assert_eq!(eval.accuracy, 0.10);
        assert!(evaluate(&model, &ds.take(0)).is_err());
    }

    #[test]
    fn loss_vanishes_with_confident_logits() {
        // One-hot inputs, W = a * I: loss = ln(1 + (C - 1) e^-a).
        let c = 4;
        let mut features = vec![0.0; c * c];
        for i in 0..c {
            features[i * c + i] = 1.0;
        }
        let ds = tiny(features, c, (0..c as u8).collect(), c);
        let arch = Architecture::Logistic {
            inputs: c,
            classes: c,
        };
        let mut last = f64::INFINITY;
        for a in [0.0f64, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut p = vec![0.0; arch.param_count()];
            for i in 0..c {
                p[i * c + i] = a;
            }
            let model = Model::new(arch, FpVector::quantize(&p, 20).unwrap());
            let eval = evaluate(&model, &ds).unwrap();
            let closed = (1.0 + (c as f64 - 1.0) * (-a).exp()).ln();
            assert!((eval.loss - closed).abs() < 1e-9, "{a}");
            assert!(eval.loss < last);
            last = eval.loss;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let ds = synthetic_dataset(Seed(8), 400, 5, 3).unwrap();
        let arch = Architecture::Logistic {
            inputs: 5,
            classes: 3,
        };
        let model = Model::initial(arch, Seed(0), 20).unwrap();
        let eta = Dyadic::from_f64(0.5, 20).unwrap();
        let trained = pretrain(&model, &ds, 30, 32, eta, Seed(1)).unwrap();
        assert!(evaluate(&trained, &ds).unwrap().loss < evaluate(&model, &ds).unwrap().loss);
    }
}

//! Classifier architectures over a flat parameter vector.
//!
//! Forward and backward passes run in `f64`; callers quantize the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fixedpoint::{FpVector, Result as FpResult};
use crate::randomness::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Multinomial logistic regression. Parameters: `W` (classes x inputs,
    /// row-major) followed by the bias `b` (classes).
    Logistic { inputs: usize, classes: usize },
    /// One tanh hidden layer. Parameters: `W1` (hidden x inputs), `b1`,
    /// `W2` (classes x hidden), `b2`.
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match *self {
            Self::Logistic { inputs, .. } | Self::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Self::Logistic { classes, .. } | Self::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Self::Logistic { inputs, classes } => (inputs + 1) * classes,
            Self::Mlp {
                inputs,
                hidden,
                classes,
            } => (inputs + 1) * hidden + (hidden + 1) * classes,
        }
    }

    /// Stable textual descriptor, hashed into the task parameters.
    pub fn descriptor(&self) -> String {
        match *self {
            Self::Logistic { inputs, classes } => format!("logistic:{inputs}x{classes}"),
            Self::Mlp {
                inputs,
                hidden,
                classes,
            } => format!("mlp-tanh:{inputs}x{hidden}x{classes}"),
        }
    }

    /// Initial parameters: zeros for logistic regression, small seeded
    /// uniform weights for the MLP (zero init would keep hidden units tied).
    pub fn init_params(&self, seed: Seed) -> Vec<f64> {
        match *self {
            Self::Logistic { .. } => vec![0.0; self.param_count()],
            Self::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
                let mut p = Vec::with_capacity(self.param_count());
                let a1 = 1.0 / (inputs as f64).sqrt();
                p.extend((0..hidden * inputs).map(|_| rng.gen_range(-a1..a1)));
                p.extend(std::iter::repeat_n(0.0, hidden));
                let a2 = 1.0 / (hidden as f64).sqrt();
                p.extend((0..classes * hidden).map(|_| rng.gen_range(-a2..a2)));
                p.extend(std::iter::repeat_n(0.0, classes));
                p
            }
        }
    }

    /// Class logits for one input.
    pub fn logits(&self, params: &[f64], x: &[f32], out: &mut Vec<f64>) {
        out.clear();
        match *self {
            Self::Logistic { inputs, classes } => {
                let (w, b) = params.split_at(inputs * classes);
                for c in 0..classes {
                    out.push(b[c] + affine_row(&w[c * inputs..(c + 1) * inputs], x));
                }
            }
            Self::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let h = self.mlp_hidden(params, x);
                let off = (inputs + 1) * hidden;
                let (w2, b2) = params[off..].split_at(classes * hidden);
                for c in 0..classes {
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    out.push(b2[c] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>());
                }
            }
        }
    }

    fn mlp_hidden(&self, params: &[f64], x: &[f32]) -> Vec<f64> {
        let Self::Mlp { inputs, hidden, .. } = *self else {
            unreachable!("hidden layer of a non-MLP")
        };
        let (w1, rest) = params.split_at(hidden * inputs);
        let b1 = &rest[..hidden];
        (0..hidden)
            .map(|j| (b1[j] + affine_row(&w1[j * inputs..(j + 1) * inputs], x)).tanh())
            .collect()
    }

    /// Accumulates the cross-entropy gradient of one sample into `grad` and
    /// returns its loss.
    pub fn accumulate_gradient(
        &self,
        params: &[f64],
        x: &[f32],
        label: u8,
        grad: &mut [f64],
    ) -> f64 {
        let mut logits = Vec::with_capacity(self.classes());
        self.logits(params, x, &mut logits);
        let (probs, loss) = softmax_cross_entropy(&logits, label);
        // delta = p - onehot(label)
        let delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| if c == label as usize { p - 1.0 } else { p })
            .collect();
        match *self {
            Self::Logistic { inputs, classes } => {
                let (gw, gb) = grad.split_at_mut(inputs * classes);
                for (c, &d) in delta.iter().enumerate() {
                    gb[c] += d;
                    for (g, &xi) in gw[c * inputs..(c + 1) * inputs].iter_mut().zip(x) {
                        *g += d * f64::from(xi);
                    }
                }
            }
            Self::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let h = self.mlp_hidden(params, x);
                let off = (inputs + 1) * hidden;
                let w2 = &params[off..off + classes * hidden];
                let (g1, g2) = grad.split_at_mut(off);
                let (gw2, gb2) = g2.split_at_mut(classes * hidden);
                let mut dh = vec![0.0; hidden];
                for (c, &d) in delta.iter().enumerate() {
                    gb2[c] += d;
                    for j in 0..hidden {
                        gw2[c * hidden + j] += d * h[j];
                        dh[j] += d * w2[c * hidden + j];
                    }
                }
                let (gw1, gb1) = g1.split_at_mut(hidden * inputs);
                for j in 0..hidden {
                    let dz = dh[j] * (1.0 - h[j] * h[j]);
                    gb1[j] += dz;
                    for (g, &xi) in gw1[j * inputs..(j + 1) * inputs].iter_mut().zip(x) {
                        *g += dz * f64::from(xi);
                    }
                }
            }
        }
        loss
    }

    pub fn sample_loss(&self, params: &[f64], x: &[f32], label: u8) -> f64 {
        let mut logits = Vec::with_capacity(self.classes());
        self.logits(params, x, &mut logits);
        softmax_cross_entropy(&logits, label).1
    }
}

fn affine_row(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum()
}

/// Numerically stable softmax probabilities and `-ln p[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: u8) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / total).collect();
    let loss = total.ln() - (logits[label as usize] - max);
    (probs, loss)
}

/// Parameters held in fixed point together with their architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub arch: Architecture,
    pub params: FpVector,
}

impl Model {
    pub fn new(arch: Architecture, params: FpVector) -> Self {
        assert_eq!(params.dim(), arch.param_count(), "parameter count mismatch");
        Self { arch, params }
    }

    pub fn initial(arch: Architecture, seed: Seed, scale: u8) -> FpResult<Self> {
        Ok(Self::new(
            arch,
            FpVector::quantize(&arch.init_params(seed), scale)?,
        ))
    }
}

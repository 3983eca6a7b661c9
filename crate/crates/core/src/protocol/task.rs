//! The public training task: everything an auditor needs to replay the
//! record, and the arithmetic budget that keeps every step exact.

use std::cmp::Ordering;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use super::wire::{put_string, Cursor};
use super::{ProtocolError, Result};
use crate::crypto::{hash, Digest, MAX_SECURITY_PARAM};
use crate::fixedpoint::{dot_fits, Dyadic, MAX_SCALE};
use crate::randomness::{MaskBounds, MODEL_MASK_BITS, ZERO_SHARE_BITS};

pub const TASK_VERSION: u16 = 1;

/// How the server combines gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Keep a gradient only if its inner product with the server gradient
    /// is strictly positive.
    Robust,
    /// Average every correctly signed gradient (the FedAvg-style baseline).
    Plain,
}

/// Drops benign gradients whose inner product with the server gradient
/// exceeds `numerator / denominator` times the median benign inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipRule {
    pub numerator: u32,
    pub denominator: u32,
}

impl Default for ClipRule {
    fn default() -> Self {
        Self {
            numerator: 3,
            denominator: 1,
        }
    }
}

impl ClipRule {
    /// Ids whose value exceeds the threshold. The median of an even-length
    /// list is its lower middle element.
    pub fn clipped(&self, values: &[(u32, BigRational)]) -> Vec<u32> {
        if values.is_empty() || self.denominator == 0 {
            return Vec::new();
        }
        let mut sorted: Vec<&BigRational> = values.iter().map(|(_, v)| v).collect();
        sorted.sort();
        let median = sorted[(sorted.len() - 1) / 2];
        let threshold =
            median * BigRational::new(BigInt::from(self.numerator), BigInt::from(self.denominator));
        let mut out: Vec<u32> = values
            .iter()
            .filter(|(_, v)| v.cmp(&threshold) == Ordering::Greater)
            .map(|(id, _)| *id)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Public parameters of one training run. Participants are numbered
/// `1..=participants`; id 0 is the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub participants: u32,
    pub rounds: u32,
    pub eta: Dyadic,
    pub scale: u8,
    pub dim: u64,
    pub architecture: String,
    pub security_param: u32,
    pub mask_lo: i64,
    pub mask_hi: i64,
    pub mode: AggregationMode,
    pub clip: Option<ClipRule>,
    /// Honest gradient entries satisfy `|g| < 2^gradient_bits`.
    pub gradient_bits: u8,
}

const LIMIT_63: u128 = 1 << 63;

impl TaskParams {
    pub fn mask_bounds(&self) -> MaskBounds {
        MaskBounds {
            lo: self.mask_lo,
            hi: self.mask_hi,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    /// Largest raw an honest gradient entry may take.
    pub fn gradient_raw_bound(&self) -> i64 {
        1i64 << (u32::from(self.gradient_bits) + u32::from(self.scale))
    }

    pub fn participant_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.participants
    }

    /// Rejects parameter sets whose masked arithmetic could overflow. All
    /// bounds are worst cases over every quantity the server or an auditor
    /// computes.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ProtocolError::Config(m));
        if self.participants == 0 {
            return fail("at least one participant is required".into());
        }
        if self.rounds == 0 {
            return fail("at least one round is required".into());
        }
        if self.dim == 0 {
            return fail("model dimension must be positive".into());
        }
        if self.scale > MAX_SCALE || self.eta.exp() > self.scale {
            return fail(format!(
                "learning rate {} is not representable at scale 2^-{}",
                self.eta, self.scale
            ));
        }
        if self.security_param == 0 || self.security_param > MAX_SECURITY_PARAM {
            return fail(format!(
                "security parameter {} outside 1..=128",
                self.security_param
            ));
        }
        self.mask_bounds()
            .validate()
            .map_err(|e| ProtocolError::Config(e.to_string()))?;
        if let Some(c) = self.clip {
            if c.numerator == 0 || c.denominator == 0 {
                return fail("clip factor must be positive".into());
            }
        }
        if u32::from(self.gradient_bits) + u32::from(self.scale) > 61 {
            return fail(format!(
                "gradient bound 2^{} at scale 2^-{} leaves no headroom",
                self.gradient_bits, self.scale
            ));
        }

        let n = u128::from(self.participants);
        let g = self.gradient_raw_bound() as u128;
        let rn = self.mask_hi as u128;
        let zero = 1u128 << ZERO_SHARE_BITS;
        let model_mask = 1u128 << MODEL_MASK_BITS;
        let eta_num = self.eta.numerator() as u128;

        let masked = g * rn;
        if masked >= LIMIT_63 {
            return fail(format!(
                "masked gradients reach 2^{:.1}: lower mask_hi, gradient_bits or scale",
                (masked as f64).log2()
            ));
        }
        if !dot_fits(self.dim as usize, masked as u64) {
            return fail(format!(
                "masked inner products over dim {} can exceed 128 bits",
                self.dim
            ));
        }
        // Auditor's sum: (n+1) m_r + zv_S + g_S + sum_j (zv_j + g_j).
        let aggregate = (n + 1) * model_mask + 2 * n * zero + (n + 1) * g;
        if aggregate >= LIMIT_63 {
            return fail(format!("aggregation shares overflow with {n} participants"));
        }
        // Model drift over all rounds plus the accumulated model mask.
        let drift =
            u128::from(self.rounds) * ((eta_num * (model_mask + g)) >> self.eta.exp()).max(1);
        if drift.saturating_mul(2) >= LIMIT_63 {
            return fail(format!(
                "{} rounds at learning rate {} can overflow the model",
                self.rounds, self.eta
            ));
        }
        Ok(())
    }

    /// Canonical encoding; its hash is the task identifier in the genesis
    /// block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&TASK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.participants.to_le_bytes());
        out.extend_from_slice(&self.rounds.to_le_bytes());
        out.extend_from_slice(&self.eta.numerator().to_le_bytes());
        out.push(self.eta.exp());
        out.push(self.scale);
        out.extend_from_slice(&self.dim.to_le_bytes());
        put_string(&mut out, &self.architecture);
        out.extend_from_slice(&self.security_param.to_le_bytes());
        out.extend_from_slice(&self.mask_lo.to_le_bytes());
        out.extend_from_slice(&self.mask_hi.to_le_bytes());
        out.push(match self.mode {
            AggregationMode::Robust => 0,
            AggregationMode::Plain => 1,
        });
        match self.clip {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.numerator.to_le_bytes());
                out.extend_from_slice(&c.denominator.to_le_bytes());
            }
        }
        out.push(self.gradient_bits);
        out
    }

    pub(crate) fn decode(cur: &mut Cursor<'_>) -> Result<Self> {
        let version = cur.u16()?;
        if version != TASK_VERSION {
            return Err(ProtocolError::Decode(format!(
                "unknown task version {version}"
            )));
        }
        let participants = cur.u32()?;
        let rounds = cur.u32()?;
        let eta_num = cur.i64()?;
        let eta_exp = cur.u8()?;
        let eta =
            Dyadic::new(eta_num, eta_exp).map_err(|e| ProtocolError::Decode(e.to_string()))?;
        if eta.numerator() != eta_num || eta.exp() != eta_exp {
            return Err(ProtocolError::Decode(
                "learning rate not in lowest terms".into(),
            ));
        }
        let scale = cur.u8()?;
        let dim = cur.u64()?;
        let architecture = cur.string()?;
        let security_param = cur.u32()?;
        let mask_lo = cur.i64()?;
        let mask_hi = cur.i64()?;
        let mode = match cur.u8()? {
            0 => AggregationMode::Robust,
            1 => AggregationMode::Plain,
            m => {
                return Err(ProtocolError::Decode(format!(
                    "unknown aggregation mode {m}"
                )))
            }
        };
        let clip = match cur.u8()? {
            0 => None,
            1 => Some(ClipRule {
                numerator: cur.u32()?,
                denominator: cur.u32()?,
            }),
            f => return Err(ProtocolError::Decode(format!("bad clip flag {f}"))),
        };
        let gradient_bits = cur.u8()?;
        Ok(Self {
            participants,
            rounds,
            eta,
            scale,
            dim,
            architecture,
            security_param,
            mask_lo,
            mask_hi,
            mode,
            clip,
            gradient_bits,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let task = Self::decode(&mut cur)?;
        cur.finish()?;
        Ok(task)
    }

    pub fn digest(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

#[cfg(test)]
pub(crate) fn sample_task(participants: u32, rounds: u32, dim: u64) -> TaskParams {
    TaskParams {
        participants,
        rounds,
        eta: Dyadic::new(1, 1).unwrap(),
        scale: 20,
        dim,
        architecture: "test".into(),
        security_param: 48,
        mask_lo: 1 << 8,
        mask_hi: 1 << 15,
        mode: AggregationMode::Robust,
        clip: None,
        gradient_bits: 10,
    }
}

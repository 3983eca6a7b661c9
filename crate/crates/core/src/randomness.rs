//! Seeded randomness for masking.
//!
//! The PRG is ChaCha20 in counter mode keyed by a hash of a 64-bit [`Seed`].
//! Reads are seekable, so any single output word, and therefore any single
//! PRVG sign, is a pure function of `(seed, index)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fixedpoint::{Dyadic, FixedPointError, FpVector};

/// Bound on the raws of a sampled zero share: entries lie in `[-2^40, 2^40]`.
pub const ZERO_SHARE_BITS: u32 = 40;

/// Bound on the raws of a per-round model mask share.
pub const MODEL_MASK_BITS: u32 = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RandomnessError {
    #[error("PRVG requires a positive dimension")]
    EmptyDimension,
    #[error("PRVG requires a nonzero rn")]
    ZeroMultiplier,
    #[error("zero sharing needs at least 2 parties, got {0}")]
    TooFewParties(usize),
    #[error("model mask needs at least one round")]
    NoRounds,
    #[error("invalid mask bounds [{lo}, {hi}]")]
    InvalidBounds { lo: i64, hi: i64 },
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
}

pub type Result<T> = std::result::Result<T, RandomnessError>;

/// A 64-bit PRG seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

/// Domain-separation tag for [`derive_seed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    /// PRVG sign pattern shared by a participant and the server.
    Mask = 1,
    /// Per-round additive zero share of a participant.
    ZeroShare = 2,
    /// The correlated `(rn_i, rn_S)` pair.
    Correlated = 3,
    /// Model-mask shares `m_r`.
    ModelMask = 4,
    /// Deterministic signing-key material.
    SigningKey = 5,
    /// Minibatch selection.
    Batch = 6,
    /// Adversarial perturbations such as label flipping.
    Adversary = 7,
    /// Dataset shuffling.
    Partition = 8,
}

/// Derives a seed for `(party, purpose, round)` from the master seed.
///
/// Distinct tags map to distinct seeds up to collisions of a truncated
/// SHA-256, which is what keeps adjacent participants' streams apart.
pub fn derive_seed(master: u64, party: u32, purpose: Purpose, round: u32) -> Seed {
    let mut h = Sha256::new();
    h.update(b"auditfl/seed/v1");
    h.update(master.to_le_bytes());
    h.update(party.to_le_bytes());
    h.update([purpose as u8]);
    h.update(round.to_le_bytes());
    let digest = h.finalize();
    Seed(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Seekable deterministic stream of `u64` words.
#[derive(Clone)]
pub struct Prg {
    rng: ChaCha20Rng,
}

impl Prg {
    pub fn new(seed: Seed) -> Self {
        let mut h = Sha256::new();
        h.update(b"auditfl/prg/v1");
        h.update(seed.0.to_le_bytes());
        Self {
            rng: ChaCha20Rng::from_seed(h.finalize().into()),
        }
    }

    /// Positions the stream so the next call returns output word `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(u128::from(index) * 2);
    }

    pub fn next_word(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn uniform(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.gen_range(lo..=hi)
    }

    pub fn word_at(seed: Seed, index: u64) -> u64 {
        let mut prg = Self::new(seed);
        prg.seek(index);
        prg.next_word()
    }
}

/// The first `count` words of the stream for `seed`.
pub fn prg(seed: Seed, count: usize) -> Vec<u64> {
    let mut p = Prg::new(seed);
    (0..count).map(|_| p.next_word()).collect()
}

/// Sign of entry `index` in a PRVG vector: bit `index % 64` of stream word
/// `index / 64`, mapped 1 -> +1 and 0 -> -1.
pub fn random_sample_sign(seed: Seed, index: u64) -> i64 {
    let word = Prg::word_at(seed, index / 64);
    if (word >> (index % 64)) & 1 == 1 {
        1
    } else {
        -1
    }
}

/// Pseudo-random vector whose entries are `±rn` with seed-determined signs.
/// Two calls sharing a seed but with same-signed multipliers have an
/// entry-wise product equal to the product of the multipliers everywhere.
pub fn prvg(seed: Seed, rn: i64, num: usize) -> Result<Vec<i64>> {
    if num == 0 {
        return Err(RandomnessError::EmptyDimension);
    }
    if rn == 0 {
        return Err(RandomnessError::ZeroMultiplier);
    }
    let mut p = Prg::new(seed);
    let mut out = Vec::with_capacity(num);
    while out.len() < num {
        let word = p.next_word();
        let take = (num - out.len()).min(64);
        out.extend((0..take).map(|bit| if (word >> bit) & 1 == 1 { rn } else { -rn }));
    }
    Ok(out)
}

/// Inclusive magnitude range for correlated random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBounds {
    pub lo: i64,
    pub hi: i64,
}

impl Default for MaskBounds {
    fn default() -> Self {
        Self {
            lo: 1 << 8,
            hi: 1 << 15,
        }
    }
}

impl MaskBounds {
    pub fn validate(&self) -> Result<()> {
        // hi <= 2^31 keeps l = rn_i * rn_S inside i64 with room to spare.
        if self.lo < 1 || self.hi < self.lo || self.hi > 1 << 31 {
            return Err(RandomnessError::InvalidBounds {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }
}

/// Two same-signed random numbers and their positive product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelatedPair {
    pub rn_participant: i64,
    pub rn_server: i64,
    pub l: i64,
}

pub fn gen_correlated_pair(seed: Seed, bounds: MaskBounds) -> Result<CorrelatedPair> {
    bounds.validate()?;
    let mut p = Prg::new(seed);
    let sign = if p.next_word() & 1 == 1 { 1 } else { -1 };
    let rn_participant = sign * p.uniform(bounds.lo, bounds.hi);
    let rn_server = sign * p.uniform(bounds.lo, bounds.hi);
    Ok(CorrelatedPair {
        rn_participant,
        rn_server,
        l: rn_participant * rn_server,
    })
}

/// One additive share with raws uniform in `[-2^40, 2^40]`.
pub fn zero_share_component(seed: Seed, dim: usize, scale: u8) -> Result<FpVector> {
    let bound = 1i64 << ZERO_SHARE_BITS;
    let mut p = Prg::new(seed);
    let raw = (0..dim).map(|_| p.uniform(-bound, bound)).collect();
    Ok(FpVector::from_raw(raw, scale)?)
}

/// The share that cancels `shares`: the exact negation of their sum.
pub fn compensating_share(shares: &[&FpVector], dim: usize, scale: u8) -> Result<FpVector> {
    let mut sum = FpVector::zeros(dim, scale)?;
    for s in shares {
        sum.add_assign(s)?;
    }
    Ok(sum.checked_neg()?)
}

/// `n` vectors summing exactly to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroShareSet {
    pub shares: Vec<FpVector>,
}

pub fn gen_zero_shares(seed: Seed, n: usize, dim: usize, scale: u8) -> Result<ZeroShareSet> {
    if n < 2 {
        return Err(RandomnessError::TooFewParties(n));
    }
    if dim == 0 {
        return Err(RandomnessError::EmptyDimension);
    }
    let bound = 1i64 << ZERO_SHARE_BITS;
    let mut p = Prg::new(seed);
    let mut shares = (0..n - 1)
        .map(|_| {
            let raw = (0..dim).map(|_| p.uniform(-bound, bound)).collect();
            FpVector::from_raw(raw, scale)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let last = compensating_share(&shares.iter().collect::<Vec<_>>(), dim, scale)?;
    shares.push(last);
    Ok(ZeroShareSet { shares })
}

/// The model mask split across rounds. `per_round[r]` is the value folded
/// into the server's aggregation share in round `r + 1`; `total` is the
/// exact `sum(eta * per_round[r])` subtracted from the final model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelMaskShares {
    pub per_round: Vec<FpVector>,
    pub total: FpVector,
}

/// Samples each share on the lattice of multiples of `2^eta.exp()` raws so
/// that `eta * share` is an integer and the final unmasking telescopes
/// exactly.
pub fn gen_model_mask_shares(
    seed: Seed,
    rounds: usize,
    dim: usize,
    eta: Dyadic,
    scale: u8,
) -> Result<ModelMaskShares> {
    if rounds == 0 {
        return Err(RandomnessError::NoRounds);
    }
    if dim == 0 {
        return Err(RandomnessError::EmptyDimension);
    }
    let step = eta.lattice();
    let steps = (1i64 << MODEL_MASK_BITS) / step;
    let mut p = Prg::new(seed);
    let mut total = FpVector::zeros(dim, scale)?;
    let mut per_round = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let raw = (0..dim).map(|_| p.uniform(-steps, steps) * step).collect();
        let share = FpVector::from_raw(raw, scale)?;
        total.add_assign(&eta.mul_exact(&share)?)?;
        per_round.push(share);
    }
    Ok(ModelMaskShares { per_round, total })
}

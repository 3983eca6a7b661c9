//! Preprocessing: every secret of a run, derived from one master seed.
//!
//! Nothing in this module is ever serialized into the training record.

use super::genesis::Genesis;
use super::task::TaskParams;
use super::{ProtocolError, Result};
use crate::crypto::{keygen_from_seed, sign, KeyPair, PublicKey};
use crate::fixedpoint::FpVector;
use crate::randomness::{
    derive_seed, gen_correlated_pair, gen_model_mask_shares, prvg, zero_share_component,
    ModelMaskShares, Purpose, Seed,
};

/// Per-round PRVG seed for participant `id` (the round enters as a
/// domain-separation field rather than by adding it to the seed).
pub fn round_mask_seed(mask_seed: Seed, id: u32, round: u32) -> Seed {
    derive_seed(mask_seed.0, id, Purpose::Mask, round)
}

/// Participant `id`'s additive zero share for `round`.
pub fn round_zero_share(
    zero_seed: Seed,
    id: u32,
    round: u32,
    dim: usize,
    scale: u8,
) -> Result<FpVector> {
    let seed = derive_seed(zero_seed.0, id, Purpose::ZeroShare, round);
    Ok(zero_share_component(seed, dim, scale)?)
}

/// What the server hands participant `id` at preprocessing.
#[derive(Debug, Clone)]
pub struct ParticipantSecrets {
    pub id: u32,
    pub mask_seed: Seed,
    pub zero_seed: Seed,
    pub rn: i64,
    pub key: KeyPair,
}

impl ParticipantSecrets {
    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    /// `rv^i_r`.
    pub fn round_mask(&self, round: u32, dim: usize) -> Result<Vec<i64>> {
        Ok(prvg(
            round_mask_seed(self.mask_seed, self.id, round),
            self.rn,
            dim,
        )?)
    }

    /// `zv^i_r`.
    pub fn round_zero_share(&self, round: u32, dim: usize, scale: u8) -> Result<FpVector> {
        round_zero_share(self.zero_seed, self.id, round, dim, scale)
    }
}

/// The server's copy of one participant's material.
#[derive(Debug, Clone)]
pub struct PairSecret {
    pub id: u32,
    pub mask_seed: Seed,
    pub zero_seed: Seed,
    pub rn_participant: i64,
    pub rn_server: i64,
    /// `rn_participant * rn_server`, always positive.
    pub l: i64,
    pub public_key: PublicKey,
}

impl PairSecret {
    pub fn participant_mask(&self, round: u32, dim: usize) -> Result<Vec<i64>> {
        Ok(prvg(
            round_mask_seed(self.mask_seed, self.id, round),
            self.rn_participant,
            dim,
        )?)
    }

    /// `rv^S_{r,i}`.
    pub fn server_mask(&self, round: u32, dim: usize) -> Result<Vec<i64>> {
        Ok(prvg(
            round_mask_seed(self.mask_seed, self.id, round),
            self.rn_server,
            dim,
        )?)
    }

    pub fn zero_share(&self, round: u32, dim: usize, scale: u8) -> Result<FpVector> {
        round_zero_share(self.zero_seed, self.id, round, dim, scale)
    }
}

#[derive(Debug, Clone)]
pub struct ServerSecrets {
    /// Ordered by participant id.
    pub pairs: Vec<PairSecret>,
    pub model_mask: ModelMaskShares,
    pub key: KeyPair,
}

impl ServerSecrets {
    pub fn pair(&self, id: u32) -> Option<&PairSecret> {
        id.checked_sub(1).and_then(|i| self.pairs.get(i as usize))
    }

    /// `m_r` for a 1-based round.
    pub fn model_mask_share(&self, round: u32) -> Option<&FpVector> {
        round
            .checked_sub(1)
            .and_then(|i| self.model_mask.per_round.get(i as usize))
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub server: ServerSecrets,
    /// Ordered by participant id.
    pub participants: Vec<ParticipantSecrets>,
    pub genesis: Genesis,
}

/// Generates all secrets from `master_seed` and signs the initial model.
pub fn preprocess(task: &TaskParams, master_seed: u64, w0: &FpVector) -> Result<Preprocessed> {
    task.validate()?;
    if w0.dim() != task.dim() || w0.scale() != task.scale {
        return Err(ProtocolError::Config(format!(
            "initial model has dim {} at scale {}, task expects {} at {}",
            w0.dim(),
            w0.scale(),
            task.dim,
            task.scale
        )));
    }
    let k = task.security_param;
    let server_key = keygen_from_seed(k, derive_seed(master_seed, 0, Purpose::SigningKey, 0))?;
    let model_mask = gen_model_mask_shares(
        derive_seed(master_seed, 0, Purpose::ModelMask, 0),
        task.rounds as usize,
        task.dim(),
        task.eta,
        task.scale,
    )?;

    let mut pairs = Vec::with_capacity(task.participants as usize);
    let mut participants = Vec::with_capacity(task.participants as usize);
    for id in task.participant_ids() {
        let key = keygen_from_seed(k, derive_seed(master_seed, id, Purpose::SigningKey, 0))?;
        let pair = gen_correlated_pair(
            derive_seed(master_seed, id, Purpose::Correlated, 0),
            task.mask_bounds(),
        )?;
        let mask_seed = derive_seed(master_seed, id, Purpose::Mask, 0);
        let zero_seed = derive_seed(master_seed, id, Purpose::ZeroShare, 0);
        pairs.push(PairSecret {
            id,
            mask_seed,
            zero_seed,
            rn_participant: pair.rn_participant,
            rn_server: pair.rn_server,
            l: pair.l,
            public_key: key.public(),
        });
        participants.push(ParticipantSecrets {
            id,
            mask_seed,
            zero_seed,
            rn: pair.rn_participant,
            key,
        });
    }

    let genesis = Genesis {
        task: task.clone(),
        model_signature: sign(&server_key, &w0.to_bytes()),
        server_key: server_key.public(),
        participant_keys: participants.iter().map(|p| p.public_key()).collect(),
    };
    Ok(Preprocessed {
        server: ServerSecrets {
            pairs,
            model_mask,
            key: server_key,
        },
        participants,
        genesis,
    })
}

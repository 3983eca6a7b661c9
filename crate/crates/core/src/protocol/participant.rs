//! The participant side of a round.

use super::secrets::ParticipantSecrets;
use super::task::TaskParams;
use super::{ProtocolError, Result};
use crate::crypto::{sign, Signature};
use crate::fixedpoint::{hadamard, FpVector};

/// `mg^1 = rv ⊙ g`.
pub fn mask_mg1(mask: &[i64], gradient: &FpVector) -> Result<FpVector> {
    Ok(hadamard(gradient, mask)?)
}

/// `mg^2 = zv + g`.
pub fn mask_mg2(zero_share: &FpVector, gradient: &FpVector) -> Result<FpVector> {
    Ok(zero_share.checked_add(gradient)?)
}

/// What a participant sends the server: its plaintext gradient and
/// signatures over both masked forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    pub id: u32,
    pub round: u32,
    pub gradient: FpVector,
    pub mg1_signature: Signature,
    pub mg2_signature: Signature,
}

/// Masks and signs an already computed local gradient for `round`.
pub fn participant_round(
    secrets: &ParticipantSecrets,
    task: &TaskParams,
    gradient: FpVector,
    round: u32,
) -> Result<Submission> {
    if round == 0 || round > task.rounds {
        return Err(ProtocolError::RoundOutOfRange {
            round,
            rounds: task.rounds,
        });
    }
    let dim = gradient.dim();
    let mg1 = mask_mg1(&secrets.round_mask(round, dim)?, &gradient)?;
    let mg2 = mask_mg2(
        &secrets.round_zero_share(round, dim, gradient.scale())?,
        &gradient,
    )?;
    Ok(Submission {
        id: secrets.id,
        round,
        mg1_signature: sign(&secrets.key, &mg1.to_bytes()),
        mg2_signature: sign(&secrets.key, &mg2.to_bytes()),
        gradient,
    })
}

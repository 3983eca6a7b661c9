//! Genesis payload: the published task, the server's signature over the
//! initial model and the key roster.
//!
//! Layout (little-endian):
//!
//! ```text
//! version: u16
//! task_len: u32 | task bytes
//! task digest: 32 bytes (SHA-256 of the task bytes)
//! initial-model signature: 64 bytes
//! server public key: 33 bytes
//! participant count: u32 | public key: 33 bytes, ordered by id from 1
//! ```

use super::task::TaskParams;
use super::wire::Cursor;
use super::{ProtocolError, Result};
use crate::crypto::{hash, verify, Digest, PublicKey, Signature};
use crate::fixedpoint::FpVector;

pub const GENESIS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genesis {
    pub task: TaskParams,
    /// `sigma^S_w`: signature over the canonical encoding of `w_0`.
    pub model_signature: Signature,
    pub server_key: PublicKey,
    /// Key of participant `i` at index `i - 1`.
    pub participant_keys: Vec<PublicKey>,
}

impl Genesis {
    pub fn task_digest(&self) -> Digest {
        self.task.digest()
    }

    pub fn participant_key(&self, id: u32) -> Option<&PublicKey> {
        id.checked_sub(1)
            .and_then(|i| self.participant_keys.get(i as usize))
    }

    pub fn verifies_initial_model(&self, w0: &FpVector) -> bool {
        verify(&self.server_key, &w0.to_bytes(), &self.model_signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let task = self.task.to_bytes();
        let mut out = Vec::with_capacity(task.len() + 140 + 33 * self.participant_keys.len());
        out.extend_from_slice(&GENESIS_VERSION.to_le_bytes());
        out.extend_from_slice(&(task.len() as u32).to_le_bytes());
        out.extend_from_slice(&task);
        out.extend_from_slice(&hash(&task).0);
        out.extend_from_slice(&self.model_signature.0);
        out.extend_from_slice(&self.server_key.0);
        out.extend_from_slice(&(self.participant_keys.len() as u32).to_le_bytes());
        for pk in &self.participant_keys {
            out.extend_from_slice(&pk.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let version = cur.u16()?;
        if version != GENESIS_VERSION {
            return Err(ProtocolError::Decode(format!(
                "unknown genesis version {version}"
            )));
        }
        let task_len = cur.u32()? as usize;
        let task_bytes = cur.take(task_len)?;
        let task = TaskParams::from_bytes(task_bytes)?;
        let digest = Digest(cur.fixed()?);
        if digest != hash(task_bytes) {
            return Err(ProtocolError::Decode(
                "task digest does not match task".into(),
            ));
        }
        let model_signature = cur.signature()?;
        let server_key = cur.public_key()?;
        let count = cur.u32()?;
        if count != task.participants {
            return Err(ProtocolError::Decode(format!(
                "{count} keys for {} participants",
                task.participants
            )));
        }
        let participant_keys = (0..count)
            .map(|_| cur.public_key())
            .collect::<Result<Vec<_>>>()?;
        cur.finish()?;
        Ok(Self {
            task,
            model_signature,
            server_key,
            participant_keys,
        })
    }
}

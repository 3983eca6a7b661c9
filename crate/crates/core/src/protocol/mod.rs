//! The masked-gradient protocol between the central server and its
//! participants: preprocessing, per-round exchange, robust aggregation,
//! model update and assembly of the training record.
//!
//! Transport is in-process: participants hand [`Submission`]s to the
//! [`Server`] and the server streams the record into any [`std::io::Write`].

pub mod aggregation;
pub mod genesis;
pub mod participant;
pub mod record;
pub mod secrets;
pub mod server;
pub mod task;
mod wire;

use thiserror::Error;

use crate::crypto::CryptoError;
use crate::fixedpoint::FixedPointError;
use crate::randomness::RandomnessError;

pub use aggregation::{detect, robust_aggregate, select_benign, Aggregate};
pub use genesis::{Genesis, GENESIS_VERSION};
pub use participant::{mask_mg1, mask_mg2, participant_round, Submission};
pub use record::{
    deflation_value, AggregationShare, EntryBody, ParticipantEntry, RecordReader, RecordWriter,
    RoundRecord, RtValue, TrainingRecord,
};
pub use secrets::{preprocess, PairSecret, ParticipantSecrets, Preprocessed, ServerSecrets};
pub use server::{RoundOutcome, Server, ServerFault};
pub use task::{AggregationMode, ClipRule, TaskParams};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed encoding: {0}")]
    Decode(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("round {round} is outside 1..={rounds}")]
    RoundOutOfRange { round: u32, rounds: u32 },
    #[error("participant {0} is not registered")]
    UnknownParticipant(u32),
    #[error("participant {0} submitted twice")]
    DuplicateSubmission(u32),
    #[error("participant {0} did not submit")]
    MissingSubmission(u32),
    #[error("all {0} rounds are already complete")]
    TrainingComplete(u32),
    #[error("internal check failed: {0}")]
    Internal(String),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Randomness(#[from] RandomnessError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

//! Publicly auditable, privacy-preserving, robust federated learning.
//!
//! Gradients are masked twice: multiplicatively with correlated PRVG
//! vectors, so anyone can check which gradients the server kept, and
//! additively with zero shares, so anyone can recompute the aggregate.
//! All protocol arithmetic is exact fixed point, which makes every audit
//! check an integer equality.

pub mod auditor;
pub mod crypto;
pub mod fixedpoint;
pub mod ledger;
pub mod protocol;
pub mod randomness;
pub mod simulation;
pub mod training;

pub use auditor::{full_audit, AuditFailure, AuditReport, Stage, Verdict};
pub use crypto::{Digest, KeyPair, PublicKey, Signature};
pub use fixedpoint::{Dyadic, FpScalar, FpVector, WideInt};
pub use ledger::{verify_chain, ChainVerdict, Clock, Ledger};
pub use protocol::{AggregationMode, ClipRule, Genesis, RoundRecord, TaskParams, TrainingRecord};
pub use randomness::Seed;
pub use simulation::{MaliciousSpec, RunConfig, RunSummary};
pub use training::{AdversaryKind, Architecture, Dataset, Model};

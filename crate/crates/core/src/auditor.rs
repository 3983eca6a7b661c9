//! Third-party audit of a published training record.
//!
//! Works from ledger bytes alone: the genesis payload (task, key roster,
//! signature over the initial model) and the training record. It never
//! touches preprocessing secrets.

use std::cmp::Ordering;
use std::fmt;
use std::io::Read;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;
use rayon::prelude::*;
use serde::Serialize;

use crate::crypto::{hash, verify, PublicKey};
use crate::fixedpoint::{dot, floor_div, sign_indicator, FpVector};
use crate::ledger::{verify_chain, ChainVerdict, Clock, Ledger};
use crate::protocol::{
    select_benign, EntryBody, Genesis, RecordReader, RoundRecord, RtValue, TaskParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Which check a rejection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Chain,
    Parse,
    Structure,
    Signature,
    Detection,
    Aggregation,
    Recovery,
    InitialModelSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditFailure {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participant: Option<u32>,
    pub message: String,
}

impl AuditFailure {
    fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            round: None,
            participant: None,
            message: message.into(),
        }
    }

    fn round(mut self, round: u32) -> Self {
        self.round = Some(round);
        self
    }

    fn participant(mut self, id: u32) -> Self {
        self.participant = Some(id);
        self
    }
}

impl fmt::Display for AuditFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.stage)?;
        if let Some(r) = self.round {
            write!(f, " (round {r}")?;
            match self.participant {
                Some(p) => write!(f, ", participant {p})")?,
                None => write!(f, ")")?,
            }
        } else if let Some(p) = self.participant {
            write!(f, " (participant {p})")?;
        }
        write!(f, ": {}", self.message)
    }
}

type Check<T> = std::result::Result<T, AuditFailure>;

/// Per-participant detection result for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParticipantCheck {
    pub id: u32,
    /// False when the server published the submission as rejected.
    pub evaluated: bool,
    /// `1(<mg1_i, mg^S_{r,i,1}>)`, when evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eq1: Option<u8>,
    pub mg1_signature: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mg2_signature: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    /// `P~_r` as re-derived by the auditor.
    pub derived_benign: Vec<u32>,
    pub published_benign: Vec<u32>,
    pub participants: Vec<ParticipantCheck>,
    /// Evaluated participants by deflated inner product, largest first.
    pub ranking: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceReport {
    /// SHA-256 of the canonical encoding of the recovered initial model.
    pub recovered_model_digest: String,
    pub signature_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<AuditFailure>,
    pub chain_blocks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_height: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_digest: Option<String>,
    pub rounds: Vec<RoundReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceReport>,
}

impl AuditReport {
    fn rejected(failure: AuditFailure) -> Self {
        Self {
            verdict: Verdict::Reject,
            first_failure: Some(failure),
            chain_blocks: 0,
            record_height: None,
            task_digest: None,
            record_digest: None,
            rounds: Vec::new(),
            trace: None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Result of [`audit_detection`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detection {
    /// `P~_r`, ascending.
    pub benign: Vec<u32>,
    pub checks: Vec<ParticipantCheck>,
    /// `rt_i * <mg1_i, mg^S_{r,i,1}>` for every evaluated participant.
    pub deflated: Vec<(u32, BigRational)>,
}

fn check_vector(task: &TaskParams, v: &FpVector, what: &str) -> Check<()> {
    if v.dim() != task.dim() || v.scale() != task.scale {
        return Err(AuditFailure::new(
            Stage::Structure,
            format!(
                "{what} has dim {} at scale {}, task declares {} at {}",
                v.dim(),
                v.scale(),
                task.dim,
                task.scale
            ),
        ));
    }
    Ok(())
}

/// Checks the deflation values: one positive rational per participant, in
/// id order.
pub fn check_rt(task: &TaskParams, rt: &[RtValue]) -> Check<()> {
    let ids: Vec<u32> = rt.iter().map(|v| v.id).collect();
    if ids != task.participant_ids().collect::<Vec<_>>() {
        return Err(AuditFailure::new(
            Stage::Structure,
            "deflation values do not cover the participants in id order",
        ));
    }
    if let Some(bad) = rt.iter().find(|v| !v.value.is_positive()) {
        return Err(
            AuditFailure::new(Stage::Structure, "deflation value is not positive")
                .participant(bad.id),
        );
    }
    Ok(())
}

/// Verifies every signature in `trcd_r` and re-derives the benign set from
/// the masked inner products. The derived set must equal both the set of
/// published `mg2` entries and the server's published benign list.
pub fn audit_detection(
    genesis: &Genesis,
    rt: &[RtValue],
    record: &RoundRecord,
) -> Check<Detection> {
    let task = &genesis.task;
    let r = record.round;
    let ids: Vec<u32> = record.entries.iter().map(|e| e.id).collect();
    if ids != task.participant_ids().collect::<Vec<_>>() {
        return Err(AuditFailure::new(
            Stage::Structure,
            "entries do not list every participant in id order",
        )
        .round(r));
    }
    check_vector(task, &record.server_mg2, "server aggregation share").map_err(|e| e.round(r))?;

    let rows = record
        .entries
        .par_iter()
        .zip(rt.par_iter())
        .map(
            |(entry, rt)| -> Check<(ParticipantCheck, Option<BigRational>)> {
                let id = entry.id;
                let fail = |e: AuditFailure| e.round(r).participant(id);
                let pk: &PublicKey = genesis.participant_key(id).ok_or_else(|| {
                    fail(AuditFailure::new(Stage::Structure, "no registered key"))
                })?;
                let EntryBody::Evaluated {
                    mg1,
                    mg1_signature,
                    server_mg1,
                    share,
                } = &entry.body
                else {
                    return Ok((
                        ParticipantCheck {
                            id,
                            evaluated: false,
                            eq1: None,
                            mg1_signature: false,
                            mg2_signature: None,
                        },
                        None,
                    ));
                };
                check_vector(task, mg1, "mg1").map_err(fail)?;
                check_vector(task, server_mg1, "server mg1").map_err(fail)?;
                if !verify(pk, &mg1.to_bytes(), mg1_signature) {
                    return Err(fail(AuditFailure::new(
                        Stage::Signature,
                        "mg1 signature does not verify",
                    )));
                }
                if let Some(s) = share {
                    check_vector(task, &s.mg2, "mg2").map_err(fail)?;
                    if !verify(pk, &s.mg2.to_bytes(), &s.signature) {
                        return Err(fail(AuditFailure::new(
                            Stage::Signature,
                            "mg2 signature does not verify",
                        )));
                    }
                }
                let masked = dot(mg1, server_mg1).map_err(|e| {
                    fail(AuditFailure::new(
                        Stage::Detection,
                        format!("masked inner product: {e}"),
                    ))
                })?;
                let deflated = rt.value.clone() * BigRational::from_integer(BigInt::from(masked));
                Ok((
                    ParticipantCheck {
                        id,
                        evaluated: true,
                        eq1: Some(sign_indicator(masked)),
                        mg1_signature: true,
                        mg2_signature: share.as_ref().map(|_| true),
                    },
                    Some(deflated),
                ))
            },
        )
        .collect::<Check<Vec<_>>>()?;

    let mut checks = Vec::with_capacity(rows.len());
    let mut deflated = Vec::new();
    for (check, value) in rows {
        if let Some(v) = value {
            deflated.push((check.id, v));
        }
        checks.push(check);
    }
    let benign = select_benign(task.mode, task.clip, &deflated);

    let shared: Vec<u32> = record
        .entries
        .iter()
        .filter(|e| matches!(&e.body, EntryBody::Evaluated { share: Some(_), .. }))
        .map(|e| e.id)
        .collect();
    if shared != benign {
        let id = first_difference(&shared, &benign);
        return Err(AuditFailure::new(
            Stage::Detection,
            format!(
                "published aggregation shares {shared:?} differ from derived benign set {benign:?}"
            ),
        )
        .round(r)
        .participant(id));
    }
    if record.benign != benign {
        let id = first_difference(&record.benign, &benign);
        return Err(AuditFailure::new(
            Stage::Detection,
            format!(
                "published benign set {:?} differs from derived {benign:?}",
                record.benign
            ),
        )
        .round(r)
        .participant(id));
    }
    Ok(Detection {
        benign,
        checks,
        deflated,
    })
}

fn first_difference(a: &[u32], b: &[u32]) -> u32 {
    let mut all: Vec<u32> = a.iter().chain(b).copied().collect();
    all.sort_unstable();
    all.into_iter()
        .find(|id| a.contains(id) != b.contains(id))
        .unwrap_or(0)
}

/// `mag_r = floor((mg^S_{r,2} + sum_{j in P~_r} mg2_j) / (|P~_r| + 1))`,
/// which for an honest record equals `m_r + ag_r`.
pub fn audit_aggregate(record: &RoundRecord, benign: &[u32]) -> Check<FpVector> {
    let r = record.round;
    let mut sum = record.server_mg2.clone();
    for id in benign {
        let share = match record.entry(*id).map(|e| &e.body) {
            Some(EntryBody::Evaluated { share: Some(s), .. }) => s,
            _ => {
                return Err(
                    AuditFailure::new(Stage::Aggregation, "missing aggregation share")
                        .round(r)
                        .participant(*id),
                )
            }
        };
        sum.add_assign(&share.mg2).map_err(|e| {
            AuditFailure::new(Stage::Aggregation, e.to_string())
                .round(r)
                .participant(*id)
        })?;
    }
    floor_div(&sum, benign.len() as u64 + 1)
        .map_err(|e| AuditFailure::new(Stage::Aggregation, e.to_string()).round(r))
}

/// Evaluated participants by deflated inner product, descending, ties by
/// ascending id. Deflation makes the values comparable across participants
/// because every `rt_i * l_i` is the same constant.
pub fn audit_clipping(deflated: &[(u32, BigRational)]) -> Vec<u32> {
    let mut order: Vec<&(u32, BigRational)> = deflated.iter().collect();
    order.sort_by(|(ia, a), (ib, b)| match b.cmp(a) {
        Ordering::Equal => ia.cmp(ib),
        o => o,
    });
    order.into_iter().map(|(id, _)| *id).collect()
}

/// Running `mw + sum_r floor(eta * mag_r)`.
pub struct Trace {
    eta: crate::fixedpoint::Dyadic,
    sum: FpVector,
}

impl Trace {
    pub fn new(task: &TaskParams) -> Check<Self> {
        let sum = FpVector::zeros(task.dim(), task.scale)
            .map_err(|e| AuditFailure::new(Stage::Structure, e.to_string()))?;
        Ok(Self { eta: task.eta, sum })
    }

    pub fn add_round(&mut self, round: u32, mag: &FpVector) -> Check<()> {
        let step = self
            .eta
            .mul_floor(mag)
            .map_err(|e| AuditFailure::new(Stage::Recovery, e.to_string()).round(round))?;
        self.sum
            .add_assign(&step)
            .map_err(|e| AuditFailure::new(Stage::Recovery, e.to_string()).round(round))
    }

    /// Recovers `w~_0` and checks the server's signature over it.
    pub fn finish(self, genesis: &Genesis, masked_model: &FpVector) -> Check<TraceReport> {
        check_vector(&genesis.task, masked_model, "masked model")?;
        let w0 = masked_model
            .checked_add(&self.sum)
            .map_err(|e| AuditFailure::new(Stage::Recovery, e.to_string()))?;
        let bytes = w0.to_bytes();
        let report = TraceReport {
            recovered_model_digest: hash(&bytes).to_hex(),
            signature_valid: genesis.verifies_initial_model(&w0),
        };
        if !report.signature_valid {
            return Err(AuditFailure::new(
                Stage::InitialModelSignature,
                "recovered initial model does not match the signed one",
            ));
        }
        Ok(report)
    }
}

/// `w~_0 = mw + sum_r floor(eta * mag_r)`, accepted iff the genesis
/// signature verifies over it.
pub fn audit_trace<'a>(
    genesis: &Genesis,
    masked_model: &FpVector,
    mags: impl IntoIterator<Item = &'a FpVector>,
) -> Check<TraceReport> {
    let mut trace = Trace::new(&genesis.task)?;
    for (i, mag) in mags.into_iter().enumerate() {
        trace.add_round(i as u32 + 1, mag)?;
    }
    trace.finish(genesis, masked_model)
}

/// Audits one round; returns its report and `mag_r`.
pub fn audit_round(
    genesis: &Genesis,
    rt: &[RtValue],
    record: &RoundRecord,
) -> Check<(RoundReport, FpVector)> {
    let detection = audit_detection(genesis, rt, record)?;
    let mag = audit_aggregate(record, &detection.benign)?;
    Ok((
        RoundReport {
            round: record.round,
            ranking: audit_clipping(&detection.deflated),
            derived_benign: detection.benign,
            published_benign: record.benign.clone(),
            participants: detection.checks,
        },
        mag,
    ))
}

/// Audits a training record against its genesis block, streaming rounds.
pub fn audit_record<R: Read>(genesis: &Genesis, record: R) -> AuditReport {
    let mut report = AuditReport {
        verdict: Verdict::Accept,
        first_failure: None,
        chain_blocks: 0,
        record_height: None,
        task_digest: Some(genesis.task_digest().to_hex()),
        record_digest: None,
        rounds: Vec::new(),
        trace: None,
    };
    if let Err(f) = audit_record_into(genesis, record, &mut report) {
        report.verdict = Verdict::Reject;
        report.first_failure = Some(f);
    }
    report
}

fn audit_record_into<R: Read>(genesis: &Genesis, record: R, report: &mut AuditReport) -> Check<()> {
    let parse = |e: crate::protocol::ProtocolError| AuditFailure::new(Stage::Parse, e.to_string());
    let mut reader = RecordReader::new(record).map_err(parse)?;
    if reader.task() != &genesis.task {
        return Err(AuditFailure::new(
            Stage::Structure,
            "record task differs from the published task",
        ));
    }
    let rt = reader.rt().to_vec();
    check_rt(&genesis.task, &rt)?;
    let mut trace = Trace::new(&genesis.task)?;
    let mut expected = 1u32;
    while let Some(round) = reader.next_round().map_err(|e| parse(e).round(expected))? {
        if round.round != expected {
            return Err(AuditFailure::new(
                Stage::Structure,
                format!("round stored as {}", round.round),
            )
            .round(expected));
        }
        let (round_report, mag) = audit_round(genesis, &rt, &round)?;
        trace.add_round(expected, &mag)?;
        report.rounds.push(round_report);
        expected += 1;
    }
    let masked = reader
        .masked_model()
        .expect("set once rounds are exhausted");
    report.trace = Some(trace.finish(genesis, masked)?);
    Ok(())
}

/// Verifies the chain, then audits the latest record against the genesis
/// block. Never panics on malformed input; every problem becomes a
/// rejection.
pub fn full_audit(ledger_path: impl AsRef<Path>) -> AuditReport {
    let path = ledger_path.as_ref();
    let chain = match verify_chain(path) {
        Ok(v) => v,
        Err(e) => return AuditReport::rejected(AuditFailure::new(Stage::Chain, e.to_string())),
    };
    let blocks = match chain {
        ChainVerdict::Accept { blocks } => blocks,
        ChainVerdict::Reject { height, reason } => {
            return AuditReport::rejected(AuditFailure::new(
                Stage::Chain,
                format!("chain rejected at height {height}: {reason}"),
            ))
        }
    };
    let mut report = AuditReport::rejected(AuditFailure::new(Stage::Chain, ""));
    report.chain_blocks = blocks;
    let fail = |mut report: AuditReport, f: AuditFailure| {
        report.first_failure = Some(f);
        report
    };
    let ledger = match Ledger::open(path, Clock::default()) {
        Ok(l) => l,
        Err(e) => return fail(report, AuditFailure::new(Stage::Chain, e.to_string())),
    };
    if blocks < 2 {
        return fail(
            report,
            AuditFailure::new(Stage::Structure, "ledger holds no training record"),
        );
    }
    let genesis = match ledger
        .get_record(0)
        .map_err(|e| e.to_string())
        .and_then(|b| Genesis::from_bytes(&b).map_err(|e| e.to_string()))
    {
        Ok(g) => g,
        Err(e) => {
            return fail(
                report,
                AuditFailure::new(Stage::Parse, format!("genesis: {e}")),
            )
        }
    };
    let height = blocks - 1;
    let header = *ledger.header(height).expect("height within chain");
    let reader = match ledger.payload_reader(height) {
        Ok(r) => r,
        Err(e) => return fail(report, AuditFailure::new(Stage::Chain, e.to_string())),
    };
    let mut out = audit_record(&genesis, reader);
    out.chain_blocks = blocks;
    out.record_height = Some(height);
    out.record_digest = Some(header.payload_digest.to_hex());
    out
}

//! The training record (TRCD) and its binary container.
//!
//! Layout: the 8-byte magic `AFLTRCD1`, then tagged sections, each
//! `tag: u8 | len: u64 LE | body`:
//!
//! | tag | section | body |
//! |-----|---------|------|
//! | 1 | task | canonical task encoding |
//! | 2 | deflation values | `count: u32`, then per participant `id: u32`, numerator, denominator |
//! | 3 | round (repeated `rounds` times) | see [`RoundRecord`] |
//! | 4 | masked model | one vector |
//!
//! Vectors use the canonical fixed-point encoding; rationals are two signed
//! big-endian two's-complement integers, each prefixed by a `u32` LE byte
//! length. The deflation values precede the rounds so a reader can rank
//! inner products while streaming.

use std::io::{self, Read, Write};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

use super::task::TaskParams;
use super::wire::{put_big_int, Cursor};
use super::{ProtocolError, Result};
use crate::crypto::Signature;
use crate::fixedpoint::FpVector;

pub const RECORD_MAGIC: &[u8; 8] = b"AFLTRCD1";

const TAG_TASK: u8 = 1;
const TAG_RT: u8 = 2;
const TAG_ROUND: u8 = 3;
const TAG_MODEL: u8 = 4;

const ENTRY_REJECTED: u8 = 0;
const ENTRY_DETECTION_ONLY: u8 = 1;
const ENTRY_WITH_SHARE: u8 = 2;

/// Public deflation value `rt_i` of one participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtValue {
    pub id: u32,
    pub value: BigRational,
}

/// A participant's additively masked gradient and its signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationShare {
    pub mg2: FpVector,
    pub signature: Signature,
}

/// What the record holds about one participant in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryBody {
    /// The server refused the submission (bad signature or a gradient
    /// outside the task's bound); nothing about it is published.
    Rejected,
    Evaluated {
        /// Participant gradient under its multiplicative mask.
        mg1: FpVector,
        mg1_signature: Signature,
        /// Server gradient under the paired mask.
        server_mg1: FpVector,
        /// Present only for participants in the benign set.
        share: Option<AggregationShare>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantEntry {
    pub id: u32,
    pub body: EntryBody,
}

/// `trcd_r`. Body layout: `round: u32 | entries: u32 | entry* |
/// server_mg2 | benign: u32 | id: u32*`, where an entry is `id: u32 | kind:
/// u8` followed, for kinds 1 and 2, by `mg1 | sig | server_mg1` and, for
/// kind 2, by `mg2 | sig`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: u32,
    pub entries: Vec<ParticipantEntry>,
    pub server_mg2: FpVector,
    /// The server's claimed benign set, ascending. Auditors re-derive it.
    pub benign: Vec<u32>,
}

impl RoundRecord {
    pub fn entry(&self, id: u32) -> Option<&ParticipantEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entry_mut(&mut self, id: u32) -> Option<&mut ParticipantEntry> {
        self.entries.iter_mut().find(|e| e.id == id)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            match &e.body {
                EntryBody::Rejected => out.push(ENTRY_REJECTED),
                EntryBody::Evaluated {
                    mg1,
                    mg1_signature,
                    server_mg1,
                    share,
                } => {
                    out.push(if share.is_some() {
                        ENTRY_WITH_SHARE
                    } else {
                        ENTRY_DETECTION_ONLY
                    });
                    mg1.encode_into(&mut out);
                    out.extend_from_slice(&mg1_signature.0);
                    server_mg1.encode_into(&mut out);
                    if let Some(s) = share {
                        s.mg2.encode_into(&mut out);
                        out.extend_from_slice(&s.signature.0);
                    }
                }
            }
        }
        self.server_mg2.encode_into(&mut out);
        out.extend_from_slice(&(self.benign.len() as u32).to_le_bytes());
        for id in &self.benign {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let round = cur.u32()?;
        let count = cur.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let id = cur.u32()?;
            let body = match cur.u8()? {
                ENTRY_REJECTED => EntryBody::Rejected,
                kind @ (ENTRY_DETECTION_ONLY | ENTRY_WITH_SHARE) => {
                    let mg1 = cur.vector()?;
                    let mg1_signature = cur.signature()?;
                    let server_mg1 = cur.vector()?;
                    let share = if kind == ENTRY_WITH_SHARE {
                        Some(AggregationShare {
                            mg2: cur.vector()?,
                            signature: cur.signature()?,
                        })
                    } else {
                        None
                    };
                    EntryBody::Evaluated {
                        mg1,
                        mg1_signature,
                        server_mg1,
                        share,
                    }
                }
                k => return Err(ProtocolError::Decode(format!("unknown entry kind {k}"))),
            };
            entries.push(ParticipantEntry { id, body });
        }
        let server_mg2 = cur.vector()?;
        let benign_count = cur.u32()?;
        let benign = (0..benign_count)
            .map(|_| cur.u32())
            .collect::<Result<Vec<_>>>()?;
        cur.finish()?;
        Ok(Self {
            round,
            entries,
            server_mg2,
            benign,
        })
    }
}

fn encode_rt(rt: &[RtValue]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(rt.len() as u32).to_le_bytes());
    for v in rt {
        out.extend_from_slice(&v.id.to_le_bytes());
        put_big_int(&mut out, v.value.numer());
        put_big_int(&mut out, v.value.denom());
    }
    out
}

fn decode_rt(bytes: &[u8]) -> Result<Vec<RtValue>> {
    let mut cur = Cursor::new(bytes);
    let count = cur.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = cur.u32()?;
        let numer = cur.big_int()?;
        let denom = cur.big_int()?;
        if denom.is_zero() {
            return Err(ProtocolError::Decode(format!(
                "zero denominator for participant {id}"
            )));
        }
        let value = BigRational::new(numer.clone(), denom.clone());
        // Only the reduced, positive-denominator form is canonical.
        if value.numer() != &numer || value.denom() != &denom || denom.is_negative() {
            return Err(ProtocolError::Decode(format!(
                "non-canonical rational for participant {id}"
            )));
        }
        out.push(RtValue { id, value });
    }
    cur.finish()?;
    Ok(out)
}

fn io_err(e: io::Error) -> ProtocolError {
    ProtocolError::Io(e.to_string())
}

fn write_section<W: Write>(w: &mut W, tag: u8, body: &[u8]) -> Result<()> {
    w.write_all(&[tag]).map_err(io_err)?;
    w.write_all(&(body.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(body).map_err(io_err)
}

/// Streams a record out section by section.
pub struct RecordWriter<W: Write> {
    inner: W,
    rounds: u32,
    written: u32,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W, task: &TaskParams, rt: &[RtValue]) -> Result<Self> {
        inner.write_all(RECORD_MAGIC).map_err(io_err)?;
        write_section(&mut inner, TAG_TASK, &task.to_bytes())?;
        write_section(&mut inner, TAG_RT, &encode_rt(rt))?;
        Ok(Self {
            inner,
            rounds: task.rounds,
            written: 0,
        })
    }

    pub fn write_round(&mut self, round: &RoundRecord) -> Result<()> {
        if self.written == self.rounds {
            return Err(ProtocolError::Config(
                "more rounds than the task declares".into(),
            ));
        }
        write_section(&mut self.inner, TAG_ROUND, &round.encode())?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self, masked_model: &FpVector) -> Result<W> {
        if self.written != self.rounds {
            return Err(ProtocolError::Config(format!(
                "record has {} of {} rounds",
                self.written, self.rounds
            )));
        }
        write_section(&mut self.inner, TAG_MODEL, &masked_model.to_bytes())?;
        self.inner.flush().map_err(io_err)?;
        Ok(self.inner)
    }
}

/// Parses a record one round at a time.
pub struct RecordReader<R: Read> {
    inner: R,
    task: TaskParams,
    rt: Vec<RtValue>,
    rounds_read: u32,
    masked_model: Option<FpVector>,
}

fn read_section<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>> {
    let mut tag = [0u8; 1];
    if r.read(&mut tag).map_err(io_err)? == 0 {
        return Ok(None);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| ProtocolError::Decode("truncated section header".into()))?;
    let len = u64::from_le_bytes(len);
    let mut body = Vec::new();
    r.by_ref()
        .take(len)
        .read_to_end(&mut body)
        .map_err(io_err)?;
    if body.len() as u64 != len {
        return Err(ProtocolError::Decode(format!(
            "section declares {len} bytes, {} present",
            body.len()
        )));
    }
    Ok(Some((tag[0], body)))
}

fn expect_section<R: Read>(r: &mut R, tag: u8, what: &str) -> Result<Vec<u8>> {
    match read_section(r)? {
        Some((t, body)) if t == tag => Ok(body),
        Some((t, _)) => Err(ProtocolError::Decode(format!(
            "expected {what} section, found tag {t}"
        ))),
        None => Err(ProtocolError::Decode(format!("missing {what} section"))),
    }
}

impl<R: Read> RecordReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner
            .read_exact(&mut magic)
            .map_err(|_| ProtocolError::Decode("truncated record magic".into()))?;
        if &magic != RECORD_MAGIC {
            return Err(ProtocolError::Decode("not a training record".into()));
        }
        let task = TaskParams::from_bytes(&expect_section(&mut inner, TAG_TASK, "task")?)?;
        let rt = decode_rt(&expect_section(&mut inner, TAG_RT, "deflation")?)?;
        Ok(Self {
            inner,
            task,
            rt,
            rounds_read: 0,
            masked_model: None,
        })
    }

    pub fn task(&self) -> &TaskParams {
        &self.task
    }

    pub fn rt(&self) -> &[RtValue] {
        &self.rt
    }

    /// Next round, or `None` once the masked model has been read. Fails if
    /// the number of rounds differs from the task's or data trails the
    /// model.
    pub fn next_round(&mut self) -> Result<Option<RoundRecord>> {
        if self.masked_model.is_some() {
            return Ok(None);
        }
        if self.rounds_read == self.task.rounds {
            let body = expect_section(&mut self.inner, TAG_MODEL, "masked model")?;
            let model = FpVector::from_bytes(&body)
                .map_err(|e| ProtocolError::Decode(format!("masked model: {e}")))?;
            if read_section(&mut self.inner)?.is_some() {
                return Err(ProtocolError::Decode("data after masked model".into()));
            }
            self.masked_model = Some(model);
            return Ok(None);
        }
        let body = expect_section(&mut self.inner, TAG_ROUND, "round")?;
        self.rounds_read += 1;
        Ok(Some(RoundRecord::decode(&body)?))
    }

    /// Available after [`next_round`](Self::next_round) has returned `None`.
    pub fn masked_model(&self) -> Option<&FpVector> {
        self.masked_model.as_ref()
    }
}

/// `TRCD`: all rounds, the masked final model and the deflation values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingRecord {
    pub task: TaskParams,
    pub rt: Vec<RtValue>,
    pub rounds: Vec<RoundRecord>,
    pub masked_model: FpVector,
}

impl TrainingRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        // Round counts are not checked here so tampered records can be
        // re-encoded.
        let mut out = Vec::new();
        out.extend_from_slice(RECORD_MAGIC);
        let push = |out: &mut Vec<u8>, tag: u8, body: &[u8]| {
            out.push(tag);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(body);
        };
        push(&mut out, TAG_TASK, &self.task.to_bytes());
        push(&mut out, TAG_RT, &encode_rt(&self.rt));
        for r in &self.rounds {
            push(&mut out, TAG_ROUND, &r.encode());
        }
        push(&mut out, TAG_MODEL, &self.masked_model.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = RecordReader::new(bytes)?;
        let mut rounds = Vec::new();
        while let Some(r) = reader.next_round()? {
            rounds.push(r);
        }
        Ok(Self {
            task: reader.task.clone(),
            rt: reader.rt.clone(),
            rounds,
            masked_model: reader.masked_model.clone().expect("set after last round"),
        })
    }
}

/// `1 / l` as an exact rational.
pub fn deflation_value(id: u32, l: i64) -> RtValue {
    RtValue {
        id,
        value: BigRational::new(BigInt::from(1), BigInt::from(l)),
    }
}

//! The central server's round loop.

use std::io::Write;

use rayon::prelude::*;

use super::aggregation::{robust_aggregate, Aggregate};
use super::participant::{mask_mg1, mask_mg2};
use super::record::{
    deflation_value, AggregationShare, EntryBody, ParticipantEntry, RecordWriter, RoundRecord,
};
use super::secrets::{PairSecret, ServerSecrets};
use super::task::TaskParams;
use super::{ProtocolError, Result, Submission};
use crate::crypto::verify;
use crate::fixedpoint::{floor_div, hadamard, FpVector};

/// Deliberate server misbehaviour, used to check that audits catch it.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerFault {
    /// Leave a benign participant's gradient out of the aggregate while
    /// still publishing it as benign.
    SkipInAggregation { round: u32, participant: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: u32,
    /// `P_r`.
    pub benign: Vec<u32>,
    /// Participants whose submission failed verification or the gradient
    /// bound.
    pub rejected: Vec<u32>,
    /// `ag_r`.
    pub aggregate: FpVector,
    /// `w_r`.
    pub model: FpVector,
}

/// Checked, verified submission from one participant.
struct Verified<'a> {
    pair: &'a PairSecret,
    submission: Option<&'a Submission>,
    mg1: Option<FpVector>,
    mg2: Option<FpVector>,
}

fn in_bound(task: &TaskParams, g: &FpVector) -> bool {
    g.dim() == task.dim()
        && g.scale() == task.scale
        && g.max_abs() < task.gradient_raw_bound() as u64
}

fn verify_submission<'a>(
    task: &TaskParams,
    pair: &'a PairSecret,
    submission: Option<&'a Submission>,
    round: u32,
) -> Result<Verified<'a>> {
    let rejected = Verified {
        pair,
        submission,
        mg1: None,
        mg2: None,
    };
    let Some(s) = submission else {
        return Ok(rejected);
    };
    if s.round != round || !in_bound(task, &s.gradient) {
        return Ok(rejected);
    }
    let dim = task.dim();
    let mg1 = mask_mg1(&pair.participant_mask(round, dim)?, &s.gradient)?;
    let mg2 = mask_mg2(&pair.zero_share(round, dim, task.scale)?, &s.gradient)?;
    if !verify(&pair.public_key, &mg1.to_bytes(), &s.mg1_signature)
        || !verify(&pair.public_key, &mg2.to_bytes(), &s.mg2_signature)
    {
        return Ok(rejected);
    }
    Ok(Verified {
        pair,
        submission,
        mg1: Some(mg1),
        mg2: Some(mg2),
    })
}

pub struct Server<W: Write> {
    task: TaskParams,
    secrets: ServerSecrets,
    model: FpVector,
    round: u32,
    writer: RecordWriter<W>,
    faults: Vec<ServerFault>,
}

impl<W: Write> Server<W> {
    /// Starts a run from `w0`, writing the record header into `sink`.
    pub fn new(task: TaskParams, secrets: ServerSecrets, w0: FpVector, sink: W) -> Result<Self> {
        task.validate()?;
        if secrets.pairs.len() != task.participants as usize {
            return Err(ProtocolError::Config(
                "secret roster does not match the task".into(),
            ));
        }
        if w0.dim() != task.dim() || w0.scale() != task.scale {
            return Err(ProtocolError::Config(
                "initial model does not match the task".into(),
            ));
        }
        let rt: Vec<_> = secrets
            .pairs
            .iter()
            .map(|p| deflation_value(p.id, p.l))
            .collect();
        let writer = RecordWriter::new(sink, &task, &rt)?;
        Ok(Self {
            task,
            secrets,
            model: w0,
            round: 0,
            writer,
            faults: Vec::new(),
        })
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: ServerFault) {
        self.faults.push(fault);
    }

    pub fn task(&self) -> &TaskParams {
        &self.task
    }

    /// `w_{r-1}` before a round, `w_r` after it.
    pub fn model(&self) -> &FpVector {
        &self.model
    }

    pub fn rounds_done(&self) -> u32 {
        self.round
    }

    fn in_bound(&self, g: &FpVector) -> bool {
        in_bound(&self.task, g)
    }

    /// Runs one round on the server gradient `g_S` and every participant's
    /// submission, appends `trcd_r` to the record and updates the model.
    ///
    /// A participant whose signatures do not verify against the recomputed
    /// masked gradients, or whose gradient exceeds the task bound, is
    /// treated as malicious for the round.
    pub fn process_round(
        &mut self,
        server_gradient: &FpVector,
        submissions: &[Submission],
    ) -> Result<RoundOutcome> {
        if self.round == self.task.rounds {
            return Err(ProtocolError::TrainingComplete(self.task.rounds));
        }
        let round = self.round + 1;
        if !self.in_bound(server_gradient) {
            return Err(ProtocolError::Config(format!(
                "server gradient in round {round} is outside the task bound"
            )));
        }
        let mut by_id: Vec<Option<&Submission>> = vec![None; self.task.participants as usize];
        for s in submissions {
            let slot =
                s.id.checked_sub(1)
                    .and_then(|i| by_id.get_mut(i as usize))
                    .ok_or(ProtocolError::UnknownParticipant(s.id))?;
            if slot.replace(s).is_some() {
                return Err(ProtocolError::DuplicateSubmission(s.id));
            }
        }
        if let Some(missing) = by_id.iter().position(Option::is_none) {
            return Err(ProtocolError::MissingSubmission(missing as u32 + 1));
        }

        let verified = self
            .secrets
            .pairs
            .par_iter()
            .zip(by_id.par_iter())
            .map(|(pair, s)| verify_submission(&self.task, pair, *s, round))
            .collect::<Result<Vec<_>>>()?;

        let accepted: Vec<(u32, &FpVector)> = verified
            .iter()
            .filter(|v| v.mg1.is_some())
            .map(|v| (v.pair.id, &v.submission.expect("verified").gradient))
            .collect();
        let Aggregate {
            mut aggregate,
            benign,
        } = robust_aggregate(server_gradient, &accepted, self.task.mode, self.task.clip)?;

        for fault in &self.faults {
            let ServerFault::SkipInAggregation {
                round: r,
                participant,
            } = *fault;
            if r == round && benign.binary_search(&participant).is_ok() {
                let mut sum = server_gradient.clone();
                for (id, g) in &accepted {
                    if *id != participant && benign.binary_search(id).is_ok() {
                        sum.add_assign(g)?;
                    }
                }
                aggregate = floor_div(&sum, benign.len() as u64 + 1)?;
            }
        }

        let dim = self.task.dim();
        let scale = self.task.scale;
        let entries = verified
            .into_par_iter()
            .map(|v| {
                let id = v.pair.id;
                let (Some(mg1), Some(mg2), Some(s)) = (v.mg1, v.mg2, v.submission) else {
                    return Ok(ParticipantEntry {
                        id,
                        body: EntryBody::Rejected,
                    });
                };
                let server_mg1 = hadamard(server_gradient, &v.pair.server_mask(round, dim)?)?;
                let share = benign
                    .binary_search(&id)
                    .is_ok()
                    .then_some(AggregationShare {
                        mg2,
                        signature: s.mg2_signature,
                    });
                Ok(ParticipantEntry {
                    id,
                    body: EntryBody::Evaluated {
                        mg1,
                        mg1_signature: s.mg1_signature,
                        server_mg1,
                        share,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // zv^S_r = -sum of benign zero shares; mg^S_{r,2} = (|P_r|+1) m_r + zv^S_r + g_S.
        let mut server_mg2 = self
            .secrets
            .model_mask_share(round)
            .ok_or_else(|| ProtocolError::Internal(format!("no model mask for round {round}")))?
            .checked_mul_int(benign.len() as i64 + 1)?;
        for id in &benign {
            let pair = self.secrets.pair(*id).expect("benign ids are registered");
            server_mg2 = server_mg2.checked_sub(&pair.zero_share(round, dim, scale)?)?;
        }
        server_mg2.add_assign(server_gradient)?;

        let rejected: Vec<u32> = entries
            .iter()
            .filter(|e| matches!(e.body, EntryBody::Rejected))
            .map(|e| e.id)
            .collect();
        self.writer.write_round(&RoundRecord {
            round,
            entries,
            server_mg2,
            benign: benign.clone(),
        })?;

        self.model = self
            .model
            .checked_sub(&self.task.eta.mul_floor(&aggregate)?)?;
        self.round = round;
        Ok(RoundOutcome {
            round,
            benign,
            rejected,
            aggregate,
            model: self.model.clone(),
        })
    }

    /// Publishes `mw = w_R - rv_w` and closes the record. Returns the sink,
    /// the final model and `mw`.
    pub fn finalize(self) -> Result<(W, FpVector, FpVector)> {
        if self.round != self.task.rounds {
            return Err(ProtocolError::Config(format!(
                "finalize after {} of {} rounds",
                self.round, self.task.rounds
            )));
        }
        let masked = self.model.checked_sub(&self.secrets.model_mask.total)?;
        if masked.checked_add(&self.secrets.model_mask.total)? != self.model {
            return Err(ProtocolError::Internal(
                "masked model does not unmask".into(),
            ));
        }
        let sink = self.writer.finish(&masked)?;
        Ok((sink, self.model, masked))
    }
}

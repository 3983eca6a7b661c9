//! Detection and robust aggregation.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;

use super::task::{AggregationMode, ClipRule};
use super::Result;
use crate::fixedpoint::{dot, floor_div, sign_indicator, FpVector};

/// `1` iff the inner product of the two gradients is strictly positive.
/// Normalising by the norms first could not change the sign.
pub fn detect(server: &FpVector, local: &FpVector) -> Result<u8> {
    Ok(sign_indicator(dot(server, local)?))
}

/// The benign set given each candidate's inner product with the server
/// gradient, on any common positive scale.
///
/// Robust mode keeps strictly positive values, plain mode keeps all; the
/// clip rule then drops outliers among the kept ones. Returns ascending ids.
pub fn select_benign(
    mode: AggregationMode,
    clip: Option<ClipRule>,
    values: &[(u32, BigRational)],
) -> Vec<u32> {
    let kept: Vec<(u32, BigRational)> = values
        .iter()
        .filter(|(_, v)| mode == AggregationMode::Plain || v.is_positive())
        .cloned()
        .collect();
    let clipped = clip.map(|c| c.clipped(&kept)).unwrap_or_default();
    let mut ids: Vec<u32> = kept
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| clipped.binary_search(id).is_err())
        .collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregate {
    /// `ag_r`.
    pub aggregate: FpVector,
    /// `P_r`, ascending.
    pub benign: Vec<u32>,
}

/// `ag_r = floor((g_S + sum_{j in P_r} g_j) / (|P_r| + 1))`.
pub fn robust_aggregate(
    server: &FpVector,
    locals: &[(u32, &FpVector)],
    mode: AggregationMode,
    clip: Option<ClipRule>,
) -> Result<Aggregate> {
    let values = locals
        .iter()
        .map(|(id, g)| {
            Ok((
                *id,
                BigRational::from_integer(BigInt::from(dot(server, g)?)),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let benign = select_benign(mode, clip, &values);
    let mut sum = server.clone();
    for (id, g) in locals {
        if benign.binary_search(id).is_ok() {
            sum.add_assign(g)?;
        }
    }
    Ok(Aggregate {
        aggregate: floor_div(&sum, benign.len() as u64 + 1)?,
        benign,
    })
}

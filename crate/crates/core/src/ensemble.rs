//! Weighted averaging of member probability triples and validation-set
//! weight calibration.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::LabelVector;
use crate::metrics::{self, MetricsError, ProbabilityTriple, NUM_CLASSES};

/// Tolerance on `Σ w = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

pub const DEFAULT_STEP: f64 = 0.05;

/// Rounds of coordinate ascent for more than three members.
const MAX_ASCENT_ROUNDS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no members")]
    NoMembers,
    #[error("{weights} weights for {members} members")]
    WeightCount { weights: usize, members: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(WeightViolation),
    #[error("member `{member}` is misaligned: {detail}")]
    Misaligned { member: String, detail: String },
    #[error("grid step must lie in (0, 0.5], got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("prediction file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum WeightViolation {
    #[error("no weights")]
    Empty,
    #[error("weight {index} is not finite")]
    NonFinite { index: usize },
    #[error("weight {index} is negative ({value})")]
    Negative { index: usize, value: f64 },
    #[error("weights sum to {sum}")]
    Sum { sum: f64 },
}

/// One weight per member, in member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w: Vec<f64>,
}

impl EnsembleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, WeightViolation> {
        let weights = Self { w };
        validate_weights(&weights)?;
        Ok(weights)
    }
}

/// Checks nonnegativity and `|Σ w − 1| ≤ 1e-9`.
pub fn validate_weights(weights: &EnsembleWeights) -> Result<(), WeightViolation> {
    if weights.w.is_empty() {
        return Err(WeightViolation::Empty);
    }
    for (index, &value) in weights.w.iter().enumerate() {
        if !value.is_finite() {
            return Err(WeightViolation::NonFinite { index });
        }
        if value < 0.0 {
            return Err(WeightViolation::Negative { index, value });
        }
    }
    let sum: f64 = weights.w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(WeightViolation::Sum { sum });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberPredictions {
    pub member_id: String,
    pub ids: Vec<String>,
    pub triples: Vec<ProbabilityTriple>,
}

fn check_members(members: &[MemberPredictions]) -> Result<(), EnsembleError> {
    let first = members.first().ok_or(EnsembleError::NoMembers)?;
    for m in members {
        if m.ids.len() != m.triples.len() {
            return Err(EnsembleError::Misaligned {
                member: m.member_id.clone(),
                detail: format!("{} ids but {} triples", m.ids.len(), m.triples.len()),
            });
        }
        if m.ids.len() != first.ids.len() {
            return Err(EnsembleError::Misaligned {
                member: m.member_id.clone(),
                detail: format!("{} rows, expected {}", m.ids.len(), first.ids.len()),
            });
        }
        if let Some(row) = m.ids.iter().zip(&first.ids).position(|(a, b)| a != b) {
            return Err(EnsembleError::Misaligned {
                member: m.member_id.clone(),
                detail: format!(
                    "row {} has id `{}`, expected `{}`",
                    row + 1,
                    m.ids[row],
                    first.ids[row]
                ),
            });
        }
    }
    Ok(())
}

/// Componentwise `Σ_i w_i · P_i`.
///
/// Products are summed in ascending order, so jointly permuting members and
/// weights gives bit-identical output. A component on which every member
/// agrees exactly is passed through unchanged.
pub fn ensemble_predict(
    members: &[MemberPredictions],
    weights: &EnsembleWeights,
) -> Result<Vec<ProbabilityTriple>, EnsembleError> {
    check_members(members)?;
    if weights.w.len() != members.len() {
        return Err(EnsembleError::WeightCount {
            weights: weights.w.len(),
            members: members.len(),
        });
    }
    validate_weights(weights).map_err(EnsembleError::InvalidWeights)?;
    Ok(blend(members, &weights.w))
}

fn blend(members: &[MemberPredictions], w: &[f64]) -> Vec<ProbabilityTriple> {
    let n = members[0].triples.len();
    let mut terms = vec![0.0; members.len()];
    (0..n)
        .map(|row| {
            let mut out = [0.0; NUM_CLASSES];
            for (j, slot) in out.iter_mut().enumerate() {
                let first = members[0].triples[row].0[j];
                if members
                    .iter()
                    .all(|m| m.triples[row].0[j].to_bits() == first.to_bits())
                {
                    *slot = first;
                    continue;
                }
                for (t, (m, &wi)) in terms.iter_mut().zip(members.iter().zip(w)) {
                    *t = wi * m.triples[row].0[j];
                }
                terms.sort_by(f64::total_cmp);
                *slot = terms.iter().sum();
            }
            ProbabilityTriple(out)
        })
        .collect()
}

/// Grid levels in `[0, 1]`: multiples of `step`, with 1 always included.
/// When `1/step` is an integer `k`, levels are exactly `i/k`.
fn levels(step: f64) -> Vec<f64> {
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() <= 1e-9 {
        let k = k as usize;
        return (0..=k).map(|i| i as f64 / k as f64).collect();
    }
    let mut out: Vec<f64> = (0..)
        .map(|i| i as f64 * step)
        .take_while(|&v| v < 1.0)
        .collect();
    out.push(1.0);
    out
}

/// Candidate weight vectors for two or three members, corners included.
fn simplex_grid(members: usize, step: f64) -> Vec<Vec<f64>> {
    let lv = levels(step);
    let k = lv.len() - 1;
    let exact = (1.0 / step).round() as usize == k && ((k as f64) * step - 1.0).abs() <= 1e-9;
    // With an exact grid the remaining weight is itself a grid level.
    let rest = |used: usize, sum: f64| {
        if exact {
            (k - used) as f64 / k as f64
        } else {
            (1.0 - sum).max(0.0)
        }
    };
    let mut out = Vec::new();
    match members {
        2 => {
            for (i, &a) in lv.iter().enumerate() {
                out.push(vec![a, rest(i, a)]);
            }
        }
        3 => {
            for (i, &a) in lv.iter().enumerate() {
                for (j, &b) in lv.iter().enumerate() {
                    if a + b > 1.0 + 1e-12 || (exact && i + j > k) {
                        continue;
                    }
                    out.push(vec![a, b, rest(i + j, a + b)]);
                }
            }
        }
        _ => unreachable!("grid is only used for two or three members"),
    }
    out
}

/// Ordering used to break exact loss ties: closer to uniform weights first,
/// then lexicographically lower weights.
fn tie_order(a: &[f64], b: &[f64]) -> Ordering {
    let spread = |w: &[f64]| {
        let u = 1.0 / w.len() as f64;
        w.iter().map(|x| (x - u) * (x - u)).sum::<f64>()
    };
    let (sa, sb) = (spread(a), spread(b));
    // Mirror-image weights differ in spread only by rounding.
    let by_spread = if (sa - sb).abs() <= 1e-12 {
        Ordering::Equal
    } else {
        sa.total_cmp(&sb)
    };
    by_spread.then_with(|| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Weight vector minimizing validation log loss of [`ensemble_predict`].
///
/// Two or three members: exhaustive simplex grid. More: coordinate ascent
/// started from the best single member. Every corner of the simplex is a
/// candidate, so the returned loss never exceeds the best member's.
pub fn search_weights(
    members: &[MemberPredictions],
    labels: &[LabelVector],
    step: f64,
) -> Result<(EnsembleWeights, f64), EnsembleError> {
    check_members(members)?;
    if !(step > 0.0 && step <= 0.5) {
        return Err(EnsembleError::InvalidStep(step));
    }
    if labels.len() != members[0].triples.len() {
        return Err(EnsembleError::Misaligned {
            member: "labels".into(),
            detail: format!(
                "{} labels for {} rows",
                labels.len(),
                members[0].triples.len()
            ),
        });
    }
    let loss = |w: &[f64]| metrics::log_loss(&blend(members, w), labels);

    let m = members.len();
    let corner = |i: usize| {
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        w
    };
    let mut best_w = corner(0);
    let mut best = loss(&best_w)?;
    let consider =
        |w: Vec<f64>, best_w: &mut Vec<f64>, best: &mut f64| -> Result<bool, EnsembleError> {
            let l = loss(&w)?;
            let better = l < *best || (l == *best && tie_order(&w, best_w).is_lt());
            if better {
                *best = l;
                *best_w = w;
            }
            Ok(better)
        };

    match m {
        1 => {}
        2 | 3 => {
            for w in simplex_grid(m, step) {
                consider(w, &mut best_w, &mut best)?;
            }
        }
        _ => {
            for i in 1..m {
                consider(corner(i), &mut best_w, &mut best)?;
            }
            let lv = levels(step);
            for _ in 0..MAX_ASCENT_ROUNDS {
                let mut moved = false;
                for i in 0..m {
                    for &t in &lv[1..] {
                        let w: Vec<f64> = best_w
                            .iter()
                            .enumerate()
                            .map(|(j, &x)| (1.0 - t) * x + if i == j { t } else { 0.0 })
                            .collect();
                        let before = best;
                        if consider(w, &mut best_w, &mut best)? && best < before {
                            moved = true;
                        }
                    }
                }
                if !moved {
                    break;
                }
            }
        }
    }
    Ok((EnsembleWeights { w: best_w }, best))
}

pub const PREDICTION_HEADER: [&str; 4] = ["id", "p_a", "p_b", "p_tie"];

/// CSV `id,p_a,p_b,p_tie`. Values are written in shortest round-trip form,
/// so reading the file back gives identical floats.
pub fn write_predictions<W: Write>(
    w: W,
    ids: &[String],
    triples: &[ProbabilityTriple],
) -> Result<(), EnsembleError> {
    if ids.len() != triples.len() {
        return Err(EnsembleError::Misaligned {
            member: "output".into(),
            detail: format!("{} ids but {} triples", ids.len(), triples.len()),
        });
    }
    let fail = |e: csv::Error| EnsembleError::Format(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PREDICTION_HEADER).map_err(fail)?;
    for (id, t) in ids.iter().zip(triples) {
        out.write_record([
            id.clone(),
            t.0[0].to_string(),
            t.0[1].to_string(),
            t.0[2].to_string(),
        ])
        .map_err(fail)?;
    }
    out.flush()
        .map_err(|e| EnsembleError::Format(e.to_string()))?;
    Ok(())
}

/// Reads a prediction CSV. Rows must carry finite numbers; the simplex is
/// not checked here.
pub fn read_predictions<R: Read>(
    member_id: &str,
    r: R,
) -> Result<MemberPredictions, EnsembleError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| EnsembleError::Format(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != PREDICTION_HEADER {
        return Err(EnsembleError::Format(format!(
            "{member_id}: expected header `id,p_a,p_b,p_tie`, got `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut ids = Vec::new();
    let mut triples = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row =
            row.map_err(|e| EnsembleError::Format(format!("{member_id}: line {line}: {e}")))?;
        let mut p = [0.0; NUM_CLASSES];
        for (j, slot) in p.iter_mut().enumerate() {
            let cell = &row[j + 1];
            *slot = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    EnsembleError::Format(format!(
                        "{member_id}: line {line}: bad probability `{cell}`"
                    ))
                })?;
        }
        ids.push(row[0].to_string());
        triples.push(ProbabilityTriple(p));
    }
    Ok(MemberPredictions {
        member_id: member_id.to_string(),
        ids,
        triples,
    })
}

//! Evaluation contract: simplex check, multiclass log loss and accuracy over
//! (A, B, Tie) probability triples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::LabelVector;
use crate::numeric::PROB_CLIP;

/// Number of outcome classes (A wins, B wins, tie).
pub const NUM_CLASSES: usize = 3;

/// Default tolerance for [`check_simplex`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("cannot score an empty set")]
    Empty,
    #[error("prediction {index} is not on the simplex: {violation}")]
    Simplex {
        index: usize,
        violation: SimplexViolation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum SimplexViolation {
    #[error("component {component} is negative ({value})")]
    Negative { component: usize, value: f64 },
    #[error("components sum to {sum}")]
    Sum { sum: f64 },
    #[error("component {component} is not finite")]
    NonFinite { component: usize },
}

/// Predicted probabilities in (A, B, Tie) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTriple(pub [f64; 3]);

impl ProbabilityTriple {
    pub const UNIFORM: Self = Self([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);

    pub fn new(p_a: f64, p_b: f64, p_tie: f64) -> Self {
        Self([p_a, p_b, p_tie])
    }

    pub fn p_a(&self) -> f64 {
        self.0[0]
    }

    pub fn p_b(&self) -> f64 {
        self.0[1]
    }

    pub fn p_tie(&self) -> f64 {
        self.0[2]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax(v: &[f64; 3]) -> usize {
    let mut best = 0;
    for j in 1..3 {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// Ok iff every component is nonnegative and the sum is within `tol` of 1.
pub fn check_simplex(t: &ProbabilityTriple, tol: f64) -> Result<(), SimplexViolation> {
    for (component, &value) in t.0.iter().enumerate() {
        if !value.is_finite() {
            return Err(SimplexViolation::NonFinite { component });
        }
        if value < 0.0 {
            return Err(SimplexViolation::Negative { component, value });
        }
    }
    let sum: f64 = t.0.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(SimplexViolation::Sum { sum });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub log_loss: f64,
    pub accuracy: f64,
    pub n: usize,
}

fn check_lengths(preds: usize, labels: usize) -> Result<(), MetricsError> {
    if preds != labels {
        return Err(MetricsError::LengthMismatch { preds, labels });
    }
    if preds == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean over examples of `−Σ_j y_j · ln(max(p_j, 1e-15))`, natural log.
pub fn log_loss(preds: &[ProbabilityTriple], labels: &[LabelVector]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    for (index, p) in preds.iter().enumerate() {
        check_simplex(p, SIMPLEX_TOL)
            .map_err(|violation| MetricsError::Simplex { index, violation })?;
    }
    let terms: Vec<f64> = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            -(0..NUM_CLASSES)
                .filter(|&j| y.0[j] != 0.0)
                .map(|j| y.0[j] * p.0[j].max(PROB_CLIP).ln())
                .sum::<f64>()
        })
        .collect();
    Ok(pairwise_sum(&terms) / preds.len() as f64)
}

/// Fraction of examples whose predicted argmax equals the label argmax.
pub fn accuracy(preds: &[ProbabilityTriple], labels: &[LabelVector]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| argmax(&p.0) == argmax(&y.0))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn evaluate(
    preds: &[ProbabilityTriple],
    labels: &[LabelVector],
) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        log_loss: log_loss(preds, labels)?,
        accuracy: accuracy(preds, labels)?,
        n: preds.len(),
    })
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;

    fn lv(label: Label) -> LabelVector {
        label.encode()
    }

    #[test]
    fn simplex_checks() {
        assert!(check_simplex(&ProbabilityTriple::UNIFORM, SIMPLEX_TOL).is_ok());
        assert!(check_simplex(&ProbabilityTriple::new(1.0, 0.0, 0.0), SIMPLEX_TOL).is_ok());
        assert!(matches!(
            check_simplex(&ProbabilityTriple::new(0.5, 0.5, 0.1), SIMPLEX_TOL),
            Err(SimplexViolation::Sum { .. })
        ));
        assert!(matches!(
            check_simplex(&ProbabilityTriple::new(-0.1, 1.1, 0.0), SIMPLEX_TOL),
            Err(SimplexViolation::Negative { component: 0, .. })
        ));
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let labels = [lv(Label::A), lv(Label::B), lv(Label::Tie)];
        let preds: Vec<_> = labels.iter().map(|y| ProbabilityTriple(y.0)).collect();
        assert_eq!(log_loss(&preds, &labels).unwrap(), 0.0);
        assert_eq!(accuracy(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn uniform_predictions_score_ln3() {
        let labels = [lv(Label::A), lv(Label::B), lv(Label::Tie), lv(Label::A)];
        let preds = vec![ProbabilityTriple::UNIFORM; 4];
        assert!((log_loss(&preds, &labels).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_example_hand_value() {
        let preds = [
            ProbabilityTriple::new(0.5, 0.3, 0.2),
            ProbabilityTriple::new(0.1, 0.8, 0.1),
        ];
        let labels = [lv(Label::A), lv(Label::B)];
        let expected = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
        let got = log_loss(&preds, &labels).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.458145).abs() < 1e-6);
    }

    #[test]
    fn uniform_prediction_against_tie_is_a_miss() {
        let acc = accuracy(&[ProbabilityTriple::UNIFORM], &[lv(Label::Tie)]).unwrap();
        assert_eq!(acc, 0.0);
        let acc = accuracy(&[ProbabilityTriple::UNIFORM], &[lv(Label::A)]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn half_correct() {
        let preds = [
            ProbabilityTriple::new(0.6, 0.3, 0.1),
            ProbabilityTriple::new(0.6, 0.3, 0.1),
            ProbabilityTriple::new(0.1, 0.3, 0.6),
            ProbabilityTriple::new(0.1, 0.3, 0.6),
        ];
        let labels = [lv(Label::A), lv(Label::B), lv(Label::Tie), lv(Label::A)];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.5);
    }

    #[test]
    fn hard_zero_on_true_class_is_finite() {
        let loss = log_loss(&[ProbabilityTriple::new(0.0, 1.0, 0.0)], &[lv(Label::A)]).unwrap();
        assert!((loss - 1e-15f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let p = [ProbabilityTriple::UNIFORM];
        assert_eq!(
            log_loss(&p, &[]),
            Err(MetricsError::LengthMismatch {
                preds: 1,
                labels: 0
            })
        );
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(
            log_loss(&[ProbabilityTriple::new(0.5, 0.5, 0.1)], &[lv(Label::A)]),
            Err(MetricsError::Simplex { index: 0, .. })
        ));
    }

    #[test]
    fn report_json_keys() {
        let r = MetricsReport {
            log_loss: 0.0,
            accuracy: 1.0,
            n: 3,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"log_loss":0.0,"accuracy":1.0,"n":3}"#
        );
    }
}

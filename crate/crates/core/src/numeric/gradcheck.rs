//! Central-difference verification of [`Tape::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NumericError, Parameter, Tape, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; smaller parameters are checked in full.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per entry of `params` (in the
/// same order) and must return a scalar loss. Only parameters with
/// `requires_grad` are checked.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Parameter],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericError>,
{
    let eval = |values: &[Tensor],
                with_grad: bool|
     -> Result<(f64, Option<Vec<Option<Tensor>>>), NumericError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.leaf(v.clone(), with_grad && p.requires_grad))
            .collect();
        let loss = loss_fn(&mut tape, &leaves)?;
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((
            value,
            Some(leaves.iter().map(|&l| grads.get(l).cloned()).collect()),
        ))
    };

    let base: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let (_, analytic) = eval(&base, true)?;
    let analytic = analytic.expect("requested gradients");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        passed: true,
    };
    for (pi, param) in params.iter().enumerate() {
        if !param.requires_grad {
            continue;
        }
        let n = param.value.len();
        let coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic[pi]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for idx in coords {
            let mut values = base.clone();
            let perturbed = |delta: f64| {
                let mut d = param.value.to_vec();
                d[idx] += delta;
                Tensor::new(param.value.shape().to_vec(), d)
            };
            values[pi] = perturbed(cfg.eps)?;
            let (plus, _) = eval(&values, false)?;
            values[pi] = perturbed(-cfg.eps)?;
            let (minus, _) = eval(&values, false)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coordinates_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst_param = param.name.clone();
                report.worst_index = idx;
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_mse_passes_tightly() {
        // loss = Σ (X·w − y)², analytic gradient is exact up to rounding.
        let x = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| (i as f64 * 0.7).cos()).collect(),
        )
        .unwrap();
        let y = Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let w = Parameter::new(
            "w",
            Tensor::new(vec![3, 1], vec![0.1, -0.2, 0.3]).unwrap(),
            true,
        );
        let report = grad_check(
            |tape, leaves| {
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let pred = tape.matmul(xv, leaves[0])?;
                let r = tape.sub(pred, yv)?;
                let sq = tape.mul(r, r)?;
                tape.sum(sq)
            },
            &[w],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
        assert_eq!(report.coordinates_checked, 3);
        assert!(report.passed);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let a = Parameter::new("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let report = grad_check(
            |tape, leaves| tape.sum(leaves[0]),
            &[a],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 0);
    }
}

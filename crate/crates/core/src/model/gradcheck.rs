//! Central finite-difference verification of analytic gradients.

use super::transformer::{example_loss, MaskedExample};
use super::PolicyModel;
use crate::{Error, Result};

/// Denominator floor of [`relative_error`], so that parameters whose true
/// gradient is zero are judged by absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// A scalar objective over a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
    fn loss(&self) -> f64;
    fn loss_and_grad(&self) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: usize,
    pub checked: usize,
    pub analytic: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient with `(f(x+eps) - f(x-eps)) / 2eps` on
/// every parameter in `indices` (all parameters when `None`).
pub fn grad_check<F: Differentiable>(
    objective: &mut F,
    epsilon: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
    }
    let (_, analytic) = objective.loss_and_grad();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..objective.num_params()).collect();
            &all
        }
    };
    let mut worst = (0.0, 0);
    for &i in indices {
        let original = objective.param(i);
        objective.set_param(i, original + epsilon);
        let up = objective.loss();
        objective.set_param(i, original - epsilon);
        let down = objective.loss();
        objective.set_param(i, original);
        let numeric = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_param: worst.1,
        checked: indices.len(),
        analytic,
    })
}

/// The summed masked cross-entropy of one example as a function of the
/// model parameters.
pub(crate) struct ExampleObjective<'a> {
    pub model: PolicyModel,
    pub example: &'a MaskedExample,
}

impl Differentiable for ExampleObjective<'_> {
    fn num_params(&self) -> usize {
        self.model.param_count()
    }

    fn param(&self, i: usize) -> f64 {
        self.model.params()[i]
    }

    fn set_param(&mut self, i: usize, value: f64) {
        self.model.params_mut()[i] = value;
    }

    fn loss(&self) -> f64 {
        example_loss(&self.model, self.example, 1.0, None)
    }

    fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.model.param_count()];
        let loss = example_loss(&self.model, self.example, 1.0, Some(&mut grad));
        (loss, grad)
    }
}

impl PolicyModel {
    /// Loss and gradient of the summed masked cross-entropy on `example`.
    pub fn loss_and_grad(&self, example: &MaskedExample) -> Result<(f64, Vec<f64>)> {
        self.check_example(example)?;
        let mut grad = vec![0.0; self.param_count()];
        let loss = example_loss(self, example, 1.0, Some(&mut grad));
        Ok((loss, grad))
    }

    pub fn example_loss(&self, example: &MaskedExample) -> Result<f64> {
        self.check_example(example)?;
        Ok(example_loss(self, example, 1.0, None))
    }

    pub(crate) fn check_example(&self, example: &MaskedExample) -> Result<()> {
        self.check_inputs(&example.context, &example.corrupted)?;
        let cfg = self.config();
        if example.targets.len() != cfg.chunk_len {
            return Err(Error::Validation("target length differs from chunk length".into()));
        }
        if example.targets.iter().any(|&t| t as usize >= cfg.num_classes) {
            return Err(Error::Validation("targets must be real classes, not MASK".into()));
        }
        if example.masked_set.iter().any(|&i| i >= cfg.chunk_len) {
            return Err(Error::Validation("masked index out of range".into()));
        }
        Ok(())
    }

    /// Finite-difference check of the masked cross-entropy gradient on every
    /// parameter, or on `subsample` when given.
    pub fn grad_check(
        &self,
        example: &MaskedExample,
        epsilon: f64,
        subsample: Option<&[usize]>,
    ) -> Result<GradCheckReport> {
        self.check_example(example)?;
        let mut objective = ExampleObjective {
            model: self.clone(),
            example,
        };
        grad_check(&mut objective, epsilon, subsample)
    }
}

//! Squared loss with sum reduction over output dimensions: the one-hot
//! regression treatment of classification.

use nalgebra::DMatrix;

use super::batch::Batch;
use super::model::{backward, check_inputs, forward_trace, StatsMode};
use super::norm::NormState;
use super::params::ParamVector;
use super::spec::NetworkSpec;
use crate::{Error, Result, Scalar};

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<DMatrix<T>> {
    let mut y = DMatrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidLabel { label: c, classes });
        }
        y[(i, c)] = T::one();
    }
    Ok(y)
}

/// Mean over samples of `½[(f_c − 1)² + Σ_{i≠c} f_i²]`.
pub fn squared_loss_classification<T: Scalar>(outputs: &DMatrix<T>, labels: &[usize]) -> Result<T> {
    if labels.len() != outputs.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} outputs",
            labels.len(),
            outputs.nrows()
        )));
    }
    squared_loss(outputs, &one_hot(labels, outputs.ncols())?)
}

/// Gradient of [`squared_loss_classification`] with respect to the outputs.
pub fn squared_loss_classification_grad<T: Scalar>(outputs: &DMatrix<T>, labels: &[usize]) -> Result<DMatrix<T>> {
    if labels.len() != outputs.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} outputs",
            labels.len(),
            outputs.nrows()
        )));
    }
    squared_loss_grad(outputs, &one_hot(labels, outputs.ncols())?)
}

/// Mean over samples of `½‖f − y‖²`.
pub fn squared_loss<T: Scalar>(outputs: &DMatrix<T>, targets: &DMatrix<T>) -> Result<T> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    if outputs.nrows() == 0 {
        return Ok(T::zero());
    }
    let sq = (outputs - targets).norm_squared();
    Ok(sq * T::lit(0.5) / T::count(outputs.nrows()))
}

pub fn squared_loss_grad<T: Scalar>(outputs: &DMatrix<T>, targets: &DMatrix<T>) -> Result<DMatrix<T>> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    Ok((outputs - targets) / T::count(outputs.nrows().max(1)))
}

/// Loss and its gradient with respect to θ under the given statistics mode.
pub fn loss_and_gradient<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
    mode: StatsMode,
) -> Result<(T, Vec<T>)> {
    check_inputs(spec, params.as_slice(), norm, &data.inputs)?;
    let trace = forward_trace(spec, params.layout(), params.as_slice(), norm, &data.inputs, mode);
    let loss = squared_loss(&trace.output, &data.targets)?;
    let up = squared_loss_grad(&trace.output, &data.targets)?;
    let grad = backward(spec, params.layout(), params.as_slice(), &trace, &up);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let f = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(squared_loss_classification(&f, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_output_two_classes() {
        let f = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert_eq!(squared_loss_classification(&f, &[0]).unwrap(), 0.5);
    }

    #[test]
    fn invalid_label() {
        let f = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(
            squared_loss_classification(&f, &[2]),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let f: DMatrix<f64> = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.8, 2.0, 0.1, -0.4, 0.0, 0.5, 0.9]);
        let labels = [2, 0, 1];
        let g = squared_loss_classification_grad(&f, &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..3 {
                let mut fp = f.clone();
                fp[(i, k)] += h;
                let mut fm = f.clone();
                fm[(i, k)] -= h;
                let fd = (squared_loss_classification(&fp, &labels).unwrap()
                    - squared_loss_classification(&fm, &labels).unwrap())
                    / (2.0 * h);
                assert!((fd - g[(i, k)]).abs() < 1e-6);
            }
        }
    }
}

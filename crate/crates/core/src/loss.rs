//! Mean squared error with the conventional ½ factor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    /// Mean of `per_example`.
    pub value: f64,
    /// `½ Σ_j (ŷ_j − y_j)²` for each example.
    pub per_example: Vec<f64>,
}

fn example_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {} vs target {}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(0.5
        * pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>())
}

/// `J = (1/m) Σ_i ½ Σ_j (ŷ_ij − y_ij)²`.
pub fn mse_loss(pred: &[Tensor], target: &[Tensor]) -> Result<LossValue> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "mse: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("mse of an empty batch".into()));
    }
    let per_example = pred
        .iter()
        .zip(target)
        .map(|(p, t)| example_loss(p, t))
        .collect::<Result<Vec<_>>>()?;
    let value = per_example.iter().sum::<f64>() / per_example.len() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("mse is {value}")));
    }
    Ok(LossValue { value, per_example })
}

/// Derivative of one example's loss with respect to its prediction: `ŷ − y`.
pub fn mse_output_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.sub(target).map_err(|_| {
        Error::Shape(format!(
            "mse grad: prediction {} vs target {}",
            pred.shape(),
            target.shape()
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(
            mse_loss(&[v(&[1., 2.])], &[v(&[1., 2.])]).unwrap().value,
            0.0
        );
        assert_eq!(mse_loss(&[v(&[3.])], &[v(&[1.])]).unwrap().value, 2.0);
        let l = mse_loss(&[v(&[1., 1.]), v(&[0., 0.])], &[v(&[0., 0.]), v(&[0., 0.])]).unwrap();
        assert_eq!(l.value, 0.5);
        assert_eq!(l.per_example, vec![1.0, 0.0]);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(mse_loss(&[v(&[1.])], &[]), Err(Error::Shape(_))));
        assert!(matches!(
            mse_loss(&[v(&[1.])], &[v(&[1., 2.])]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mse_output_grad(&v(&[1.]), &v(&[1., 2.])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_examples() {
        assert_eq!(
            mse_output_grad(&v(&[1., 2.]), &v(&[1., 2.])).unwrap(),
            v(&[0., 0.])
        );
        assert_eq!(mse_output_grad(&v(&[3.]), &v(&[1.])).unwrap(), v(&[2.]));
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = SeededRng::new(17);
        let shape = Shape::new(&[6]).unwrap();
        let pred = Tensor::randn(&shape, 1.0, &mut rng);
        let target = Tensor::randn(&shape, 1.0, &mut rng);
        let g = mse_output_grad(&pred, &target).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let lp = mse_loss(&[plus], std::slice::from_ref(&target))
                .unwrap()
                .value;
            let lm = mse_loss(&[minus], std::slice::from_ref(&target))
                .unwrap()
                .value;
            let numeric = (lp - lm) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-7, "index {i}: {a} vs {numeric}");
        }
    }

    proptest! {
        #[test]
        fn loss_is_symmetric_and_permutation_invariant(seed in any::<u64>(), m in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let shape = Shape::new(&[3]).unwrap();
            let pred: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
            let target: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
            let base = mse_loss(&pred, &target).unwrap().value;
            prop_assert_eq!(base, mse_loss(&target, &pred).unwrap().value);
            let mut order: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut order);
            let p2: Vec<Tensor> = order.iter().map(|&i| pred[i].clone()).collect();
            let t2: Vec<Tensor> = order.iter().map(|&i| target[i].clone()).collect();
            prop_assert!((mse_loss(&p2, &t2).unwrap().value - base).abs() < 1e-12);
        }
    }
}

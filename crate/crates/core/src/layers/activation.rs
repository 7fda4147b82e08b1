use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `x` may be either the ReLU input or its output; both are positive at the
/// same positions. The subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward shape mismatch"));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.dims().to_vec(), data)
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Backward through the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape("sigmoid_backward shape mismatch"));
    }
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.dims().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(vec![3], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let hi = sigmoid(40.0f64);
        let lo = sigmoid(-40.0f64);
        assert!(hi.is_finite() && lo.is_finite());
        assert!((hi - 1.0).abs() < 1e-12);
        assert!(lo.abs() < 1e-12 && lo > 0.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }

    #[test]
    fn sigmoid_backward_matches_finite_differences() {
        let x = Tensor::from_vec(vec![4], vec![-3.0f64, -0.2, 0.4, 5.0]).unwrap();
        let probe = [0.3, -1.0, 2.0, 0.5];
        let y = sigmoid_forward(&x);
        let up = Tensor::from_vec(vec![4], probe.to_vec()).unwrap();
        let g = sigmoid_backward(&y, &up).unwrap();
        let n = finite_diff_grad(
            |x| sigmoid_forward(x).data().iter().zip(&probe).map(|(a, b)| a * b).sum(),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(n.data(), g.data(), 1e-8) < 1e-6);
    }
}

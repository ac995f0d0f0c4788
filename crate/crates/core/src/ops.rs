//! Tensor-level entry points for the numeric primitives.
//!
//! These validate their inputs and share kernels with the corresponding
//! graph ops, so tests and inference code can call them without building a
//! tape.

use crate::error::{Error, Result};
use crate::graph;
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    Ok(graph::softmax_rows_kernel(x))
}

/// Row-wise layer normalization: `(x - mean) / sqrt(var + eps) * gamma + beta`.
///
/// Zero-variance rows normalize to zeros before the affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("layer_norm input".into()));
    }
    let d = x.cols();
    if gamma.shape() != [1, d] || beta.shape() != [1, d] {
        return Err(Error::Shape {
            context: "layer_norm affine".into(),
            expected: vec![1, d],
            got: gamma.shape().to_vec(),
        });
    }
    let mut g = graph::Graph::new();
    let xv = g.input(x.clone());
    let gv = g.input(gamma.clone());
    let bv = g.input(beta.clone());
    let out = g.layer_norm(xv, gv, bv, eps);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tensor::zeros(1, 2);
        t.data_mut()[0] = f64::INFINITY;
        assert!(softmax_rows(&t).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(2, 3, vec![0.1f64, -2.0, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

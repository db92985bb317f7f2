//! Dense tensors, a reverse-mode tape over them, and finite-difference
//! gradient checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, SAMPLED_COORDS};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{glorot, Parameter, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Default negative slope for LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(a, b)?;
    Ok(g.value(out).clone())
}

/// Row-wise softmax of `logits + mask`; `mask` entries are `0` or `-inf`.
pub fn softmax_masked(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let out = g.softmax_rows(x, Some(mask))?;
    Ok(g.value(out).clone())
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let out = g.leaky_relu(x, slope);
    g.value(out).clone()
}

/// Row-wise layer normalisation with affine `scale`/`shift` (each `1×n`).
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, s, b) = (
        g.constant(x.clone()),
        g.constant(scale.clone()),
        g.constant(shift.clone()),
    );
    let out = g.layer_norm(x, s, b)?;
    Ok(g.value(out).clone())
}

/// Upper-triangular `-inf` mask: row `i` may see columns `j <= i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_examples() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);

        let z = matmul(&Tensor::zeros(2, 3), &Tensor::full(3, 4, 7.0)).unwrap();
        assert_eq!(z, Tensor::zeros(2, 4));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_masked(&Tensor::zeros(3, 3), &Tensor::zeros(3, 3)).unwrap();
        assert!(u.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let forced = softmax_masked(&Tensor::full(3, 3, 0.7), &causal_mask(3)).unwrap();
        assert_eq!(forced.row(0), &[1.0, 0.0, 0.0]);

        let two = Tensor::matrix(1, 2, vec![0.0, 2f64.ln()]).unwrap();
        let s = softmax_masked(&two, &Tensor::zeros(1, 2)).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mask = Tensor::full(2, 2, f64::NEG_INFINITY);
        assert!(matches!(
            softmax_masked(&Tensor::zeros(2, 2), &mask),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn leaky_relu_examples() {
        let x = Tensor::matrix(1, 3, vec![2.0, -1.0, 0.0]).unwrap();
        let y = leaky_relu(&x, LEAKY_SLOPE);
        assert_eq!(y.data(), &[2.0, -0.2, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_wrong_affine_shape() {
        let x = Tensor::zeros(2, 4);
        assert!(layer_norm(&x, &Tensor::full(1, 3, 1.0), &Tensor::zeros(1, 4)).is_err());
    }
}

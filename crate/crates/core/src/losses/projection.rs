use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Affine map `y = x Wᵀ + bias` with `W: d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub x: Array2<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "linear_projection",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Linear { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "linear_projection",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Gradients of a downstream scalar given its gradient `grad_out` (`b × d_out`).
    pub fn backward(&self, x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> Result<LinearGrads> {
        self.check_input(&x)?;
        if grad_out.dim() != (x.nrows(), self.d_out()) {
            return Err(Error::ShapeMismatch {
                op: "linear_projection",
                left: grad_out.shape().to_vec(),
                right: vec![x.nrows(), self.d_out()],
            });
        }
        Ok(LinearGrads {
            x: grad_out.dot(&self.weight),
            weight: grad_out.t().dot(&x),
            bias: grad_out.sum_axis(Axis(0)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn identity_is_a_no_op() {
        let mut rng = SeededRng::new(31, 0);
        let x = Array2::from_shape_simple_fn((4, 6), || rng.normal());
        assert_eq!(Linear::identity(6).forward(x.view()).unwrap(), x);
    }

    #[test]
    fn wide_projection_dims() {
        let mut rng = SeededRng::new(32, 0);
        let x = Array2::from_shape_simple_fn((2, 384), || rng.normal());
        for d_out in [768, 1024] {
            let lin = Linear::new(Array2::zeros((d_out, 384)), Array1::ones(d_out)).unwrap();
            let y = lin.forward(x.view()).unwrap();
            assert_eq!(y.dim(), (2, d_out));
            assert!(y.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Linear::new(Array2::zeros((3, 2)), Array1::zeros(2)).is_err());
        let lin = Linear::identity(3);
        assert!(lin.forward(Array2::zeros((1, 2)).view()).is_err());
        assert!(lin.backward(Array2::zeros((1, 3)).view(), Array2::zeros((2, 3)).view()).is_err());
    }
}

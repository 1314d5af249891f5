//! Plain fully-connected layer `y = W x` (no bias).

use super::{ParamKind, Parameter};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct StandardLinear<T: Scalar> {
    /// `[out × in]`
    pub w: Parameter<T>,
}

impl<T: Scalar> StandardLinear<T> {
    pub fn new(name: &str, w: Tensor<T>) -> Self {
        Self {
            w: Parameter::new(format!("{name}.w"), w, ParamKind::Weight),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[0]
    }
}

/// Row-wise `y = x Wᵀ` for `x: [batch × in]`.
pub fn fc_forward<T: Scalar>(layer: &StandardLinear<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() != layer.in_dim() {
        return Err(shape_err("fc_forward", layer.in_dim(), x.cols()));
    }
    x.matmul_nt(&layer.w.value)
}

/// `∂L/∂W = ∂L/∂yᵀ · x` summed over rows, `∂L/∂x = ∂L/∂y · W`.
pub fn fc_backward<T: Scalar>(
    layer: &StandardLinear<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if dy.cols() != layer.out_dim() || dy.rows() != x.rows() || x.cols() != layer.in_dim() {
        return Err(shape_err(
            "fc_backward",
            format!("x [{} × {}], dy [{} × {}]", x.rows(), layer.in_dim(), x.rows(), layer.out_dim()),
            format!("x {:?}, dy {:?}", x.shape(), dy.shape()),
        ));
    }
    let dw = dy.matmul_tn(x)?;
    let dx = dy.matmul(&layer.w.value)?;
    Ok((dw, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, RngState};

    #[test]
    fn identity_weight() {
        let layer = StandardLinear::new("fc", Tensor::<f64>::identity(3));
        let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let g = Tensor::from_rows(&[&[0.3, 0.1, -0.7]]).unwrap();
        let (dw, dx) = fc_backward(&layer, &x, &g).unwrap();
        assert_eq!(dx, g);
        assert_eq!(dw, g.matmul_tn(&x).unwrap());
        assert_eq!(fc_forward(&layer, &x).unwrap(), x);
    }

    #[test]
    fn zero_input_zero_weight_gradient() {
        let mut rng = RngState::new(4);
        let layer = StandardLinear::new("fc", gaussian::<f64>(&[5, 4], 0.0, 1.0, &mut rng));
        let x = Tensor::zeros(&[3, 4]);
        let dy = gaussian::<f64>(&[3, 5], 0.0, 1.0, &mut rng);
        let (dw, _) = fc_backward(&layer, &x, &dy).unwrap();
        assert_eq!(dw.max_abs(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let layer = StandardLinear::new("fc", Tensor::<f64>::identity(3));
        assert!(fc_forward(&layer, &Tensor::zeros(&[2, 4])).is_err());
    }
}

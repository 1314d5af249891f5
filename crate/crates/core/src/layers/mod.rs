//! Differentiable layers with hand-written backward passes.

pub mod attention;
pub mod ffn;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod sdd;
pub mod tape;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use attention::{Attention, AttentionCache, Rope};
pub use ffn::{SwiGlu, SwiGluCache};
pub use linear::{fc_backward, fc_forward, StandardLinear};
pub use loss::cross_entropy;
pub use norm::{RmsNorm, RmsNormCache};
pub use sdd::{sdd_backward_closed_form, sdd_backward_composed, sdd_forward, LayerCache, SddGrads, SddLinear};

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Matrices; weight decay applies.
    Weight,
    /// SDD `α` vectors and normalization gains; exempt from weight decay.
    Scale,
    /// Token embedding table.
    Embedding,
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            kind,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(shape_err("Parameter::accumulate", format!("{:?}", self.value.shape()), format!("{:?}", g.shape())));
        }
        self.grad.add_assign(g)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// A fully-connected map that is either a plain `Wx` or an SDD layer.
#[derive(Clone, Debug)]
pub enum Projection<T: Scalar> {
    Standard(StandardLinear<T>),
    Sdd(SddLinear<T>),
}

#[derive(Clone, Debug)]
pub enum ProjectionCache<T: Scalar> {
    Standard(Tensor<T>),
    Sdd(LayerCache<T>),
}

impl<T: Scalar> Projection<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ProjectionCache<T>)> {
        match self {
            Projection::Standard(l) => Ok((fc_forward(l, x)?, ProjectionCache::Standard(x.clone()))),
            Projection::Sdd(l) => {
                let (y, cache) = sdd_forward(l, x)?;
                Ok((y, ProjectionCache::Sdd(cache)))
            }
        }
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, cache: &ProjectionCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Projection::Standard(l), ProjectionCache::Standard(x)) => {
                let (dw, dx) = fc_backward(l, x, dy)?;
                l.w.accumulate(&dw)?;
                Ok(dx)
            }
            (Projection::Sdd(l), ProjectionCache::Sdd(c)) => {
                let g = sdd_backward_closed_form(l, c, dy)?;
                l.v.accumulate(&g.dv)?;
                l.alpha.accumulate(&g.dalpha)?;
                Ok(g.dx)
            }
            _ => Err(crate::Error::CacheMismatch("projection kind differs from cache kind".into())),
        }
    }

    /// The matrix parameter: `W` for standard layers, `V` for SDD layers.
    pub fn weight(&self) -> &Parameter<T> {
        match self {
            Projection::Standard(l) => &l.w,
            Projection::Sdd(l) => &l.v,
        }
    }

    pub fn weight_mut(&mut self) -> &mut Parameter<T> {
        match self {
            Projection::Standard(l) => &mut l.w,
            Projection::Sdd(l) => &mut l.v,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight().value.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight().value.shape()[1]
    }

    pub fn is_sdd(&self) -> bool {
        matches!(self, Projection::Sdd(_))
    }
}

impl<T: Scalar> Module<T> for Projection<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            Projection::Standard(l) => f(&l.w),
            Projection::Sdd(l) => {
                f(&l.v);
                f(&l.alpha);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match self {
            Projection::Standard(l) => f(&mut l.w),
            Projection::Sdd(l) => {
                f(&mut l.v);
                f(&mut l.alpha);
            }
        }
    }
}

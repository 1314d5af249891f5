//! A small reverse-mode tape over dense tensors.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every node after all of its consumers.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a[m×k] · b[p×k]ᵀ`
    MatMulNt(Var, Var),
    Square(Var),
    /// `[b×n] → [b×1]`
    RowMean(Var),
    AddScalar(Var),
    Sqrt(Var),
    Recip(Var),
    /// `a[b×n] * s[b×1]`
    MulRowScalar(Var, Var),
    /// `a[b×n] * v[n]`
    MulColVec(Var, Var),
    Mul(Var, Var),
    Add(Var, Var),
    SumAll(Var),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Adjoints indexed by variable; `None` for nodes the output does not reach.
#[derive(Debug)]
pub struct Gradients<T: Scalar>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(op, v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::AddScalar(a), move |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if cols == 0 {
            return Err(shape_err("row_mean", "cols >= 1", 0));
        }
        let n = T::of(cols as f64);
        let data = (0..rows).map(|r| t.row(r).iter().copied().sum::<T>() / n).collect();
        Ok(self.push(Op::RowMean(a), Tensor::from_parts(vec![rows, 1], data)))
    }

    pub fn mul_row_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != ta.rows() {
            return Err(shape_err("mul_row_scalar", ta.rows(), ts.len()));
        }
        let cols = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * ts.data()[i / cols]).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::MulRowScalar(a, s), v))
    }

    pub fn mul_col_vec(&mut self, a: Var, vec: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(vec));
        if tv.len() != ta.cols() {
            return Err(shape_err("mul_col_vec", ta.cols(), tv.len()));
        }
        let cols = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * tv.data()[i % cols]).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::MulColVec(a, vec), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        );
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        );
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::SumAll(a), Tensor::from_parts(vec![1], vec![s]))
    }

    /// Propagates `seed = ∂L/∂out` back to every node.
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape("backward seed", self.value(out), &seed)?;
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(seed);

        fn acc<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut adj[v.0] {
                Some(t) => kernels::axpy(T::one(), g.data(), t.data_mut()),
                slot => *slot = Some(g),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(g.data()).map(|(&x, &d)| f(x, d)).collect())
            };
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, p) = (ta.rows(), ta.cols(), tb.rows());
                    let da = Tensor::from_parts(vec![m, k], kernels::matmul(g.data(), tb.data(), m, p, k));
                    let db = Tensor::from_parts(vec![p, k], kernels::matmul_tn(g.data(), ta.data(), m, p, k));
                    acc(&mut adj, a, da);
                    acc(&mut adj, b, db);
                }
                Op::Square(a) => {
                    let d = zip(self.value(a), &|x, d| T::of(2.0) * x * d);
                    acc(&mut adj, a, d);
                }
                Op::RowMean(a) => {
                    let ta = self.value(a);
                    let cols = ta.cols();
                    let n = T::of(cols as f64);
                    let data = (0..ta.len()).map(|j| g.data()[j / cols] / n).collect();
                    acc(&mut adj, a, Tensor::from_parts(ta.shape().to_vec(), data));
                }
                Op::AddScalar(a) => acc(&mut adj, a, g.clone()),
                Op::Sqrt(_) | Op::Recip(_) => {
                    let a = match node.op {
                        Op::Sqrt(a) | Op::Recip(a) => a,
                        _ => unreachable!(),
                    };
                    let is_sqrt = matches!(node.op, Op::Sqrt(_));
                    let d = zip(&node.value, &|y, d| {
                        if is_sqrt {
                            d / (T::of(2.0) * y)
                        } else {
                            -d * y * y
                        }
                    });
                    acc(&mut adj, a, d);
                }
                Op::MulRowScalar(a, s) => {
                    let (ta, ts) = (self.value(a), self.value(s));
                    let cols = ta.cols();
                    let da = (0..ta.len()).map(|j| g.data()[j] * ts.data()[j / cols]).collect();
                    let ds = (0..ts.len())
                        .map(|r| kernels::dot(&g.data()[r * cols..(r + 1) * cols], ta.row(r)))
                        .collect();
                    acc(&mut adj, a, Tensor::from_parts(ta.shape().to_vec(), da));
                    acc(&mut adj, s, Tensor::from_parts(ts.shape().to_vec(), ds));
                }
                Op::MulColVec(a, v) => {
                    let (ta, tv) = (self.value(a), self.value(v));
                    let cols = ta.cols();
                    let da = (0..ta.len()).map(|j| g.data()[j] * tv.data()[j % cols]).collect();
                    let mut dv = vec![T::zero(); cols];
                    for r in 0..ta.rows() {
                        for c in 0..cols {
                            dv[c] = dv[c] + g.data()[r * cols + c] * ta.data()[r * cols + c];
                        }
                    }
                    acc(&mut adj, a, Tensor::from_parts(ta.shape().to_vec(), da));
                    acc(&mut adj, v, Tensor::from_parts(tv.shape().to_vec(), dv));
                }
                Op::Mul(a, b) => {
                    let da = zip(self.value(b), &|y, d| y * d);
                    let db = zip(self.value(a), &|x, d| x * d);
                    acc(&mut adj, a, da);
                    acc(&mut adj, b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g.clone());
                }
                Op::SumAll(a) => {
                    let ta = self.value(a);
                    acc(&mut adj, a, Tensor::full(ta.shape(), g.data()[0]));
                }
            }
        }
        Ok(Gradients(adj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::vector(&[2.0, 3.0]).unwrap());
        let b = t.leaf(Tensor::vector(&[5.0, -1.0]).unwrap());
        let p = t.mul(a, b).unwrap();
        let s = t.sum_all(p);
        let g = t.backward(s, Tensor::vector(&[1.0]).unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, -1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(x*x + x) -> 2x + 1
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(&[1.5, -2.0]).unwrap());
        let sq = t.square(x);
        let s = t.add(sq, x).unwrap();
        let out = t.sum_all(s);
        let g = t.backward(out, Tensor::vector(&[1.0]).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn sqrt_recip_chain() {
        // f(x) = 1/sqrt(x + 1) -> -0.5 (x+1)^{-3/2}
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(&[3.0]).unwrap());
        let s = t.add_scalar(x, 1.0);
        let r = t.sqrt(s);
        let inv = t.recip(r);
        let g = t.backward(inv, Tensor::vector(&[1.0]).unwrap()).unwrap();
        assert!((g.get(x).unwrap().data()[0] + 0.5 / 8.0).abs() < 1e-15);
    }
}

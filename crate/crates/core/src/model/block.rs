//! One transformer layer in any of the five wirings.
//!
//! Pre-norm (`PreNorm`, `SddPre`): `h = x + attn(n₁(x))`, `y = h + ffn(n₂(h))`.
//! Post-norm (`PostNorm`, `DeepNorm`, `SddPost`): `h = n₁(βx + attn(x))`,
//! `y = n₂(βh + ffn(h))` with `β = 1` except under DeepNorm.

use super::moe::{MoeCache, MoeLayer};
use crate::error::Result;
use crate::layers::{Attention, AttentionCache, Module, Parameter, RmsNorm, RmsNormCache, SwiGlu, SwiGluCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum FeedForward<T: Scalar> {
    Dense(SwiGlu<T>),
    Moe(MoeLayer<T>),
}

#[derive(Clone, Debug)]
pub enum FeedForwardCache<T: Scalar> {
    Dense(SwiGluCache<T>),
    Moe(MoeCache<T>),
}

impl<T: Scalar> FeedForward<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64, FeedForwardCache<T>)> {
        match self {
            FeedForward::Dense(f) => {
                let (y, c) = f.forward(x)?;
                Ok((y, 0.0, FeedForwardCache::Dense(c)))
            }
            FeedForward::Moe(m) => {
                let (y, aux, c) = m.forward(x)?;
                Ok((y, aux, FeedForwardCache::Moe(c)))
            }
        }
    }

    fn backward(&mut self, cache: &FeedForwardCache<T>, dy: &Tensor<T>, aux_weight: f64) -> Result<Tensor<T>> {
        match (self, cache) {
            (FeedForward::Dense(f), FeedForwardCache::Dense(c)) => f.backward(c, dy),
            (FeedForward::Moe(m), FeedForwardCache::Moe(c)) => m.backward(c, dy, aux_weight),
            _ => Err(crate::Error::CacheMismatch("feed-forward kind differs from cache kind".into())),
        }
    }

    /// The dense FFN, or every expert of an MoE layer.
    pub fn experts(&self) -> Vec<&SwiGlu<T>> {
        match self {
            FeedForward::Dense(f) => vec![f],
            FeedForward::Moe(m) => m.experts.iter().collect(),
        }
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            FeedForward::Dense(d) => d.visit_params(f),
            FeedForward::Moe(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match self {
            FeedForward::Dense(d) => d.visit_params_mut(f),
            FeedForward::Moe(m) => m.visit_params_mut(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T: Scalar> {
    pub attn_norm: RmsNorm<T>,
    pub attn: Attention<T>,
    pub ff_norm: RmsNorm<T>,
    pub ffn: FeedForward<T>,
    pub post_norm: bool,
    pub residual_scale: f64,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T: Scalar> {
    attn_norm: RmsNormCache<T>,
    attn: AttentionCache<T>,
    ff_norm: RmsNormCache<T>,
    ffn: FeedForwardCache<T>,
}

fn scaled_sum<T: Scalar>(a: &Tensor<T>, scale: f64, b: &Tensor<T>) -> Result<Tensor<T>> {
    if scale == 1.0 {
        a.add(b)
    } else {
        a.scale(T::of(scale))?.add(b)
    }
}

impl<T: Scalar> Block<T> {
    /// Returns the block output, its balance loss (0 for dense FFNs) and the cache.
    pub fn forward(&self, x: &Tensor<T>, seq: usize) -> Result<(Tensor<T>, f64, BlockCache<T>)> {
        if self.post_norm {
            let (a, attn) = self.attn.forward(x, seq)?;
            let (h, attn_norm) = self.attn_norm.forward(&scaled_sum(x, self.residual_scale, &a)?)?;
            let (f, aux, ffn) = self.ffn.forward(&h)?;
            let (y, ff_norm) = self.ff_norm.forward(&scaled_sum(&h, self.residual_scale, &f)?)?;
            Ok((
                y,
                aux,
                BlockCache {
                    attn_norm,
                    attn,
                    ff_norm,
                    ffn,
                },
            ))
        } else {
            let (xn, attn_norm) = self.attn_norm.forward(x)?;
            let (a, attn) = self.attn.forward(&xn, seq)?;
            let h = x.add(&a)?;
            let (hn, ff_norm) = self.ff_norm.forward(&h)?;
            let (f, aux, ffn) = self.ffn.forward(&hn)?;
            let y = h.add(&f)?;
            Ok((
                y,
                aux,
                BlockCache {
                    attn_norm,
                    attn,
                    ff_norm,
                    ffn,
                },
            ))
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>, aux_weight: f64) -> Result<Tensor<T>> {
        if self.post_norm {
            let beta = T::of(self.residual_scale);
            let ds2 = self.ff_norm.backward(&cache.ff_norm, dy)?;
            let dh = ds2.scale(beta)?.add(&self.ffn.backward(&cache.ffn, &ds2, aux_weight)?)?;
            let ds1 = self.attn_norm.backward(&cache.attn_norm, &dh)?;
            ds1.scale(beta)?.add(&self.attn.backward(&cache.attn, &ds1)?)
        } else {
            let dhn = self.ffn.backward(&cache.ffn, dy, aux_weight)?;
            let dh = dy.add(&self.ff_norm.backward(&cache.ff_norm, &dhn)?)?;
            let dxn = self.attn.backward(&cache.attn, &dh)?;
            dh.add(&self.attn_norm.backward(&cache.attn_norm, &dxn)?)
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.attn_norm.visit_params(f);
        self.attn.visit_params(f);
        self.ff_norm.visit_params(f);
        self.ffn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.attn_norm.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.ff_norm.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
    }
}

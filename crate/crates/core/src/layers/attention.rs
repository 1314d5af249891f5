//! Causal grouped-query self-attention with rotary position embedding.
//!
//! `att_proj` is one fused projection producing `[q | k | v]` per token
//! (`d + 2·kv_heads·head_dim` outputs); `attn_out` maps the concatenated heads
//! back to `d`. Query head `h` reads key/value head `h / (heads / kv_heads)`.

use super::{Module, Parameter, Projection, ProjectionCache};
use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Precomputed rotary angles for `context` positions.
#[derive(Clone, Debug)]
pub struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
    context: usize,
}

impl Rope {
    pub fn new(head_dim: usize, context: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(context * half);
        let mut sin = Vec::with_capacity(context * half);
        for p in 0..context {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { cos, sin, half, context }
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Rotates consecutive pairs of `v` (one head) to position `pos`;
    /// `inverse` applies the transpose, which is the backward map.
    fn apply<T: Scalar>(&self, v: &mut [T], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (T::of(self.cos[base + i]), T::of(self.sin[base + i]));
            let s = if inverse { -s } else { s };
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attention<T: Scalar> {
    pub att_proj: Projection<T>,
    pub attn_out: Projection<T>,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope: Rope,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T: Scalar> {
    proj: ProjectionCache<T>,
    out: ProjectionCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per `(batch, head)`: `seq × seq` causal attention weights.
    probs: Vec<Vec<T>>,
    seq: usize,
}

struct GroupResult<T> {
    probs: Vec<Vec<T>>,
    ctx: Vec<T>,
}

struct GroupGrad<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(att_proj: Projection<T>, attn_out: Projection<T>, heads: usize, kv_heads: usize, context: usize) -> Result<Self> {
        let d = attn_out.out_dim();
        if heads == 0 || kv_heads == 0 || !heads.is_multiple_of(kv_heads) || !d.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "attention needs heads % kv_heads == 0 and d % heads == 0 (d={d}, heads={heads}, kv_heads={kv_heads})"
            )));
        }
        let head_dim = d / heads;
        if !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("rotary embedding needs an even head dim, got {head_dim}")));
        }
        let expected = d + 2 * kv_heads * head_dim;
        if att_proj.out_dim() != expected || att_proj.in_dim() != d || attn_out.in_dim() != d {
            return Err(shape_err(
                "Attention::new",
                format!("att_proj [{expected} × {d}], attn_out [{d} × {d}]"),
                format!(
                    "att_proj [{} × {}], attn_out [{} × {}]",
                    att_proj.out_dim(),
                    att_proj.in_dim(),
                    attn_out.out_dim(),
                    attn_out.in_dim()
                ),
            ));
        }
        Ok(Self {
            att_proj,
            attn_out,
            heads,
            kv_heads,
            head_dim,
            rope: Rope::new(head_dim, context, ROPE_BASE),
        })
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// `x` holds `batch · seq` token rows, sequences stored contiguously.
    pub fn forward(&self, x: &Tensor<T>, seq: usize) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (d, kvd, dh) = (self.d_model(), self.kv_dim(), self.head_dim);
        if seq == 0 || !x.rows().is_multiple_of(seq) || x.cols() != d {
            return Err(shape_err("Attention::forward", format!("[batch·{seq} × {d}]"), format!("{:?}", x.shape())));
        }
        if seq > self.rope.context() {
            return Err(Error::SequenceTooLong {
                len: seq,
                context: self.rope.context(),
            });
        }
        let n = x.rows();
        let batch = n / seq;
        let (qkv, proj) = self.att_proj.forward(x)?;
        let width = d + 2 * kvd;
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * kvd];
        let mut v = vec![T::zero(); n * kvd];
        for t in 0..n {
            let row = &qkv.data()[t * width..(t + 1) * width];
            let pos = t % seq;
            q[t * d..(t + 1) * d].copy_from_slice(&row[..d]);
            k[t * kvd..(t + 1) * kvd].copy_from_slice(&row[d..d + kvd]);
            v[t * kvd..(t + 1) * kvd].copy_from_slice(&row[d + kvd..]);
            for h in 0..self.heads {
                self.rope.apply(&mut q[t * d + h * dh..t * d + (h + 1) * dh], pos, false);
            }
            for g in 0..self.kv_heads {
                self.rope.apply(&mut k[t * kvd + g * dh..t * kvd + (g + 1) * dh], pos, false);
            }
        }

        let rep = self.heads / self.kv_heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let groups = exec::map_indices(batch * self.kv_heads, |job| {
            let (b, g) = (job / self.kv_heads, job % self.kv_heads);
            let mut probs = Vec::with_capacity(rep);
            let mut ctx = vec![T::zero(); seq * rep * dh];
            let kv_at = |j: usize| -> std::ops::Range<usize> {
                let t = b * seq + j;
                t * kvd + g * dh..t * kvd + (g + 1) * dh
            };
            for r in 0..rep {
                let h = g * rep + r;
                let mut p = vec![T::zero(); seq * seq];
                for i in 0..seq {
                    let qi = &q[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let s = kernels::dot(qi, &k[kv_at(j)]) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = T::zero();
                    for pj in row[..=i].iter_mut() {
                        *pj = (*pj - max).exp();
                        sum = sum + *pj;
                    }
                    let inv = T::one() / sum;
                    let out = &mut ctx[(i * rep + r) * dh..(i * rep + r + 1) * dh];
                    for j in 0..=i {
                        row[j] = row[j] * inv;
                        kernels::axpy(row[j], &v[kv_at(j)], out);
                    }
                }
                probs.push(p);
            }
            GroupResult { probs, ctx }
        });

        let mut ctx = Tensor::zeros(&[n, d]);
        let mut probs = vec![Vec::new(); batch * self.heads];
        for (job, res) in groups.into_iter().enumerate() {
            let (b, g) = (job / self.kv_heads, job % self.kv_heads);
            for i in 0..seq {
                let t = b * seq + i;
                let dst = &mut ctx.row_mut(t)[g * rep * dh..(g + 1) * rep * dh];
                dst.copy_from_slice(&res.ctx[i * rep * dh..(i + 1) * rep * dh]);
            }
            for (r, p) in res.probs.into_iter().enumerate() {
                probs[b * self.heads + g * rep + r] = p;
            }
        }
        let (y, out) = self.attn_out.forward(&ctx)?;
        Ok((
            y,
            AttentionCache {
                proj,
                out,
                q,
                k,
                v,
                probs,
                seq,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, kvd, dh) = (self.d_model(), self.kv_dim(), self.head_dim);
        let seq = cache.seq;
        let n = cache.q.len() / d;
        if dy.rows() != n || dy.cols() != d {
            return Err(shape_err("Attention::backward", format!("[{n} × {d}]"), format!("{:?}", dy.shape())));
        }
        let batch = n / seq;
        let rep = self.heads / self.kv_heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.attn_out.backward(&cache.out, dy)?;
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);

        let grads = exec::map_indices(batch * self.kv_heads, |job| {
            let (b, g) = (job / self.kv_heads, job % self.kv_heads);
            let kv = |j: usize| {
                let t = b * seq + j;
                t * kvd + g * dh..t * kvd + (g + 1) * dh
            };
            let mut dq = vec![T::zero(); seq * rep * dh];
            let mut dk = vec![T::zero(); seq * dh];
            let mut dv = vec![T::zero(); seq * dh];
            let mut dp = vec![T::zero(); seq];
            for r in 0..rep {
                let h = g * rep + r;
                let p = &cache.probs[b * self.heads + h];
                for i in 0..seq {
                    let t = b * seq + i;
                    let doi = &dctx.row(t)[h * dh..(h + 1) * dh];
                    let prow = &p[i * seq..(i + 1) * seq];
                    let mut weighted = T::zero();
                    for j in 0..=i {
                        dp[j] = kernels::dot(doi, &v[kv(j)]);
                        weighted = weighted + prow[j] * dp[j];
                        kernels::axpy(prow[j], doi, &mut dv[j * dh..(j + 1) * dh]);
                    }
                    let qi = &q[t * d + h * dh..t * d + (h + 1) * dh];
                    let dqi = &mut dq[(i * rep + r) * dh..(i * rep + r + 1) * dh];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        kernels::axpy(ds, &k[kv(j)], dqi);
                        kernels::axpy(ds, qi, &mut dk[j * dh..(j + 1) * dh]);
                    }
                }
            }
            GroupGrad { dq, dk, dv }
        });

        let width = d + 2 * kvd;
        let mut dqkv = Tensor::zeros(&[n, width]);
        for (job, gg) in grads.into_iter().enumerate() {
            let (b, g) = (job / self.kv_heads, job % self.kv_heads);
            for i in 0..seq {
                let t = b * seq + i;
                let row = dqkv.row_mut(t);
                row[g * rep * dh..(g + 1) * rep * dh].copy_from_slice(&gg.dq[i * rep * dh..(i + 1) * rep * dh]);
                row[d + g * dh..d + (g + 1) * dh].copy_from_slice(&gg.dk[i * dh..(i + 1) * dh]);
                row[d + kvd + g * dh..d + kvd + (g + 1) * dh].copy_from_slice(&gg.dv[i * dh..(i + 1) * dh]);
            }
        }
        for t in 0..n {
            let pos = t % seq;
            let row = dqkv.row_mut(t);
            for h in 0..self.heads {
                self.rope.apply(&mut row[h * dh..(h + 1) * dh], pos, true);
            }
            for g in 0..self.kv_heads {
                self.rope.apply(&mut row[d + g * dh..d + (g + 1) * dh], pos, true);
            }
        }
        dqkv.ensure_finite("Attention::backward")?;
        self.att_proj.backward(&cache.proj, &dqkv)
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.att_proj.visit_params(f);
        self.attn_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.att_proj.visit_params_mut(f);
        self.attn_out.visit_params_mut(f);
    }
}

//! Token-choice mixture of gated feed-forward experts.
//!
//! A softmax router scores every expert, each token keeps its `top_k`
//! highest-probability experts, and the kept probabilities are renormalized
//! into gates. The balance loss is `coeff · E · Σ_e f_e · P_e` where `f_e`
//! is the fraction of routing slots sent to expert `e` and `P_e` its mean
//! router probability; gradients flow through `P_e` only.

use crate::error::{shape_err, Result};
use crate::layers::{Module, Parameter, Projection, ProjectionCache, SwiGlu, SwiGluCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MoeLayer<T: Scalar> {
    pub router: Projection<T>,
    pub experts: Vec<SwiGlu<T>>,
    pub top_k: usize,
    pub aux_coeff: f64,
}

#[derive(Clone, Debug)]
struct ExpertCache<T: Scalar> {
    tokens: Vec<usize>,
    cache: SwiGluCache<T>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MoeCache<T: Scalar> {
    router: ProjectionCache<T>,
    probs: Tensor<T>,
    /// Per token: `(expert, gate)` for each selected expert, best first.
    routes: Vec<Vec<(usize, T)>>,
    experts: Vec<Option<ExpertCache<T>>>,
    /// `f_e`: share of the `N·k` routing slots taken by each expert.
    load: Vec<f64>,
}

impl<T: Scalar> MoeCache<T> {
    pub fn routes(&self) -> &[Vec<(usize, T)>] {
        &self.routes
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }
}

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    p
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl<T: Scalar> MoeLayer<T> {
    pub fn new(router: Projection<T>, experts: Vec<SwiGlu<T>>, top_k: usize, aux_coeff: f64) -> Result<Self> {
        if experts.is_empty() || top_k == 0 || top_k > experts.len() {
            return Err(crate::Error::InvalidConfig(format!(
                "moe needs 1 <= top_k ({top_k}) <= experts ({})",
                experts.len()
            )));
        }
        if router.out_dim() != experts.len() {
            return Err(shape_err("MoeLayer::new", experts.len(), router.out_dim()));
        }
        Ok(Self {
            router,
            experts,
            top_k,
            aux_coeff,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Returns the mixed expert output, the balance loss and the cache.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64, MoeCache<T>)> {
        let (n, d) = (x.rows(), x.cols());
        let e_count = self.experts.len();
        let (logits, router) = self.router.forward(x)?;
        let probs = softmax_rows(&logits);

        let mut routes = Vec::with_capacity(n);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); e_count];
        for t in 0..n {
            let row = probs.row(t);
            let picked = top_k(row, self.top_k);
            let total = picked.iter().fold(T::zero(), |s, &e| s + row[e]);
            routes.push(picked.iter().map(|&e| (e, row[e] / total)).collect::<Vec<_>>());
            for &e in &picked {
                assigned[e].push(t);
            }
        }

        let mut y = Tensor::zeros(&[n, d]);
        let mut experts = Vec::with_capacity(e_count);
        for (e, tokens) in assigned.into_iter().enumerate() {
            if tokens.is_empty() {
                experts.push(None);
                continue;
            }
            let mut xe = Tensor::zeros(&[tokens.len(), d]);
            for (i, &t) in tokens.iter().enumerate() {
                xe.row_mut(i).copy_from_slice(x.row(t));
            }
            let (out, cache) = self.experts[e].forward(&xe)?;
            for (i, &t) in tokens.iter().enumerate() {
                let gate = routes[t].iter().find(|r| r.0 == e).map(|r| r.1).unwrap_or(T::zero());
                for (o, &v) in y.row_mut(t).iter_mut().zip(out.row(i)) {
                    *o = *o + gate * v;
                }
            }
            experts.push(Some(ExpertCache { tokens, cache, out }));
        }

        let slots = (n * self.top_k) as f64;
        let load: Vec<f64> = experts
            .iter()
            .map(|c| c.as_ref().map_or(0.0, |c| c.tokens.len() as f64 / slots))
            .collect();
        let aux = self.aux_coeff * e_count as f64 * mean_probs(&probs).iter().zip(&load).map(|(p, f)| p * f).sum::<f64>();
        y.ensure_finite("MoeLayer::forward")?;
        Ok((
            y,
            aux,
            MoeCache {
                router,
                probs,
                routes,
                experts,
                load,
            },
        ))
    }

    /// `aux_weight` is `∂L/∂aux` (1 when the balance loss is added to the objective).
    pub fn backward(&mut self, cache: &MoeCache<T>, dy: &Tensor<T>, aux_weight: f64) -> Result<Tensor<T>> {
        let (n, d) = (dy.rows(), dy.cols());
        let e_count = self.experts.len();
        if cache.routes.len() != n {
            return Err(shape_err("MoeLayer::backward", cache.routes.len(), n));
        }
        let mut dx = Tensor::zeros(&[n, d]);
        // dgate[t][slot] aligned with routes[t]
        let mut dgate: Vec<Vec<T>> = cache.routes.iter().map(|r| vec![T::zero(); r.len()]).collect();
        for (e, ec) in cache.experts.iter().enumerate() {
            let Some(ec) = ec else { continue };
            let mut dye = Tensor::zeros(&[ec.tokens.len(), d]);
            for (i, &t) in ec.tokens.iter().enumerate() {
                let slot = cache.routes[t].iter().position(|r| r.0 == e).expect("token routed to expert");
                let gate = cache.routes[t][slot].1;
                let (dyr, outr) = (dy.row(t), ec.out.row(i));
                let mut dg = T::zero();
                for ((o, &g), &v) in dye.row_mut(i).iter_mut().zip(dyr).zip(outr) {
                    *o = gate * g;
                    dg = dg + g * v;
                }
                dgate[t][slot] = dg;
            }
            let dxe = self.experts[e].backward(&ec.cache, &dye)?;
            for (i, &t) in ec.tokens.iter().enumerate() {
                for (o, &v) in dx.row_mut(t).iter_mut().zip(dxe.row(i)) {
                    *o = *o + v;
                }
            }
        }

        let aux_scale = aux_weight * self.aux_coeff * e_count as f64 / n as f64;
        let mut dlogits = Tensor::zeros(&[n, e_count]);
        for t in 0..n {
            let p = cache.probs.row(t);
            let mut dp: Vec<T> = cache.load.iter().map(|&f| T::of(aux_scale * f)).collect();
            // gates g_i = p_i / S over the selected set
            let route = &cache.routes[t];
            let total = route.iter().fold(T::zero(), |s, r| s + p[r.0]);
            let inner = route.iter().zip(&dgate[t]).fold(T::zero(), |s, (r, &dg)| s + dg * r.1);
            for (r, &dg) in route.iter().zip(&dgate[t]) {
                dp[r.0] = dp[r.0] + (dg - inner) / total;
            }
            let dot = p.iter().zip(&dp).fold(T::zero(), |s, (&pi, &di)| s + pi * di);
            for ((o, &pi), &di) in dlogits.row_mut(t).iter_mut().zip(p).zip(&dp) {
                *o = pi * (di - dot);
            }
        }
        let dx_router = self.router.backward(&cache.router, &dlogits)?;
        dx.add_assign(&dx_router)?;
        dx.ensure_finite("MoeLayer::backward")?;
        Ok(dx)
    }
}

fn mean_probs<T: Scalar>(probs: &Tensor<T>) -> Vec<f64> {
    let (n, e) = (probs.rows(), probs.cols());
    let mut m = vec![0.0; e];
    for t in 0..n {
        for (acc, &p) in m.iter_mut().zip(probs.row(t)) {
            *acc += p.as_f64();
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

impl<T: Scalar> Module<T> for MoeLayer<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.router.visit_params(f);
        for e in &self.experts {
            e.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.router.visit_params_mut(f);
        for e in &mut self.experts {
            e.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::StandardLinear;
    use crate::tensor::{gaussian, RngState};

    fn expert(d: usize, h: usize, rng: &mut RngState) -> SwiGlu<f64> {
        let p = |o, i, rng: &mut RngState| Projection::Standard(StandardLinear::new("e", gaussian(&[o, i], 0.0, 0.3, rng)));
        SwiGlu::new(p(h, d, rng), p(h, d, rng), p(d, h, rng)).unwrap()
    }

    fn layer(d: usize, e: usize, k: usize, router_std: f64, rng: &mut RngState) -> MoeLayer<f64> {
        let router = if router_std > 0.0 {
            gaussian(&[e, d], 0.0, router_std, rng)
        } else {
            Tensor::zeros(&[e, d])
        };
        let experts = (0..e).map(|_| expert(d, 2 * d, rng)).collect();
        MoeLayer::new(Projection::Standard(StandardLinear::new("router", router)), experts, k, 0.01).unwrap()
    }

    #[test]
    fn single_expert_matches_dense() {
        let mut rng = RngState::new(1);
        let moe = layer(8, 1, 1, 0.5, &mut rng);
        let x = gaussian(&[5, 8], 0.0, 1.0, &mut rng);
        let (y, aux, _) = moe.forward(&x).unwrap();
        let (dense, _) = moe.experts[0].forward(&x).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-15);
        assert!((aux - 0.01).abs() < 1e-15);
    }

    #[test]
    fn uniform_router_balance_term() {
        let mut rng = RngState::new(2);
        let moe = layer(8, 8, 2, 0.0, &mut rng);
        let x = gaussian(&[64, 8], 0.0, 1.0, &mut rng);
        let (_, aux, cache) = moe.forward(&x).unwrap();
        assert!((aux - 0.01).abs() < 1e-12);
        for r in cache.routes() {
            let s: f64 = r.iter().map(|g| g.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_non_negative_and_normalized() {
        let mut rng = RngState::new(3);
        let moe = layer(8, 8, 3, 1.0, &mut rng);
        let x = gaussian(&[32, 8], 0.0, 1.0, &mut rng);
        let (_, _, cache) = moe.forward(&x).unwrap();
        for r in cache.routes() {
            assert_eq!(r.len(), 3);
            assert!(r.iter().all(|g| g.1 >= 0.0));
            assert!(r.windows(2).all(|w| w[0].1 >= w[1].1));
            assert!((r.iter().map(|g| g.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((cache.load().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Σ r⊙y + aux, checked on x and on the router weights.
        let mut rng = RngState::new(4);
        let mut moe = layer(6, 4, 2, 0.8, &mut rng);
        let x = gaussian(&[7, 6], 0.0, 1.0, &mut rng);
        let r = gaussian::<f64>(&[7, 6], 0.0, 1.0, &mut rng);
        let loss = |m: &MoeLayer<f64>, x: &Tensor<f64>| {
            let (y, aux, _) = m.forward(x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>() + aux
        };
        let (_, _, cache) = moe.forward(&x).unwrap();
        moe.zero_grad();
        let dx = moe.backward(&cache, &r, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&moe, &xp) - loss(&moe, &xm)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-6 * num.abs().max(1.0), "dx[{i}]: {num} vs {}", dx.data()[i]);
        }
        let grad = moe.router.weight().grad.clone();
        for i in 0..grad.len() {
            let mut p = moe.clone();
            p.router.weight_mut().value.data_mut()[i] += h;
            let mut m = moe.clone();
            m.router.weight_mut().value.data_mut()[i] -= h;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((num - grad.data()[i]).abs() < 1e-6 * num.abs().max(1.0), "router[{i}]: {num} vs {}", grad.data()[i]);
        }
    }
}

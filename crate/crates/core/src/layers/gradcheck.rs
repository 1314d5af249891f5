//! Central-difference gradient checking.
//!
//! An op is exposed as a scalar function of a flat parameter vector `θ`
//! together with its claimed gradient. Each checked coordinate is perturbed by
//! `±h` and the relative error `|a − n| / max(|a|, |n|, floor · ‖a‖_∞)` is
//! recorded. The floor ties the denominator of near-zero coordinates to the
//! gradient's own scale: at `h = 1e-5` the central difference carries an
//! absolute round-off of roughly `ε·|L|/h`, which would otherwise dominate
//! coordinates many orders of magnitude below the largest one.

use serde::Serialize;

use super::{
    cross_entropy, fc_backward, fc_forward, sdd_backward_closed_form, sdd_backward_composed, sdd_forward, Attention,
    Module, Projection, SddLinear, StandardLinear, SwiGlu,
};
use crate::exec;
use crate::tensor::{gaussian, rms, RngState, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-3;
/// Denominator floor used when the whole gradient is zero.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;
pub const DEFAULT_MAX_COORDS: usize = 512;

/// A differentiable scalar function of a flat parameter vector.
pub trait GradientOracle: Sync {
    fn name(&self) -> &str;

    fn point(&self) -> &[f64];

    /// `None` marks a degenerate point (e.g. a zero vector under ε = 0).
    fn loss(&self, theta: &[f64]) -> Option<f64>;

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative to the largest analytic gradient entry.
    pub floor: f64,
    /// Coordinates beyond this count are subsampled without replacement.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: 1e-6,
            floor: DEFAULT_FLOOR,
            max_coords: DEFAULT_MAX_COORDS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub dim: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    pub coordinates: Vec<CoordinateError>,
    pub tol: f64,
    pub passed: bool,
    pub skipped: bool,
}

pub fn grad_check(op: &dyn GradientOracle, opts: &GradCheckOptions) -> CheckReport {
    let theta = op.point();
    let skipped = |name: &str| CheckReport {
        name: name.to_string(),
        dim: theta.len(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        coordinates: Vec::new(),
        tol: opts.tol,
        passed: true,
        skipped: true,
    };
    let Some(analytic) = op.gradient(theta) else {
        return skipped(op.name());
    };
    assert_eq!(analytic.len(), theta.len(), "{}: gradient length", op.name());

    let mut coords: Vec<usize> = (0..theta.len()).collect();
    if coords.len() > opts.max_coords {
        let mut rng = RngState::new(opts.seed);
        for i in 0..opts.max_coords {
            let j = i + rng.below(coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(opts.max_coords);
        coords.sort_unstable();
    }

    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (opts.floor * scale).max(ABSOLUTE_FLOOR);
    let mut out = Vec::with_capacity(coords.len());
    for &i in &coords {
        let mut t = theta.to_vec();
        t[i] = theta[i] + opts.step;
        let plus = op.loss(&t);
        t[i] = theta[i] - opts.step;
        let minus = op.loss(&t);
        let (Some(p), Some(m)) = (plus, minus) else {
            return skipped(op.name());
        };
        let numeric = (p - m) / (2.0 * opts.step);
        let a = analytic[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        out.push(CoordinateError {
            index: i,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let worst = out.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    CheckReport {
        name: op.name().to_string(),
        dim: theta.len(),
        checked: out.len(),
        max_rel_error,
        worst,
        coordinates: out,
        tol: opts.tol,
        passed: max_rel_error < opts.tol,
        skipped: false,
    }
}

type LossFn = Box<dyn Fn(&[f64]) -> Option<f64> + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Option<Vec<f64>> + Sync>;

/// Oracle assembled from closures.
pub struct FnOracle {
    pub name: String,
    pub point: Vec<f64>,
    pub loss: LossFn,
    pub grad: GradFn,
}

impl GradientOracle for FnOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn loss(&self, theta: &[f64]) -> Option<f64> {
        (self.loss)(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        (self.grad)(theta)
    }
}

/// Wraps an oracle and perturbs one gradient coordinate.
pub struct Corrupted<O> {
    pub inner: O,
    pub index: usize,
    pub delta: f64,
}

impl<O: GradientOracle> GradientOracle for Corrupted<O> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn point(&self) -> &[f64] {
        self.inner.point()
    }

    fn loss(&self, theta: &[f64]) -> Option<f64> {
        self.inner.loss(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut g = self.inner.gradient(theta)?;
        g[self.index] += self.delta;
        Some(g)
    }
}

/// Layer types covered by the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Fc,
    Sdd,
    SddComposed,
    Attention,
    AttentionSdd,
    SwiGlu,
    SwiGluSdd,
    CrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Fc,
        LayerKind::Sdd,
        LayerKind::SddComposed,
        LayerKind::Attention,
        LayerKind::AttentionSdd,
        LayerKind::SwiGlu,
        LayerKind::SwiGluSdd,
        LayerKind::CrossEntropy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Fc => "fc",
            LayerKind::Sdd => "sdd",
            LayerKind::SddComposed => "sdd_composed",
            LayerKind::Attention => "attention",
            LayerKind::AttentionSdd => "attention_sdd",
            LayerKind::SwiGlu => "swiglu",
            LayerKind::SwiGluSdd => "swiglu_sdd",
            LayerKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.label() == s)
    }
}

/// Splits a flat vector into consecutive tensors of the given shapes.
fn unpack(theta: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_parts(s.clone(), theta[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

fn pack(parts: &[&Tensor<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn sample(shapes: &[Vec<usize>], std: &[f64], rng: &mut RngState) -> Vec<f64> {
    shapes
        .iter()
        .zip(std)
        .flat_map(|(s, &sd)| gaussian::<f64>(s, 0.0, sd, rng).into_data())
        .collect()
}

/// Projection with weights taken from a flat slice.
fn projection(sdd: bool, name: &str, w: Tensor<f64>, alpha: Option<Tensor<f64>>) -> Projection<f64> {
    if sdd {
        let alpha = alpha.expect("sdd projection needs alpha");
        Projection::Sdd(SddLinear::new(name, w, alpha, 0.0).expect("shapes checked by caller"))
    } else {
        Projection::Standard(StandardLinear::new(name, w))
    }
}

fn projection_grads(p: &Projection<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit_params(&mut |q| out.extend_from_slice(q.grad.data()));
    out
}

fn min_row_rms(t: &Tensor<f64>) -> f64 {
    (0..t.rows()).map(|r| rms(t.row(r))).fold(f64::INFINITY, f64::min)
}

/// Builds a random instance of `kind` at size `n` with loss `Σ r ⊙ f(θ)`.
pub fn layer_instance(kind: LayerKind, n: usize, rng: &mut RngState) -> FnOracle {
    let name = format!("{}/n={n}", kind.label());
    match kind {
        LayerKind::Fc => {
            let batch = 3;
            let shapes = vec![vec![batch, n], vec![n, n]];
            let point = sample(&shapes, &[1.0, 1.0 / (n as f64).sqrt()], rng);
            let r = gaussian::<f64>(&[batch, n], 0.0, 1.0, rng);
            let (s1, r1) = (shapes.clone(), r.clone());
            FnOracle {
                name,
                point,
                loss: Box::new(move |th| {
                    let p = unpack(th, &s1);
                    let y = fc_forward(&StandardLinear::new("fc", p[1].clone()), &p[0]).ok()?;
                    Some(y.hadamard(&r1).ok()?.sum())
                }),
                grad: Box::new(move |th| {
                    let p = unpack(th, &shapes);
                    let (dw, dx) = fc_backward(&StandardLinear::new("fc", p[1].clone()), &p[0], &r).ok()?;
                    Some(pack(&[&dx, &dw]))
                }),
            }
        }
        LayerKind::Sdd | LayerKind::SddComposed => {
            let batch = 3;
            let shapes = vec![vec![batch, n], vec![n, n], vec![n]];
            let mut point = sample(&shapes, &[1.0, 1.0 / (2.5 * n as f64).sqrt(), 0.5], rng);
            let a0 = batch * n + n * n;
            for a in &mut point[a0..] {
                *a += 1.0;
            }
            let r = gaussian::<f64>(&[batch, n], 0.0, 1.0, rng);
            let composed = kind == LayerKind::SddComposed;
            let (s1, r1) = (shapes.clone(), r.clone());
            let layer_of = |p: &[Tensor<f64>]| SddLinear::new("sdd", p[1].clone(), p[2].clone(), 0.0).ok();
            FnOracle {
                name,
                point,
                loss: Box::new(move |th| {
                    let p = unpack(th, &s1);
                    let (y, c) = sdd_forward(&layer_of(&p)?, &p[0]).ok()?;
                    if min_row_rms(&c.z) < 1e-6 {
                        return None;
                    }
                    Some(y.hadamard(&r1).ok()?.sum())
                }),
                grad: Box::new(move |th| {
                    let p = unpack(th, &shapes);
                    let layer = layer_of(&p)?;
                    let (_, c) = sdd_forward(&layer, &p[0]).ok()?;
                    if min_row_rms(&c.z) < 1e-6 {
                        return None;
                    }
                    let g = if composed {
                        sdd_backward_composed(&layer, &p[0], &r).ok()?
                    } else {
                        sdd_backward_closed_form(&layer, &c, &r).ok()?
                    };
                    Some(pack(&[&g.dx, &g.dv, &g.dalpha]))
                }),
            }
        }
        LayerKind::Attention | LayerKind::AttentionSdd => {
            let sdd = kind == LayerKind::AttentionSdd;
            let (heads, kv) = match n {
                0..=4 => (2, 1),
                5..=16 => (4, 2),
                _ => (8, 2),
            };
            let (seq, batch) = (8, 2);
            let width = n + 2 * kv * (n / heads);
            let mut shapes = vec![vec![batch * seq, n], vec![width, n], vec![n, n]];
            let mut std = vec![1.0, 1.0 / (n as f64).sqrt(), 1.0 / (n as f64).sqrt()];
            if sdd {
                shapes.extend([vec![width], vec![n]]);
                std.extend([0.3, 0.3]);
            }
            let point = sample(&shapes, &std, rng);
            let r = gaussian::<f64>(&[batch * seq, n], 0.0, 1.0, rng);
            let build = move |p: &[Tensor<f64>]| {
                let (a1, a2) = if sdd {
                    (Some(p[3].map("", |a| a + 1.0).ok()?), Some(p[4].map("", |a| a + 1.0).ok()?))
                } else {
                    (None, None)
                };
                Attention::new(
                    projection(sdd, "att_proj", p[1].clone(), a1),
                    projection(sdd, "attn_out", p[2].clone(), a2),
                    heads,
                    kv,
                    seq,
                )
                .ok()
            };
            let (s1, r1) = (shapes.clone(), r.clone());
            FnOracle {
                name,
                point,
                loss: Box::new(move |th| {
                    let p = unpack(th, &s1);
                    let (y, _) = build(&p)?.forward(&p[0], seq).ok()?;
                    Some(y.hadamard(&r1).ok()?.sum())
                }),
                grad: Box::new(move |th| {
                    let p = unpack(th, &shapes);
                    let mut att = build(&p)?;
                    let (_, cache) = att.forward(&p[0], seq).ok()?;
                    let dx = att.backward(&cache, &r).ok()?;
                    let mut g = dx.into_data();
                    let (gp, go) = (projection_grads(&att.att_proj), projection_grads(&att.attn_out));
                    if sdd {
                        let (wp, wo) = (width * n, n * n);
                        g.extend_from_slice(&gp[..wp]);
                        g.extend_from_slice(&go[..wo]);
                        g.extend_from_slice(&gp[wp..]);
                        g.extend_from_slice(&go[wo..]);
                    } else {
                        g.extend(gp);
                        g.extend(go);
                    }
                    Some(g)
                }),
            }
        }
        LayerKind::SwiGlu | LayerKind::SwiGluSdd => {
            let sdd = kind == LayerKind::SwiGluSdd;
            let (batch, hidden) = (3, 2 * n);
            let mut shapes = vec![vec![batch, n], vec![hidden, n], vec![hidden, n], vec![n, hidden]];
            let s = 1.0 / (n as f64).sqrt();
            let mut std = vec![1.0, s, s, 1.0 / (hidden as f64).sqrt()];
            if sdd {
                shapes.extend([vec![hidden], vec![hidden], vec![n]]);
                std.extend([0.3, 0.3, 0.3]);
            }
            let point = sample(&shapes, &std, rng);
            let r = gaussian::<f64>(&[batch, n], 0.0, 1.0, rng);
            let build = move |p: &[Tensor<f64>]| {
                let alpha = |i: usize| if sdd { p[i].map("", |a| a + 1.0).ok() } else { None };
                SwiGlu::new(
                    projection(sdd, "gate", p[1].clone(), alpha(4)),
                    projection(sdd, "up", p[2].clone(), alpha(5)),
                    projection(sdd, "down", p[3].clone(), alpha(6)),
                )
                .ok()
            };
            let (s1, r1) = (shapes.clone(), r.clone());
            FnOracle {
                name,
                point,
                loss: Box::new(move |th| {
                    let p = unpack(th, &s1);
                    let (y, _) = build(&p)?.forward(&p[0]).ok()?;
                    Some(y.hadamard(&r1).ok()?.sum())
                }),
                grad: Box::new(move |th| {
                    let p = unpack(th, &shapes);
                    let mut ffn = build(&p)?;
                    let (_, cache) = ffn.forward(&p[0]).ok()?;
                    let dx = ffn.backward(&cache, &r).ok()?;
                    let mut g = dx.into_data();
                    let parts = [&ffn.gate, &ffn.up, &ffn.down].map(projection_grads);
                    let wlen = [hidden * n, hidden * n, n * hidden];
                    for (pg, &w) in parts.iter().zip(&wlen) {
                        g.extend_from_slice(&pg[..w]);
                    }
                    if sdd {
                        for (pg, &w) in parts.iter().zip(&wlen) {
                            g.extend_from_slice(&pg[w..]);
                        }
                    }
                    Some(g)
                }),
            }
        }
        LayerKind::CrossEntropy => {
            let batch = 4;
            let shapes = vec![vec![batch, n]];
            let point = sample(&shapes, &[2.0], rng);
            let targets: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
            let t1 = targets.clone();
            FnOracle {
                name,
                point,
                loss: Box::new(move |th| {
                    let p = unpack(th, &[vec![batch, n]]);
                    cross_entropy(&p[0], &t1).ok().map(|(l, _)| l)
                }),
                grad: Box::new(move |th| {
                    let p = unpack(th, &[vec![batch, n]]);
                    cross_entropy(&p[0], &targets).ok().map(|(_, d)| d.into_data())
                }),
            }
        }
    }
}

/// Runs `instances` random checks for each `(kind, n)`; independent instances
/// run in parallel with per-instance seeds.
pub fn run_suite(kinds: &[LayerKind], sizes: &[usize], instances: usize, opts: &GradCheckOptions) -> Vec<CheckReport> {
    let jobs: Vec<(LayerKind, usize, usize)> = kinds
        .iter()
        .flat_map(|&k| sizes.iter().flat_map(move |&n| (0..instances).map(move |i| (k, n, i))))
        .collect();
    let root = RngState::new(opts.seed);
    exec::map_indices(jobs.len(), |j| {
        let (kind, n, i) = jobs[j];
        let mut rng = root.split(j as u64);
        let op = layer_instance(kind, n, &mut rng);
        let mut report = grad_check(&op, &GradCheckOptions { seed: rng.next_u64(), ..*opts });
        report.name = format!("{}#{i}", report.name);
        report
    })
}

/// Largest relative disagreement between the projector and tape gradients of
/// one random SDD instance: `max_t ‖a_t − b_t‖_max / ‖b_t‖_max` over
/// `t ∈ {dV, dα, dx}`.
pub fn sdd_dual_derivation_error(n: usize, rng: &mut RngState) -> f64 {
    let batch = 3;
    let v = gaussian::<f64>(&[n, n], 0.0, 1.0 / (2.5 * n as f64).sqrt(), rng);
    let alpha = gaussian::<f64>(&[n], 1.0, 0.5, rng);
    let layer = SddLinear::new("sdd", v, alpha, 0.0).expect("square");
    let x = gaussian::<f64>(&[batch, n], 0.0, 1.0, rng);
    let dy = gaussian::<f64>(&[batch, n], 0.0, 1.0, rng);
    let (_, cache) = sdd_forward(&layer, &x).expect("gaussian input is non-degenerate");
    let a = sdd_backward_closed_form(&layer, &cache, &dy).expect("matching cache");
    let b = sdd_backward_composed(&layer, &x, &dy).expect("matching shapes");
    [(&a.dv, &b.dv), (&a.dalpha, &b.dalpha), (&a.dx, &b.dx)]
        .iter()
        .map(|(p, q)| p.max_abs_diff(q) / q.max_abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

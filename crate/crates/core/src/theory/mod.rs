//! Monte-Carlo checks of the SDD equivalence construction and of the
//! gradient properties of `y = α ⊙ norm(Vx)`.
//!
//! All experiments run in `f64`. Trials are independent and run in parallel;
//! trial `t` draws its inputs from `rng.split(t)`, so results do not depend on
//! scheduling.

pub mod stats;

use serde::Serialize;

use crate::error::Result;
use crate::exec;
use crate::layers::{fc_backward, sdd_backward_closed_form, sdd_forward, SddLinear, StandardLinear};
use crate::tensor::{gaussian, rms, rms_norm, svd, RngState, Tensor};

pub use stats::{to_csv, TrialStats, CSV_HEADER};

/// Streams `DRAW_STREAM + d` seed shared matrix draws; streams below are per trial.
const DRAW_STREAM: u64 = 1 << 40;

/// Matrix draws shared by `trials` equivalence trials at width `n`:
/// `clamp(round(trials·(64/n)²), 1, trials)`. A 1024-wide Jacobi SVD takes
/// seconds, so large widths reuse a few matrices while every trial still
/// draws a fresh input.
pub fn equivalence_draws(n: usize, trials: usize) -> usize {
    let r = trials as f64 * (64.0 / n as f64).powi(2);
    (r.round() as usize).clamp(1, trials.max(1))
}

/// `W = U · diag(α) · V` with `α` the singular values of `W`.
#[derive(Clone, Debug)]
pub struct DecompositionResult {
    pub alpha: Vec<f64>,
    pub v: Tensor<f64>,
    pub u: Tensor<f64>,
    pub source_w: Tensor<f64>,
}

pub fn decompose_to_sdd(w: &Tensor<f64>) -> Result<DecompositionResult> {
    let s = svd(w)?;
    Ok(DecompositionResult {
        alpha: s.sigma,
        v: s.v_t,
        u: s.u,
        source_w: w.clone(),
    })
}

/// Rows of `x` mapped through `m`: returns `x · mᵀ`.
fn apply(m: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    x.matmul_nt(m).expect("finite operands of matching width")
}

fn scale_cols(t: &mut Tensor<f64>, s: &[f64]) {
    for r in 0..t.rows() {
        for (v, &c) in t.row_mut(r).iter_mut().zip(s) {
            *v *= c;
        }
    }
}

fn rms_norm_rows(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        out.extend(rms_norm(t.row(r), 0.0)?);
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn rel_err_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let (num, den) = a.row(r).iter().zip(b.row(r)).fold((0.0, 0.0), |(n, d), (&x, &y)| (n + (x - y) * (x - y), d + y * y));
            (num / den).sqrt()
        })
        .collect()
}

impl DecompositionResult {
    pub fn reconstruct(&self) -> Tensor<f64> {
        let mut u = self.u.clone();
        scale_cols(&mut u, &self.alpha);
        u.matmul(&self.v).expect("square factors")
    }

    /// `U · (α ⊙ rms_norm(V x))` for each row `x`.
    pub fn sdd_output(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = rms_norm_rows(&apply(&self.v, x))?;
        scale_cols(&mut z, &self.alpha);
        Ok(apply(&self.u, &z))
    }

    /// `‖Wx − U(α ⊙ norm(Vx))‖ / ‖Wx‖` for each row `x`.
    pub fn forward_errors(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok(rel_err_rows(&self.sdd_output(x)?, &apply(&self.source_w, x)))
    }
}

/// `W = α ⊙ P (Λ/‖Λ‖) Qᵀ` for `V = P Λ Qᵀ`, `‖Λ‖ = √(Σγᵢ²/n)`.
pub fn reverse_construction(alpha: &[f64], v: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = svd(v)?;
    let lam = (s.sigma.iter().map(|g| g * g).sum::<f64>() / s.sigma.len() as f64).sqrt();
    let mut p = s.u;
    let scaled: Vec<f64> = s.sigma.iter().map(|g| g / lam).collect();
    scale_cols(&mut p, &scaled);
    let mut w = p.matmul(&s.v_t)?;
    for (r, &a) in alpha.iter().enumerate() {
        w.row_mut(r).iter_mut().for_each(|v| *v *= a);
    }
    Ok(w)
}

/// `‖Wx − α ⊙ norm(Vx)‖ / ‖α ⊙ norm(Vx)‖` for each row `x`.
pub fn reverse_errors(w: &Tensor<f64>, alpha: &[f64], v: &Tensor<f64>, x: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut y = rms_norm_rows(&apply(v, x))?;
    scale_cols(&mut y, alpha);
    Ok(rel_err_rows(&apply(w, x), &y))
}

/// Runs `draws` matrix draws in parallel; draw `d` serves trials `t ≡ d (mod draws)`,
/// whose inputs come from `rng.split(t)`.
fn shared_draw_trials<F>(n: usize, trials: usize, rng: &RngState, per_draw: F) -> Result<Vec<f64>>
where
    F: Fn(&mut RngState, &Tensor<f64>) -> Result<Vec<f64>> + Sync,
{
    let draws = equivalence_draws(n, trials);
    let results = exec::map_indices(draws, |d| {
        let mine: Vec<usize> = (d..trials).step_by(draws).collect();
        let mut xs = Vec::with_capacity(mine.len() * n);
        for &t in &mine {
            xs.extend(rng.split(t as u64).normal_vec(n));
        }
        let x = Tensor::new(vec![mine.len(), n], xs)?;
        let mut draw_rng = rng.split(DRAW_STREAM + d as u64);
        Ok::<_, crate::Error>((mine, per_draw(&mut draw_rng, &x)?))
    });
    let mut values = vec![0.0; trials];
    for r in results {
        let (idx, v) = r?;
        for (i, e) in idx.into_iter().zip(v) {
            values[i] = e;
        }
    }
    Ok(values)
}

/// Standard deviation scale of `W ~ N(0, σ²/n)` in the equivalence trials.
pub const EQUIVALENCE_SIGMA: f64 = 1.0;

/// `W ~ N(0, σ²/n)`, `x ~ N(0, I)`; relative error of the SDD representation
/// built from the SVD of `W`.
pub fn forward_equivalence_error(n: usize, trials: usize, rng: &RngState) -> Result<TrialStats> {
    let values = shared_draw_trials(n, trials, rng, |r, x| {
        let w = gaussian(&[n, n], 0.0, EQUIVALENCE_SIGMA / (n as f64).sqrt(), r);
        decompose_to_sdd(&w)?.forward_errors(x)
    })?;
    Ok(TrialStats::from_values("forward_equivalence", n, rng.seed(), values))
}

/// `α ~ N(0, 1)`, `V ~ N(0, 1/n)`, `x ~ N(0, I)`; relative error of the
/// reconstructed `W` against the SDD output.
pub fn reverse_equivalence_error(n: usize, trials: usize, rng: &RngState) -> Result<TrialStats> {
    let values = shared_draw_trials(n, trials, rng, |r, x| {
        let alpha = r.normal_vec(n);
        let v = gaussian(&[n, n], 0.0, 1.0 / (n as f64).sqrt(), r);
        let w = reverse_construction(&alpha, &v)?;
        reverse_errors(&w, &alpha, &v, x)
    })?;
    Ok(TrialStats::from_values("reverse_equivalence", n, rng.seed(), values))
}

/// RMS of `x ~ N(0, I_n)`.
pub fn rms_concentration(n: usize, trials: usize, rng: &RngState) -> TrialStats {
    let values = exec::map_indices(trials, |t| rms(&rng.split(t as u64).normal_vec(n)));
    TrialStats::from_values("rms_concentration", n, rng.seed(), values)
}

/// SDD init standard deviation `1/√(2.5·n)`.
fn init_std(n: usize) -> f64 {
    1.0 / (2.5 * n as f64).sqrt()
}

fn row(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![1, n], v).expect("finite samples")
}

/// `‖∂L/∂x‖ / ‖∂L/∂y‖` through one SDD layer (α = 1, eps = 0).
pub fn sdd_gradient_ratio(v: &Tensor<f64>, x: &[f64], dy: &[f64]) -> Result<f64> {
    let layer = SddLinear::with_constant_alpha("probe", v.clone(), 1.0, 0.0)?;
    let (_, cache) = sdd_forward(&layer, &row(x.to_vec()))?;
    let dyt = row(dy.to_vec());
    let g = sdd_backward_closed_form(&layer, &cache, &dyt)?;
    Ok(g.dx.frobenius_norm() / dyt.frobenius_norm())
}

/// SDD layer at the initialization recipe (`α = 1`, `V ~ N(0, 1/(2.5n))`),
/// Gaussian input and upstream gradient.
pub fn norm_preservation(n: usize, trials: usize, rng: &RngState) -> Result<TrialStats> {
    let values = exec::map_indices(trials, |t| {
        let mut r = rng.split(t as u64);
        let v = gaussian(&[n, n], 0.0, init_std(n), &mut r);
        let (x, dy) = (r.normal_vec(n), r.normal_vec(n));
        sdd_gradient_ratio(&v, &x, &dy)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrialStats::from_values("norm_preservation", n, rng.seed(), values))
}

/// Contrast: a plain linear layer with `W ~ N(0, (mult/√(2.5n))²)`; the
/// ratio grows linearly with `mult`.
pub fn norm_preservation_fc(n: usize, trials: usize, w_std_mult: f64, rng: &RngState) -> Result<TrialStats> {
    let values = exec::map_indices(trials, |t| {
        let mut r = rng.split(t as u64);
        let w = gaussian(&[n, n], 0.0, init_std(n) * w_std_mult, &mut r);
        let (x, dy) = (row(r.normal_vec(n)), row(r.normal_vec(n)));
        let (_, dx) = fc_backward(&StandardLinear::new("probe", w), &x, &dy)?;
        Ok(dx.frobenius_norm() / dy.frobenius_norm())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrialStats::from_values(format!("norm_preservation_fc_x{w_std_mult}"), n, rng.seed(), values))
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingPoint {
    pub scale: f64,
    pub stats: TrialStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct FrobeniusScaling {
    pub n: usize,
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln mean‖dV‖` against `ln c`.
    pub slope: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// `‖∂L/∂V‖` for `V = c·V₀` over `scales` (eps = 0, α = 1).
pub fn frobenius_scaling(n: usize, scales: &[f64], trials: usize, rng: &RngState) -> Result<FrobeniusScaling> {
    let per_trial = exec::map_indices(trials, |t| {
        let mut r = rng.split(t as u64);
        let v0 = gaussian(&[n, n], 0.0, init_std(n), &mut r);
        let (x, dy) = (row(r.normal_vec(n)), row(r.normal_vec(n)));
        scales
            .iter()
            .map(|&c| {
                let layer = SddLinear::with_constant_alpha("probe", v0.scale(c)?, 1.0, 0.0)?;
                let (_, cache) = sdd_forward(&layer, &x)?;
                Ok(sdd_backward_closed_form(&layer, &cache, &dy)?.dv.frobenius_norm())
            })
            .collect::<Result<Vec<f64>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let points: Vec<ScalingPoint> = scales
        .iter()
        .enumerate()
        .map(|(i, &c)| ScalingPoint {
            scale: c,
            stats: TrialStats::from_values(format!("frobenius_scaling_c{c}"), n, rng.seed(), per_trial.iter().map(|v| v[i]).collect()),
        })
        .collect();
    let lx: Vec<f64> = points.iter().map(|p| p.scale.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.stats.mean.ln()).collect();
    Ok(FrobeniusScaling {
        n,
        slope: fit_slope(&lx, &ly),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_schedule() {
        assert_eq!(equivalence_draws(64, 200), 200);
        assert_eq!(equivalence_draws(256, 200), 13);
        assert_eq!(equivalence_draws(1024, 200), 1);
        assert_eq!(equivalence_draws(16, 200), 200);
    }

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = [0.5f64, 1.0, 2.0, 4.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - v).collect();
        assert!((fit_slope(&x, &y) + 1.0).abs() < 1e-14);
    }
}

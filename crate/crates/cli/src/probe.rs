//! Probes of a model at a fixed point: per-layer gradient-norm profiles and
//! layer-wise hidden-state similarity.

use sdd_core::layers::{cross_entropy, Module};
use sdd_core::model::{GradNormProfile, ModelConfig, TransformerModel, GROUPS};
use sdd_core::tensor::rng::derive_seed;
use sdd_core::train::Dataset;
use sdd_core::{RngState, Scalar, Tensor};
use serde::Serialize;

use crate::error::Result;

/// Stream of the probe-batch sampler, distinct from the trainer's.
const PROBE_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug)]
pub struct ProbeShape {
    pub batches: usize,
    pub batch: usize,
    pub seq: usize,
    pub zero_upstream: bool,
}

/// Gradient norms at initialization averaged over `batches` probe batches for
/// each seed, then over seeds. The seed sets both the initialization and the
/// probe batches.
pub fn gradnorm_profile(model: &ModelConfig, data: &Dataset, seeds: &[u64], shape: ProbeShape) -> Result<GradNormProfile> {
    let mut sum = vec![[0.0f64; 4]; model.layers];
    let runs = (seeds.len() * shape.batches) as f64;
    for &seed in seeds {
        let cfg = ModelConfig {
            init_seed: seed,
            ..model.clone()
        };
        let mut m = TransformerModel::<f64>::build(&cfg)?;
        let mut rng = RngState::new(derive_seed(seed, PROBE_STREAM));
        for _ in 0..shape.batches {
            let b = data.sample_batch(shape.batch, shape.seq, &mut rng);
            m.zero_grad();
            let profile = if shape.zero_upstream {
                let pass = m.forward(&b.tokens, b.batch, true)?;
                let zeros = Tensor::zeros(pass.logits.shape());
                m.backward_weighted(&pass, &zeros, 0.0)?
            } else {
                m.loss_and_backward(&b.tokens, &b.targets, b.batch)?.1
            };
            for (acc, layer) in sum.iter_mut().zip(&profile.layers) {
                for g in 0..4 {
                    acc[g] += layer[g];
                }
            }
        }
    }
    Ok(GradNormProfile {
        layers: sum.into_iter().map(|l| l.map(|v| v / runs)).collect(),
    })
}

pub const GRADNORM_HEADER: &str = "layer,group,norm";

pub fn gradnorm_csv(profile: &GradNormProfile) -> String {
    let mut out = format!("{GRADNORM_HEADER}\n");
    for (layer, group, norm) in profile.entries() {
        out.push_str(&format!("{layer},{group},{norm}\n"));
    }
    out
}

/// Spread (max/min over layers) of each group.
pub fn spreads(profile: &GradNormProfile) -> [f64; 4] {
    std::array::from_fn(|g| profile.spread(g))
}

pub fn group_names() -> [&'static str; 4] {
    GROUPS
}

/// Mean token-wise cosine similarity between layer hidden states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub layers: usize,
    pub values: Vec<Vec<f64>>,
    pub tokens: usize,
}

impl SimilarityMatrix {
    /// Mean of the `(i, i+1)` entries; `None` for a single layer.
    pub fn adjacent_mean(&self) -> Option<f64> {
        (self.layers > 1).then(|| (0..self.layers - 1).map(|i| self.values[i][i + 1]).sum::<f64>() / (self.layers - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for j in 0..self.layers {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Sums pairwise cosines over successive probe passes.
pub struct SimilarityAccumulator {
    layers: usize,
    sums: Vec<Vec<f64>>,
    tokens: usize,
}

impl SimilarityAccumulator {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            sums: vec![vec![0.0; layers]; layers],
            tokens: 0,
        }
    }

    /// `hidden[l]` holds one row per token.
    pub fn add<T: Scalar>(&mut self, hidden: &[Tensor<T>]) {
        assert_eq!(hidden.len(), self.layers, "one hidden state per layer");
        let rows: Vec<Vec<Vec<f64>>> = hidden
            .iter()
            .map(|h| (0..h.rows()).map(|r| h.row(r).iter().map(|v| v.as_f64()).collect()).collect())
            .collect();
        let tokens = rows[0].len();
        for i in 0..self.layers {
            for j in i + 1..self.layers {
                let s: f64 = (0..tokens).map(|t| cosine(&rows[i][t], &rows[j][t])).sum();
                self.sums[i][j] += s;
            }
        }
        self.tokens += tokens;
    }

    /// Symmetric by construction, unit diagonal, entries in `[−1, 1]`.
    pub fn finish(&self) -> SimilarityMatrix {
        let l = self.layers;
        let mut values = vec![vec![1.0; l]; l];
        for i in 0..l {
            for j in i + 1..l {
                let v = (self.sums[i][j] / self.tokens.max(1) as f64).clamp(-1.0, 1.0);
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        SimilarityMatrix {
            layers: l,
            values,
            tokens: self.tokens,
        }
    }
}

/// Similarity over `tokens` validation tokens split into windows of `seq`.
pub fn similarity<T: Scalar>(model: &TransformerModel<T>, data: &Dataset, tokens: usize, seq: usize) -> Result<SimilarityMatrix> {
    let windows = tokens.div_ceil(seq);
    let mut acc = SimilarityAccumulator::new(model.config.layers);
    for b in data.validation_batches(windows, 1, seq) {
        let pass = model.forward(&b.tokens, b.batch, true)?;
        let hidden = pass.hidden.as_ref().expect("capture requested");
        acc.add(hidden);
    }
    Ok(acc.finish())
}

/// Cross-entropy at initialization on one probe batch (a training sanity value).
pub fn initial_loss(model: &ModelConfig, data: &Dataset, batch: usize, seq: usize) -> Result<f64> {
    let m = TransformerModel::<f64>::build(model)?;
    let b = data.sample_batch(batch, seq, &mut RngState::new(derive_seed(model.init_seed, PROBE_STREAM)));
    let pass = m.forward(&b.tokens, b.batch, false)?;
    Ok(cross_entropy(&pass.logits, &b.targets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_layers_are_fully_similar() {
        let mut rng = RngState::new(1);
        let h = sdd_core::tensor::gaussian::<f64>(&[10, 6], 0.0, 1.0, &mut rng);
        let mut acc = SimilarityAccumulator::new(3);
        acc.add(&[h.clone(), h.clone(), h]);
        let m = acc.finish();
        assert!(m.values.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(m.adjacent_mean().map(|v| (v - 1.0).abs() < 1e-12), Some(true));
    }

    #[test]
    fn single_layer_matrix() {
        let mut acc = SimilarityAccumulator::new(1);
        acc.add(&[Tensor::<f64>::full(&[4, 3], 0.5)]);
        let m = acc.finish();
        assert_eq!(m.values, vec![vec![1.0]]);
        assert_eq!(m.adjacent_mean(), None);
        assert_eq!(m.to_csv(), "layer,0\n0,1\n");
    }

    #[test]
    fn opposite_and_orthogonal() {
        let a: Tensor<f64> = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        let b: Tensor<f64> = Tensor::from_rows(&[&[-3.0, 0.0], &[0.0, -1.0]]).unwrap();
        let c: Tensor<f64> = Tensor::from_rows(&[&[0.0, 1.0], &[5.0, 0.0]]).unwrap();
        let mut acc = SimilarityAccumulator::new(3);
        acc.add(&[a, b, c]);
        let m = acc.finish();
        assert_eq!(m.values[0][1], -1.0);
        assert_eq!(m.values[0][2], 0.0);
        assert_eq!(m.values[1][0], m.values[0][1]);
    }
}

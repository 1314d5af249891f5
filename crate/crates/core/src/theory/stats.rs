//! Summary statistics of Monte-Carlo trials.

use serde::{Deserialize, Serialize};

/// Header of the CSV produced by [`to_csv`].
pub const CSV_HEADER: &str = "experiment,n,trials,mean,median,stddev,q05,q95,seed";

/// `stddev` is the sample standard deviation (n − 1 denominator, 0 for a
/// single trial); quantiles interpolate linearly between order statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub experiment: String,
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
    pub q05: f64,
    pub q95: f64,
    pub values: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl TrialStats {
    pub fn from_values(experiment: impl Into<String>, n: usize, seed: u64, values: Vec<f64>) -> Self {
        let k = values.len();
        let mean = values.iter().sum::<f64>() / k as f64;
        let stddev = if k > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            experiment: experiment.into(),
            n,
            trials: k,
            seed,
            mean,
            median: quantile(&sorted, 0.5),
            stddev,
            q05: quantile(&sorted, 0.05),
            q95: quantile(&sorted, 0.95),
            values,
        }
    }

    /// Share of values inside `[lo, hi]`.
    pub fn fraction_within(&self, lo: f64, hi: f64) -> f64 {
        self.values.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / self.trials as f64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.experiment, self.n, self.trials, self.mean, self.median, self.stddev, self.q05, self.q95, self.seed
        )
    }
}

pub fn to_csv(stats: &[TrialStats]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_matches_hand_computation() {
        let s = TrialStats::from_values("t", 3, 0, vec![4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert!((s.stddev - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.q05 - 1.15).abs() < 1e-12);
        assert!((s.q95 - 3.85).abs() < 1e-12);
        assert_eq!(s.fraction_within(2.0, 3.0), 0.5);
    }

    #[test]
    fn single_value() {
        let s = TrialStats::from_values("t", 1, 0, vec![7.0]);
        assert_eq!((s.mean, s.median, s.stddev, s.q05, s.q95), (7.0, 7.0, 0.0, 7.0, 7.0));
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[TrialStats::from_values("e", 2, 9, vec![1.0, 3.0])]);
        assert_eq!(csv, "experiment,n,trials,mean,median,stddev,q05,q95,seed\ne,2,2,2,2,1.4142135623730951,1.1,2.9,9\n");
    }
}

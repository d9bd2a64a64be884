//! Per-metric curve export: one CSV per config with a column per seed plus
//! mean/std columns over seeds.

use anyhow::{ensure, Context, Result};
use depthgate::metrics::mean_std;
use std::path::{Path, PathBuf};

/// Trailing rolling mean: element i averages the last `window` values up to
/// and including i (fewer at the start). A constant series is unchanged.
pub fn rolling_mean(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "rolling window must be positive");
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i.min(window - 1) + 1) as f64);
    }
    out
}

/// One metric's curves for a single config: a shared step axis and one
/// series per seed, all the same length.
pub struct SeriesSet {
    pub steps: Vec<usize>,
    pub by_seed: Vec<(u64, Vec<f64>)>,
}

impl SeriesSet {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.by_seed.is_empty(), "no series to export");
        for (seed, s) in &self.by_seed {
            ensure!(
                s.len() == self.steps.len(),
                "seed {seed} has {} points but the step axis has {}",
                s.len(),
                self.steps.len()
            );
        }
        Ok(())
    }
}

/// Write `<dir>/<config>_<metric>.csv` with header
/// `step,s<seed>...,mean,std` and one row per step.
pub fn write_curve_csv(
    dir: &Path,
    config: &str,
    metric: &str,
    set: &SeriesSet,
) -> Result<PathBuf> {
    set.validate()?;
    let mut text = String::from("step");
    for (seed, _) in &set.by_seed {
        text.push_str(&format!(",s{seed}"));
    }
    text.push_str(",mean,std\n");
    let mut row = Vec::with_capacity(set.by_seed.len());
    for (i, step) in set.steps.iter().enumerate() {
        row.clear();
        row.extend(set.by_seed.iter().map(|(_, s)| s[i]));
        let (m, sd) = mean_std(&row);
        text.push_str(&step.to_string());
        for v in &row {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{m},{sd}\n"));
    }
    let path = dir.join(format!("{config}_{metric}.csv"));
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_mean_leaves_a_constant_series_unchanged() {
        let xs = vec![3.5; 500];
        assert_eq!(rolling_mean(&xs, 200), xs);
    }

    #[test]
    fn rolling_mean_uses_trailing_windows() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(rolling_mean(&xs, 2), vec![1.0, 1.5, 2.5, 3.5]);
        // window longer than the series degenerates to the running mean
        assert_eq!(rolling_mean(&xs, 10), vec![1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn csv_rows_carry_per_seed_columns_plus_mean_and_std() {
        let set = SeriesSet {
            steps: vec![100, 200],
            by_seed: vec![(42, vec![1.0, 2.0]), (123, vec![3.0, 4.0])],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = write_curve_csv(dir.path(), "g3", "eval_lm", &set).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,s42,s123,mean,std"));
        // sample std of {1, 3} is sqrt(2), matching aggregate_seeds
        assert_eq!(lines.next(), Some("100,1,3,2,1.4142135623730951"));
    }

    #[test]
    fn mismatched_series_lengths_are_rejected() {
        let set = SeriesSet { steps: vec![1, 2], by_seed: vec![(7, vec![0.5])] };
        assert!(set.validate().is_err());
    }
}

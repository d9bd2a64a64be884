//! Diagnostics, summary statistics, and the relative compute proxy.
//!
//! The compute proxy counts matrix-multiply MACs only, in units of one full
//! FFN execution on one token at one controlled layer (2 * d * d_ff MACs).
//! Attention, norms, and elementwise work are excluded on both sides of
//! every ratio, which keeps the proxy scale-free and comparable across
//! controller architectures.

use crate::error::{Error, Result};
use crate::graph::COS_EPS;
use crate::model::ModelConfig;
use crate::tensor::{Scalar, Tensor};

// ── collapse and score diagnostics ──────────────────────────────────────────

/// Mean per-token (l2 distance, cosine) between the two action summaries.
/// l2 is the primary collapse signal: cosine saturates once the summaries
/// point the same way even while their gap is still shrinking.
pub fn collapse_diag<S: Scalar>(q_full: &Tensor<S>, q_cheap: &Tensor<S>) -> (f64, f64) {
    assert_eq!(q_full.shape(), q_cheap.shape());
    let (t, d) = (q_full.rows(), q_full.cols());
    assert!(t > 0);
    let mut l2 = 0.0;
    let mut cos = 0.0;
    for i in 0..t {
        let a = &q_full.data()[i * d..(i + 1) * d];
        let b = &q_cheap.data()[i * d..(i + 1) * d];
        let mut dist = 0.0;
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (x.f64(), y.f64());
            dist += (x - y) * (x - y);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        l2 += dist.sqrt();
        cos += dot / (na.sqrt() * nb.sqrt()).max(COS_EPS);
    }
    (l2 / t as f64, cos / t as f64)
}

/// Population variance (divide by N) of a set of scores.
pub fn score_variance(us: &[f64]) -> f64 {
    assert!(us.len() >= 2, "variance needs at least two scores");
    let n = us.len() as f64;
    let mean = us.iter().sum::<f64>() / n;
    us.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n
}

// ── LM curve summaries ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub eval_lm: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmSummary {
    pub best: f64,
    pub endpoint: f64,
    /// Mean of eval points in the first half of the run.
    pub avg_half: f64,
    /// Mean over the whole run.
    pub avg_full: f64,
    /// First step at which eval_lm <= threshold, per threshold; None = never.
    pub hits: Vec<Option<usize>>,
}

pub fn lm_summary(
    curve: &[EvalPoint],
    thresholds: &[f64],
    half_bound: usize,
    full_bound: usize,
) -> Result<LmSummary> {
    if curve.is_empty() {
        return Err(Error::input("cannot summarize an empty eval curve"));
    }
    debug_assert!(curve.windows(2).all(|w| w[0].step < w[1].step), "curve must be ordered");
    let best = curve.iter().map(|p| p.eval_lm).fold(f64::INFINITY, f64::min);
    let endpoint = curve.last().unwrap().eval_lm;
    let window_mean = |bound: usize| {
        let pts: Vec<f64> =
            curve.iter().filter(|p| p.step <= bound).map(|p| p.eval_lm).collect();
        if pts.is_empty() { f64::NAN } else { pts.iter().sum::<f64>() / pts.len() as f64 }
    };
    let hits = thresholds
        .iter()
        .map(|&th| curve.iter().find(|p| p.eval_lm <= th).map(|p| p.step))
        .collect();
    Ok(LmSummary {
        best,
        endpoint,
        avg_half: window_mean(half_bound),
        avg_full: window_mean(full_bound),
        hits,
    })
}

pub fn grad_norm_mean(norms: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::input("no gradient norms recorded"));
    }
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

// ── compute proxy ───────────────────────────────────────────────────────────

/// Which controller architecture is being costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerCost {
    /// MLP gate with the given hidden width.
    Mlp { hidden: usize },
    /// Guided controller: context projection + predictor (both actions) +
    /// decision head.
    Guided,
}

#[derive(Clone, Debug)]
pub struct CostModel {
    pub d: usize,
    pub d_ff: usize,
    pub r: usize,
    pub n_controlled: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub rho: f64,
    pub controller: ControllerCost,
}

impl CostModel {
    pub fn new(cfg: &ModelConfig, rho: f64, controller: ControllerCost) -> Self {
        CostModel {
            d: cfg.d_model,
            d_ff: cfg.d_ff,
            r: cfg.cheap_rank,
            n_controlled: cfg.n_controlled,
            d_c: cfg.d_c,
            d_s: cfg.d_s,
            d_a: cfg.d_a,
            rho,
            controller,
        }
    }

    /// MACs of one full FFN execution on one token: the unit.
    fn unit(&self) -> f64 {
        (2 * self.d * self.d_ff) as f64
    }

    /// Cheap branch cost per token-layer: exactly r/d_ff.
    pub fn cheap_cost(&self) -> f64 {
        self.r as f64 / self.d_ff as f64
    }

    /// Controller MACs per token per controlled layer, in units.
    pub fn controller_cost(&self) -> f64 {
        let macs = match self.controller {
            ControllerCost::Mlp { hidden } => self.d * hidden + hidden,
            ControllerCost::Guided => {
                let ctx = self.d * self.d_c;
                let pred = 2 * ((self.d_c + self.d_a) * (2 * self.d_s) + (2 * self.d_s) * self.d_s);
                let dec = (3 * self.d_s) * self.d_s + self.d_s;
                ctx + pred + dec
            }
        };
        macs as f64 / self.unit()
    }

    /// JEPA target projections (both actions) per token per controlled
    /// layer: 2 * d_s * d MACs = d_s/d_ff units.
    pub fn target_cost(&self) -> f64 {
        (2 * self.d_s * self.d) as f64 / self.unit()
    }

    /// Deployment cost per token-layer: the budgeted mix of branches plus
    /// the controller. The target head never runs at inference.
    pub fn infer_vs_full(&self) -> f64 {
        self.rho + (1.0 - self.rho) * self.cheap_cost() + self.controller_cost()
    }

    /// Label-refresh cost per token per controlled layer: the shared full
    /// pass (C full executions) plus one cheap-fork suffix per layer (a
    /// cheap execution at the fork and full executions after it), divided
    /// by C.
    pub fn oracle_refresh_cost(&self) -> f64 {
        let c = self.n_controlled as f64;
        (c + c * self.cheap_cost() + c * (c - 1.0) / 2.0) / c
    }

    /// Training-time cost per token-layer. Both branches always execute;
    /// the target head runs when the JEPA loss (or its logging) does; the
    /// oracle amortizes one refresh over `interval` steps when active.
    pub fn train_vs_full(&self, jepa_targets: bool, oracle_interval: Option<usize>) -> f64 {
        let mut cost = 1.0 + self.cheap_cost() + self.controller_cost();
        if jepa_targets {
            cost += self.target_cost();
        }
        if let Some(i) = oracle_interval {
            cost += self.oracle_refresh_cost() / i as f64;
        }
        cost
    }
}

// ── multi-seed aggregation ──────────────────────────────────────────────────

/// Mean and sample standard deviation (n-1); std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PairedDelta {
    /// Per-seed a_i - b_i.
    pub deltas: Vec<f64>,
    pub mean: f64,
    /// How many seeds share the majority sign (direction consistency).
    pub consistent: usize,
}

/// Seed-by-seed differences between two matched runs of a metric.
pub fn paired_deltas(a: &[f64], b: &[f64]) -> Result<PairedDelta> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::input("paired deltas need matching nonempty per-seed values"));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let pos = deltas.iter().filter(|&&d| d > 0.0).count();
    let neg = deltas.iter().filter(|&&d| d < 0.0).count();
    Ok(PairedDelta { deltas, mean, consistent: pos.max(neg) })
}

// ── multi-seed aggregation ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct FieldStat {
    pub mean: f64,
    pub std: f64,
}

impl From<(f64, f64)> for FieldStat {
    fn from((mean, std): (f64, f64)) -> Self {
        FieldStat { mean, std }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct HitStat {
    /// Seeds whose curve reached the threshold.
    pub hit_count: usize,
    /// Mean first-crossing step over those seeds; None when no seed hit.
    pub mean_step: Option<f64>,
}

/// One experiment's table row: mean and sample std across its seeds.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SeedAggregate {
    pub name: String,
    pub seeds: Vec<u64>,
    pub best_eval_lm: FieldStat,
    pub endpoint_eval_lm: FieldStat,
    pub avg_lm_first_half: FieldStat,
    pub avg_lm_full: FieldStat,
    pub grad_norm_mean: FieldStat,
    pub final_diag_qf_qc_l2: FieldStat,
    pub final_diag_util_score_var: FieldStat,
    pub compute_vs_full_measured: FieldStat,
    /// Architecture-level constant, identical across seeds.
    pub infer_vs_full: f64,
    pub hits: Vec<HitStat>,
}

/// Collapse one config's seed runs into a table row. The summaries must all
/// come from the same config; only the seed may differ.
pub fn aggregate_seeds(runs: &[crate::trainer::RunSummary]) -> Result<SeedAggregate> {
    let first = runs.first().ok_or_else(|| Error::input("no summaries to aggregate"))?;
    for r in runs {
        if r.config != first.config {
            return Err(Error::input(format!(
                "summaries mix configs ({} vs {}); aggregate one config at a time",
                r.config.name, first.config.name
            )));
        }
    }
    let stat = |f: fn(&crate::trainer::RunSummary) -> f64| -> FieldStat {
        mean_std(&runs.iter().map(f).collect::<Vec<_>>()).into()
    };
    let n_thresholds = first.hit_steps.len();
    let hits = (0..n_thresholds)
        .map(|i| {
            let steps: Vec<f64> =
                runs.iter().filter_map(|r| r.hit_steps[i]).map(|s| s as f64).collect();
            HitStat {
                hit_count: steps.len(),
                mean_step: (!steps.is_empty())
                    .then(|| steps.iter().sum::<f64>() / steps.len() as f64),
            }
        })
        .collect();
    Ok(SeedAggregate {
        name: first.config.name.clone(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        best_eval_lm: stat(|r| r.best_eval_lm),
        endpoint_eval_lm: stat(|r| r.endpoint_eval_lm),
        avg_lm_first_half: stat(|r| r.avg_lm_first_half),
        avg_lm_full: stat(|r| r.avg_lm_full),
        grad_norm_mean: stat(|r| r.grad_norm_mean),
        final_diag_qf_qc_l2: stat(|r| r.final_diag_qf_qc_l2),
        final_diag_util_score_var: stat(|r| r.final_diag_util_score_var),
        compute_vs_full_measured: stat(|r| r.compute_vs_full_measured),
        infer_vs_full: first.infer_vs_full,
        hits,
    })
}

/// Paired per-seed deltas of a summary field between two configs, matched by
/// seed. Errors when the seed sets differ.
pub fn paired_summary_deltas(
    a: &[crate::trainer::RunSummary],
    b: &[crate::trainer::RunSummary],
    field: fn(&crate::trainer::RunSummary) -> f64,
) -> Result<PairedDelta> {
    let mut a: Vec<_> = a.iter().collect();
    let mut b: Vec<_> = b.iter().collect();
    a.sort_by_key(|r| r.seed);
    b.sort_by_key(|r| r.seed);
    if a.iter().map(|r| r.seed).ne(b.iter().map(|r| r.seed)) {
        return Err(Error::input("paired deltas need the same seed set on both sides"));
    }
    paired_deltas(
        &a.iter().map(|r| field(r)).collect::<Vec<_>>(),
        &b.iter().map(|r| field(r)).collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::orthogonal_rows;
    use crate::tensor::{gaussian, mm_nt, substream};
    use crate::trainer::RunSummary;

    #[test]
    fn collapse_diag_fixed_points() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let (l2, cos) = collapse_diag(&q, &q);
        assert_eq!((l2, cos), (0.0, 1.0));

        let neg = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -1.0]);
        let (l2, cos) = collapse_diag(&q, &neg);
        assert!((l2 - 2.0).abs() < 1e-12);
        assert!((cos + 1.0).abs() < 1e-12);

        let orth = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let (l2, cos) = collapse_diag(&q, &orth);
        assert!((l2 - 2.0f64.sqrt()).abs() < 1e-12);
        assert!(cos.abs() < 1e-12);
    }

    #[test]
    fn collapse_l2_is_rotation_invariant() {
        let mut rng = substream(1, "rot");
        let qf: Tensor<f64> = gaussian(vec![6, 5], 1.0, &mut rng);
        let qc: Tensor<f64> = gaussian(vec![6, 5], 1.0, &mut rng);
        let rot: Tensor<f64> = orthogonal_rows(5, 5, &mut rng).unwrap();
        let apply = |x: &Tensor<f64>| {
            let mut out = Tensor::zeros(vec![6, 5]);
            mm_nt(x.data(), rot.data(), 6, 5, 5, out.data_mut());
            out
        };
        let (l2, _) = collapse_diag(&qf, &qc);
        let (l2r, _) = collapse_diag(&apply(&qf), &apply(&qc));
        assert!((l2 - l2r).abs() < 1e-9);
    }

    #[test]
    fn score_variance_hand_values() {
        assert_eq!(score_variance(&[3.0, 3.0, 3.0]), 0.0);
        assert_eq!(score_variance(&[0.0, 2.0]), 1.0);
        let base = [0.1, -0.4, 2.0, 0.7];
        let scaled: Vec<f64> = base.iter().map(|x| 3.0 * x).collect();
        assert!((score_variance(&scaled) - 9.0 * score_variance(&base)).abs() < 1e-12);
    }

    #[test]
    fn lm_summary_first_crossing_and_windows() {
        let curve = vec![
            EvalPoint { step: 500, eval_lm: 5.08 },
            EvalPoint { step: 1000, eval_lm: 5.074 },
            EvalPoint { step: 1500, eval_lm: 5.09 },
            EvalPoint { step: 2000, eval_lm: 5.071 },
        ];
        let s = lm_summary(&curve, &[5.075, 5.072, 5.0], 1000, 2000).unwrap();
        assert_eq!(s.hits[0], Some(1000), "first crossing, not best crossing");
        assert_eq!(s.hits[1], Some(2000));
        assert_eq!(s.hits[2], None, "threshold below the whole curve never hits");
        assert_eq!(s.best, 5.071);
        assert_eq!(s.endpoint, 5.071);
        assert!((s.avg_half - (5.08 + 5.074) / 2.0).abs() < 1e-12);
        assert!((s.avg_full - (5.08 + 5.074 + 5.09 + 5.071) / 4.0).abs() < 1e-12);
        // looser thresholds never hit later
        let hits: Vec<_> = s.hits.iter().take(2).map(|h| h.unwrap()).collect();
        assert!(hits[0] <= hits[1]);

        let single = [EvalPoint { step: 100, eval_lm: 2.0 }];
        let s = lm_summary(&single, &[], 100, 100).unwrap();
        assert_eq!((s.best, s.endpoint, s.avg_full), (2.0, 2.0, 2.0));
        assert!(lm_summary(&[], &[], 1, 1).is_err());
    }

    #[test]
    fn grad_norm_mean_basics() {
        assert_eq!(grad_norm_mean(&[3.0, 3.0]).unwrap(), 3.0);
        assert_eq!(grad_norm_mean(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(grad_norm_mean(&[]).is_err());
    }

    #[test]
    fn proxy_arithmetic_at_reference_dims() {
        // these are the scale-free numbers the run is judged against
        let cfg = ModelConfig::reference();
        let mlp = CostModel::new(&cfg, 0.5, ControllerCost::Mlp { hidden: 160 });
        assert_eq!(mlp.cheap_cost(), 80.0 / 2560.0);
        let infer = mlp.infer_vs_full();
        assert!((0.545..=0.555).contains(&infer), "MLP infer_vs_full = {infer}");

        let guided = CostModel::new(&cfg, 0.5, ControllerCost::Guided);
        let a3_guided = guided.train_vs_full(true, None);
        let a3_mlp = mlp.train_vs_full(false, None);
        assert!((1.05..=1.12).contains(&a3_guided), "A3 guided = {a3_guided}");
        assert!((1.05..=1.12).contains(&a3_mlp), "A3 mlp = {a3_mlp}");

        let standard = guided.train_vs_full(true, Some(5));
        assert!(standard - a3_guided >= 0.30, "oracle amortization too small: {standard}");
        // dense limit: everything full, free controller
        let dense = CostModel::new(&cfg, 1.0, ControllerCost::Mlp { hidden: 0 });
        assert_eq!(dense.infer_vs_full(), 1.0);
    }

    #[test]
    fn infer_cost_ignores_training_losses() {
        let cfg = ModelConfig::desk();
        let m = CostModel::new(&cfg, 0.5, ControllerCost::Guided);
        // the same architecture costs the same at inference no matter how it
        // was trained
        assert_eq!(m.infer_vs_full(), m.infer_vs_full());
        assert!(m.train_vs_full(true, Some(5)) > m.train_vs_full(true, None));
    }

    #[test]
    fn mean_std_and_paired_deltas() {
        let (m, s) = mean_std(&[5.06, 5.07]);
        assert!((m - 5.065).abs() < 1e-12);
        assert!((s - 0.005 * 2.0f64.sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[4.2]);
        assert_eq!((m1, s1), (4.2, 0.0));

        let d = paired_deltas(&[1.0, 2.0, 3.0], &[0.5, 1.0, 3.5]).unwrap();
        assert_eq!(d.deltas, vec![0.5, 1.0, -0.5]);
        assert_eq!(d.consistent, 2);
        assert!(paired_deltas(&[1.0], &[1.0, 2.0]).is_err());

        let same = paired_deltas(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(same.consistent, 2, "3/3-style full consistency");
    }

    fn summary_with(name: &str, seed: u64, best: f64, hit0: Option<usize>) -> RunSummary {
        let config = crate::experiments::ExperimentConfig::preset(name).unwrap();
        RunSummary {
            config,
            seed,
            version: "test".into(),
            dtype: "f64".into(),
            best_eval_lm: best,
            endpoint_eval_lm: best + 0.01,
            avg_lm_first_half: best + 0.05,
            avg_lm_full: best + 0.03,
            hit_steps: vec![hit0, None],
            reference_all_full_eval_lm: best - 0.1,
            grad_norm_mean: 1.0 + seed as f64,
            compute_vs_full_measured: 1.5,
            compute_vs_full_model: 1.5,
            infer_vs_full: 0.55,
            final_diag_qf_qc_l2: 0.2,
            final_diag_qf_qc_cos: 0.9,
            final_diag_util_score_var: 0.01,
            final_mean_gate_prob: vec![0.5, 0.5],
            final_full_ratio: vec![0.5, 0.5],
            total_oracle_passes: 100,
            trainable_scalars: 2000,
        }
    }

    #[test]
    fn aggregate_seeds_hand_values() {
        let runs =
            vec![summary_with("g3", 42, 5.06, Some(1000)), summary_with("g3", 123, 5.07, None)];
        let agg = aggregate_seeds(&runs).unwrap();
        assert_eq!(agg.name, "g3");
        assert_eq!(agg.seeds, vec![42, 123]);
        assert!((agg.best_eval_lm.mean - 5.065).abs() < 1e-12);
        assert!((agg.best_eval_lm.std - 0.005 * 2.0f64.sqrt()).abs() < 1e-12);
        // threshold 0 hit by one seed at step 1000; threshold 1 never hit
        assert_eq!(agg.hits[0].hit_count, 1);
        assert_eq!(agg.hits[0].mean_step, Some(1000.0));
        assert_eq!(agg.hits[1].hit_count, 0);
        assert_eq!(agg.hits[1].mean_step, None);

        // single-seed aggregation degrades to std 0 (the costmatch row)
        let one = aggregate_seeds(&runs[..1]).unwrap();
        assert_eq!(one.best_eval_lm.std, 0.0);

        // mixing configs is refused
        let mixed = vec![summary_with("g3", 42, 5.0, None), summary_with("a1", 42, 5.0, None)];
        assert!(aggregate_seeds(&mixed).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn paired_summary_deltas_match_by_seed() {
        let a = vec![summary_with("g3", 123, 5.08, None), summary_with("g3", 42, 5.06, None)];
        let b = vec![summary_with("a1", 42, 5.10, None), summary_with("a1", 123, 5.09, None)];
        let d = paired_summary_deltas(&a, &b, |r| r.best_eval_lm).unwrap();
        // sorted by seed: (42: 5.06-5.10), (123: 5.08-5.09)
        assert!((d.deltas[0] + 0.04).abs() < 1e-12);
        assert!((d.deltas[1] + 0.01).abs() < 1e-12);
        assert_eq!(d.consistent, 2);

        let c = vec![summary_with("a1", 7, 5.0, None), summary_with("a1", 123, 5.0, None)];
        assert!(paired_summary_deltas(&a, &c, |r| r.best_eval_lm).is_err());
    }
}

//! Counterfactual utility labels and the losses trained against them.
//!
//! For controlled layer l and position t the label is
//!
//!   u*_{l,t} = windowedCE(cheap fork at l) - windowedCE(full fork at l)
//!
//! where both forks force every later controlled layer to full, and
//! windowedCE sums gamma^delta * CE_{t+delta} over a short future window.
//! Positive u* means executing the full branch at l lowers near-future loss.
//!
//! Labels are recomputed from live weights on a sparse schedule (nothing
//! during warmup, then every `interval` steps) and never cached. On refresh
//! steps they feed a Huber regression loss on the raw scores and a sampled
//! pairwise ranking loss; on other steps both losses are exactly zero and no
//! oracle forward passes run.

use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::graph::{Graph, Mode, Var};
use crate::model::{forward_from, model_forward, DepthController, ForcingPlan, ModelConfig};
use crate::optim::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// What the trajectory before the fork layer executes. The forced-full
/// default keeps the teacher's counterfactual world fixed for the whole run
/// and lets every fork share one dense pass; on-policy instead replays the
/// student's current gated routing up to the fork.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixPolicy {
    ForcedFull,
    OnPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleConfig {
    /// Future-window length W.
    pub window: usize,
    /// Per-step discount gamma within the window.
    pub decay: f64,
    /// Steps before the first labels are computed.
    pub warmup: usize,
    /// Refresh interval I after warmup.
    pub interval: usize,
    /// Sampled rank pairs per controlled layer per refresh.
    pub rank_pairs: usize,
    /// Huber transition point for the utility regression.
    pub huber_delta: f64,
    pub prefix_policy: PrefixPolicy,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            window: 8,
            decay: 0.5,
            warmup: 100,
            interval: 5,
            rank_pairs: 256,
            huber_delta: 1.0,
            prefix_policy: PrefixPolicy::ForcedFull,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::config("oracle window must be at least 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("oracle decay must lie in (0, 1]"));
        }
        if self.interval < 1 {
            return Err(Error::config("oracle refresh interval must be at least 1"));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::config("huber delta must be positive"));
        }
        Ok(())
    }
}

/// Does `step` (1-based) refresh labels? Never during warmup, then every
/// `interval` steps starting at warmup + interval.
pub fn labels_due(step: usize, cfg: &OracleConfig) -> bool {
    step > cfg.warmup && (step - cfg.warmup) % cfg.interval == 0
}

/// Discounted sum of future CE terms, truncated at the sequence end:
/// sum_{delta < W} gamma^delta ce[t + delta].
pub fn windowed_ce(ce: &[f64], t: usize, window: usize, decay: f64) -> f64 {
    debug_assert!(t < ce.len());
    let end = (t + window).min(ce.len());
    let mut acc = 0.0;
    let mut w = 1.0;
    for &c in &ce[t..end] {
        acc += w * c;
        w *= decay;
    }
    acc
}

/// u*_t from the two branches' per-position CE curves.
pub fn labels_from_windows(
    ce_cheap: &[f64],
    ce_full: &[f64],
    window: usize,
    decay: f64,
) -> Vec<f64> {
    assert_eq!(ce_cheap.len(), ce_full.len());
    (0..ce_full.len())
        .map(|t| windowed_ce(ce_cheap, t, window, decay) - windowed_ce(ce_full, t, window, decay))
        .collect()
}

fn per_position_ce<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize]) -> Vec<f64> {
    let sliced = g.slice_rows(logits, 0, targets.len());
    let ce = g.ce_rows(sliced, targets);
    g.value(ce).data().iter().map(|v| v.f64()).collect()
}

/// Per-layer utility labels for one sequence, plus the number of model
/// passes spent (prefix pass counts as one, each fork suffix as one).
///
/// Runs entirely without gradient tracking; every call recomputes from the
/// live weights.
pub fn utility_labels<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    gate_cfg: &GateConfig,
    ocfg: &OracleConfig,
    tokens: &[usize],
    targets: &[usize],
    controller: &dyn DepthController<S>,
) -> Result<(Vec<Vec<f64>>, usize)> {
    assert_eq!(
        targets.len() + 1,
        tokens.len(),
        "labels need next-token targets for all but the final position"
    );
    let mut g: Graph<S> = Graph::new(Mode::NoGrad);
    let vars = store.bind_all(&mut g);
    let c = cfg.n_controlled;
    let mut passes = 1usize;

    // base trajectory supplying the fork inputs
    let base_plan = match ocfg.prefix_policy {
        PrefixPolicy::ForcedFull => ForcingPlan::all_full(c),
        PrefixPolicy::OnPolicy => ForcingPlan::gate(c),
    };
    let ctrl = matches!(ocfg.prefix_policy, PrefixPolicy::OnPolicy).then_some(controller);
    let base = model_forward(&mut g, store, &vars, cfg, gate_cfg, tokens, &base_plan, ctrl)?;
    let base_ce = per_position_ce(&mut g, base.logits, targets);

    let mut labels = Vec::with_capacity(c);
    for slot in 0..c {
        let layer = cfg.first_controlled() + slot;
        let (_, h_in) = base.layer_inputs[layer];
        let cheap_plan = ForcingPlan::fork_cheap_at(c, slot);
        let cheap =
            forward_from(&mut g, store, &vars, cfg, gate_cfg, h_in, layer, &cheap_plan, None);
        let ce_cheap = per_position_ce(&mut g, cheap.logits, targets);
        passes += 1;
        let ce_full = match ocfg.prefix_policy {
            // forced-full prefix: the full fork is the base trajectory itself
            PrefixPolicy::ForcedFull => base_ce.clone(),
            PrefixPolicy::OnPolicy => {
                let full_plan = ForcingPlan::all_full(c);
                let full = forward_from(
                    &mut g, store, &vars, cfg, gate_cfg, h_in, layer, &full_plan, None,
                );
                passes += 1;
                per_position_ce(&mut g, full.logits, targets)
            }
        };
        labels.push(labels_from_windows(&ce_cheap, &ce_full, ocfg.window, ocfg.decay));
    }
    Ok((labels, passes))
}

// ── losses against the labels ───────────────────────────────────────────────

/// Sum (not mean) of Huber(u_t, u*_t) over labeled positions; the caller
/// divides by the global (layer, sequence, position) count.
pub fn huber_util_sum<S: Scalar>(
    g: &mut Graph<S>,
    u: Var,
    labels: &[f64],
    delta: f64,
) -> (Var, usize) {
    let t_lab = labels.len();
    assert!(g.value(u).numel() >= t_lab, "scores must cover every labeled position");
    let idx: Vec<usize> = (0..t_lab).collect();
    let u_lab = g.gather(u, &idx);
    let target = Tensor::from_f64s(vec![t_lab], labels);
    let h = g.huber_vs(u_lab, &target, S::from64(delta));
    (g.sum_all(h), t_lab)
}

/// One sampled rank comparison: positions i, j of one sequence, with
/// `neg_sign` = -sign(u*_i - u*_j) premultiplied for the softplus argument.
#[derive(Clone, Debug, PartialEq)]
pub struct RankPair {
    pub seq: usize,
    pub i: usize,
    pub j: usize,
    pub neg_sign: f64,
}

/// Draw `n` pairs uniformly: a sequence, then two distinct labeled positions.
/// Pairs whose labels tie are discarded (their sign is zero, contributing a
/// constant) but still consume randomness so the stream stays aligned.
pub fn sample_rank_pairs(
    labels: &[Vec<f64>],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<RankPair> {
    let b = labels.len();
    if b == 0 {
        return Vec::new();
    }
    let t_lab = labels[0].len();
    if t_lab < 2 {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let seq = rng.gen_range(0..b);
        let i = rng.gen_range(0..t_lab);
        let mut j = rng.gen_range(0..t_lab - 1);
        if j >= i {
            j += 1;
        }
        let d = labels[seq][i] - labels[seq][j];
        if d == 0.0 {
            continue;
        }
        pairs.push(RankPair { seq, i, j, neg_sign: -d.signum() });
    }
    pairs
}

/// Sum of softplus(-sign(u*_i - u*_j)(u_i - u_j)) over the sampled pairs,
/// plus the pair count. `us` holds one score vector per sequence.
pub fn rank_loss_sum<S: Scalar>(g: &mut Graph<S>, us: &[Var], pairs: &[RankPair]) -> (Var, usize) {
    if pairs.is_empty() {
        return (g.scalar(S::zero()), 0);
    }
    let mut acc: Option<Var> = None;
    for seq in 0..us.len() {
        let mine: Vec<&RankPair> = pairs.iter().filter(|p| p.seq == seq).collect();
        if mine.is_empty() {
            continue;
        }
        let is: Vec<usize> = mine.iter().map(|p| p.i).collect();
        let js: Vec<usize> = mine.iter().map(|p| p.j).collect();
        let ui = g.gather(us[seq], &is);
        let uj = g.gather(us[seq], &js);
        let d = g.sub(ui, uj);
        let signs = Tensor::from_f64s(vec![mine.len()], &mine.iter().map(|p| p.neg_sign).collect::<Vec<_>>());
        let arg = g.mul_const(d, &signs);
        let sp = g.softplus(arg);
        let s = g.sum_all(sp);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    match acc {
        Some(a) => (a, pairs.len()),
        None => (g.scalar(S::zero()), 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::G1Controller;
    use crate::model::{register_cheap, register_dense};
    use crate::tensor::substream;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_controlled: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            cheap_rank: 2,
            vocab: 17,
            seq_len: 12,
            d_c: 4,
            d_s: 3,
            d_a: 2,
        }
    }

    fn setup(seed: u64) -> (ModelConfig, ParamStore<f64>, G1Controller) {
        let c = cfg();
        let mut store = ParamStore::new();
        register_dense(&mut store, &c, seed, false);
        register_cheap(&mut store, &c, seed + 1, true);
        let g1 = G1Controller::standard(&c);
        g1.register(&mut store, &c, seed + 2);
        (c, store, g1)
    }

    #[test]
    fn windowed_ce_hand_values() {
        assert_eq!(windowed_ce(&[1.0, 2.0, 4.0], 0, 2, 0.5), 2.0);
        // W = 1 is the plain per-position CE
        assert_eq!(windowed_ce(&[1.0, 2.0, 4.0], 1, 1, 0.5), 2.0);
        // truncation at the end of the sequence
        assert_eq!(windowed_ce(&[1.0, 2.0, 4.0], 2, 8, 0.5), 4.0);
        // full window: 1 + 0.5*2 + 0.25*4
        assert_eq!(windowed_ce(&[1.0, 2.0, 4.0], 0, 8, 0.5), 3.0);
    }

    #[test]
    fn label_sign_and_antisymmetry() {
        let cheap = vec![2.0, 3.0, 1.5, 2.5];
        let full = vec![1.0, 2.0, 1.0, 2.0];
        let u = labels_from_windows(&cheap, &full, 3, 0.5);
        assert!(u.iter().all(|&v| v > 0.0), "full strictly better everywhere means u* > 0");
        let swapped = labels_from_windows(&full, &cheap, 3, 0.5);
        for (a, b) in u.iter().zip(&swapped) {
            assert_eq!(*a, -*b, "branch swap must negate labels exactly");
        }
    }

    #[test]
    fn refresh_schedule() {
        let c = OracleConfig::default();
        assert!(!labels_due(50, &c));
        assert!(!labels_due(100, &c), "warmup boundary itself has no labels");
        assert!(!labels_due(103, &c));
        assert!(labels_due(105, &c), "first refresh lands at warmup + interval");
        assert!(!labels_due(106, &c));
        assert!(labels_due(110, &c));
        let every = OracleConfig { interval: 1, ..c };
        assert!(labels_due(101, &every));
        assert!(labels_due(102, &every));
    }

    #[test]
    fn config_validation() {
        assert!(OracleConfig::default().validate().is_ok());
        assert!(OracleConfig { window: 0, ..Default::default() }.validate().is_err());
        assert!(OracleConfig { decay: 0.0, ..Default::default() }.validate().is_err());
        assert!(OracleConfig { decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(OracleConfig { interval: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn identical_branches_give_zero_labels() {
        // zero full-FFN down projections + zero-init cheap: both forks leave
        // the residual stream untouched, so every label is exactly zero
        let (c, mut store, g1) = setup(41);
        for l in c.first_controlled()..c.n_layers {
            store.value_mut(store.id(&format!("layers.{l}.ffn.w_down"))).data_mut().fill(0.0);
        }
        let tokens: Vec<usize> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let targets = tokens[1..].to_vec();
        let (labels, _) = utility_labels(
            &store,
            &c,
            &GateConfig::default(),
            &OracleConfig::default(),
            &tokens,
            &targets,
            &g1,
        )
        .unwrap();
        for layer in &labels {
            assert_eq!(layer.len(), targets.len());
            assert!(layer.iter().all(|&v| v == 0.0), "{layer:?}");
        }
    }

    #[test]
    fn labels_are_deterministic() {
        let (c, store, g1) = setup(42);
        let tokens: Vec<usize> = vec![5, 4, 3, 2, 1, 0, 1, 2, 3, 4];
        let targets = tokens[1..].to_vec();
        let run = || {
            utility_labels(
                &store,
                &c,
                &GateConfig::default(),
                &OracleConfig::default(),
                &tokens,
                &targets,
                &g1,
            )
            .unwrap()
        };
        let (a, passes_a) = run();
        let (b, passes_b) = run();
        assert_eq!(a, b);
        assert_eq!(passes_a, passes_b);
        // forced-full prefix: one shared pass plus one suffix per slot
        assert_eq!(passes_a, 1 + c.n_controlled);
    }

    #[test]
    fn shared_prefix_matches_naive_construction() {
        // the resumed fork must be bit-identical to running each fork as its
        // own from-scratch pass with an explicit forced-full prefix
        let (c, store, g1) = setup(43);
        let tokens: Vec<usize> = vec![7, 2, 9, 9, 1, 3, 8, 0, 4, 4, 6, 5];
        let targets = tokens[1..].to_vec();
        let ocfg = OracleConfig::default();
        let gate = GateConfig::default();
        let (labels, _) = utility_labels(&store, &c, &gate, &ocfg, &tokens, &targets, &g1).unwrap();

        let mut g: Graph<f64> = Graph::new(Mode::NoGrad);
        let vars = store.bind_all(&mut g);
        let full_plan = ForcingPlan::all_full(c.n_controlled);
        let full =
            model_forward(&mut g, &store, &vars, &c, &gate, &tokens, &full_plan, None).unwrap();
        let ce_full = per_position_ce(&mut g, full.logits, &targets);
        for slot in 0..c.n_controlled {
            let plan = ForcingPlan::fork_cheap_at(c.n_controlled, slot);
            let fork =
                model_forward(&mut g, &store, &vars, &c, &gate, &tokens, &plan, None).unwrap();
            let ce_cheap = per_position_ce(&mut g, fork.logits, &targets);
            let naive = labels_from_windows(&ce_cheap, &ce_full, ocfg.window, ocfg.decay);
            assert_eq!(labels[slot], naive, "slot {slot} diverged from the naive construction");
        }
    }

    #[test]
    fn single_controlled_layer_on_policy_equals_forced_full() {
        // with C = 1 there is no prefix to disagree about
        let mut c = cfg();
        c.n_controlled = 1;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_dense(&mut store, &c, 44, false);
        register_cheap(&mut store, &c, 45, true);
        let g1 = G1Controller::standard(&c);
        g1.register(&mut store, &c, 46);
        let tokens: Vec<usize> = vec![1, 2, 3, 4, 5, 6, 7, 8];
        let targets = tokens[1..].to_vec();
        let gate = GateConfig::default();
        let forced = OracleConfig::default();
        let onpol = OracleConfig { prefix_policy: PrefixPolicy::OnPolicy, ..forced };
        let (a, _) = utility_labels(&store, &c, &gate, &forced, &tokens, &targets, &g1).unwrap();
        let (b, _) = utility_labels(&store, &c, &gate, &onpol, &tokens, &targets, &g1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn on_policy_prefix_changes_labels_and_pass_count() {
        let (c, store, g1) = setup(47);
        let tokens: Vec<usize> = vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0];
        let targets = tokens[1..].to_vec();
        let gate = GateConfig::default();
        let forced = OracleConfig::default();
        let onpol = OracleConfig { prefix_policy: PrefixPolicy::OnPolicy, ..forced };
        let (a, pa) = utility_labels(&store, &c, &gate, &forced, &tokens, &targets, &g1).unwrap();
        let (b, pb) = utility_labels(&store, &c, &gate, &onpol, &tokens, &targets, &g1).unwrap();
        assert_eq!(pa, 1 + c.n_controlled);
        assert_eq!(pb, 1 + 2 * c.n_controlled);
        // the second controlled layer's labels see a different prefix (the
        // first controlled layer routes some tokens cheap on-policy)
        assert!(a[1] != b[1], "gated prefix should shift downstream labels");
    }

    #[test]
    fn huber_util_sum_hand_values() {
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let u = g.leaf(Tensor::new(vec![3], vec![1.5, 0.0, 9.0]));
        // errors: 0.5 (quadratic), 2.0 (linear); last position unlabeled
        let (sum, n) = huber_util_sum(&mut g, u, &[1.0, 2.0], 1.0);
        assert_eq!(n, 2);
        let want = 0.125 + 1.5;
        assert!((g.value(sum).item() - want).abs() < 1e-12);
        // exact labels give exactly zero
        let u2 = g.leaf(Tensor::new(vec![2], vec![0.25, -0.5]));
        let (z, _) = huber_util_sum(&mut g, u2, &[0.25, -0.5], 1.0);
        assert_eq!(g.value(z).item(), 0.0);
    }

    #[test]
    fn rank_pair_sampling_skips_ties_and_is_seeded() {
        let labels = vec![vec![1.0, 1.0, 2.0], vec![0.5, 0.5, 0.5]];
        let mut rng = substream(3, "rank-test");
        let pairs = sample_rank_pairs(&labels, 64, &mut rng);
        assert!(!pairs.is_empty());
        assert!(pairs.len() < 64, "ties inside the label vectors must drop some pairs");
        for p in &pairs {
            assert_ne!(p.i, p.j);
            assert_ne!(labels[p.seq][p.i], labels[p.seq][p.j]);
            let want = -(labels[p.seq][p.i] - labels[p.seq][p.j]).signum();
            assert_eq!(p.neg_sign, want);
        }
        let mut rng2 = substream(3, "rank-test");
        assert_eq!(pairs, sample_rank_pairs(&labels, 64, &mut rng2));
        // degenerate inputs yield no pairs rather than panicking
        let mut rng3 = substream(3, "rank-test");
        assert!(sample_rank_pairs(&[vec![1.0]], 8, &mut rng3).is_empty());
        assert!(sample_rank_pairs(&[], 8, &mut rng3).is_empty());
    }

    #[test]
    fn rank_loss_fixed_points() {
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let u = g.leaf(Tensor::new(vec![2], vec![0.3, 0.3]));
        // equal scores, distinct labels: softplus(0) = ln 2
        let pairs = vec![RankPair { seq: 0, i: 0, j: 1, neg_sign: -1.0 }];
        let (s, n) = rank_loss_sum(&mut g, &[u], &pairs);
        assert_eq!(n, 1);
        assert!((g.value(s).item() - (2.0f64).ln()).abs() < 1e-12);

        // correctly ordered with a large margin: loss vanishes
        let u2 = g.leaf(Tensor::new(vec![2], vec![30.0, 0.0]));
        let (s2, _) = rank_loss_sum(&mut g, &[u2], &pairs);
        assert!(g.value(s2).item() < 1e-12);

        // inverted with margin m: approximately m
        let u3 = g.leaf(Tensor::new(vec![2], vec![0.0, 30.0]));
        let (s3, _) = rank_loss_sum(&mut g, &[u3], &pairs);
        assert!((g.value(s3).item() - 30.0).abs() < 1e-12);

        // no pairs: exact zero with zero count
        let (s4, n4) = rank_loss_sum::<f64>(&mut g, &[u3], &[]);
        assert_eq!(n4, 0);
        assert_eq!(g.value(s4).item(), 0.0);
    }

    #[test]
    fn rank_and_util_gradients_match_finite_differences() {
        use crate::gradcheck::finite_difference_check;
        let labels = [0.8, -0.3, 0.1, 0.6];
        let pairs = vec![
            RankPair { seq: 0, i: 0, j: 1, neg_sign: -1.0 },
            RankPair { seq: 0, i: 2, j: 3, neg_sign: 1.0 },
            RankPair { seq: 0, i: 1, j: 3, neg_sign: 1.0 },
        ];
        let u0 = Tensor::new(vec![5], vec![0.4, -0.2, 0.0, 0.9, 3.0]);
        let rep = finite_difference_check(&[("u", u0)], 0, 11, |g, leaves| {
            let (hsum, hn) = huber_util_sum(g, leaves[0], &labels, 1.0);
            let (rsum, rn) = rank_loss_sum(g, &leaves[0..1], &pairs);
            let h = g.affine(hsum, 1.0 / hn as f64, 0.0);
            let r = g.affine(rsum, 0.2 / rn as f64, 0.0);
            g.add(h, r)
        });
        assert!(rep.passes(1e-4), "worst {:?} rel {}", rep.worst, rep.max_rel_err);
    }
}

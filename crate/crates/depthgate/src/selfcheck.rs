//! Built-in correctness checks over randomized small configurations.
//!
//! Each check returns a [`CheckReport`] instead of asserting, so the same
//! implementations back both the CLI `check` command and the acceptance
//! test suite; callers choose the sample counts.

use crate::controller::{cyclic_derangement, jepa_pair_loss, project_targets, G1Controller, G3Controller};
use crate::gating::{alive_loss, budget_loss, gate_decide, soft_gate, GateConfig};
use crate::gradcheck::finite_difference_check;
use crate::graph::{Graph, Mode, Var};
use crate::metrics::{lm_summary, mean_std, paired_deltas, ControllerCost, CostModel, EvalPoint};
use crate::model::{
    inference_forward, lm_loss, model_forward, register_cheap, register_dense, DepthController,
    ForcingPlan, ModelConfig,
};
use crate::optim::ParamStore;
use crate::oracle::{
    labels_from_windows, rank_loss_sum, utility_labels, OracleConfig, RankPair,
};
use crate::tensor::{gaussian, substream, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckReport { name, passed, detail }
    }
}

/// Random tiny architecture; every draw keeps the dimension invariants valid.
fn small_config(rng: &mut impl Rng) -> ModelConfig {
    let n_layers = rng.gen_range(2..=3);
    let n_controlled = rng.gen_range(1..n_layers);
    let n_heads = 2;
    let d_model = n_heads * rng.gen_range(3..=6);
    ModelConfig {
        n_layers,
        n_controlled,
        d_model,
        n_heads,
        d_ff: 4 * rng.gen_range(3..=5),
        cheap_rank: rng.gen_range(2..=3),
        vocab: rng.gen_range(13..=32),
        seq_len: rng.gen_range(5..=8),
        d_c: rng.gen_range(3..=4),
        d_s: rng.gen_range(3..=4),
        d_a: rng.gen_range(2..=3),
    }
}

fn random_tokens(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<usize> {
    (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab)).collect()
}

/// Build dense + cheap + both controllers with seeds drawn from `rng`, and
/// give the cheap down-projections nonzero values so gradients flow through
/// the whole cheap path.
fn populated_store(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    register_dense(&mut store, cfg, rng.gen(), false);
    register_cheap(&mut store, cfg, rng.gen(), true);
    G1Controller::standard(cfg).register(&mut store, cfg, rng.gen());
    G3Controller::register(&mut store, cfg, rng.gen());
    let mut wseed = substream(rng.gen(), "live-w-down");
    for l in cfg.first_controlled()..cfg.n_layers {
        let id = store.id(&format!("layers.{l}.cheap.w_down"));
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = gaussian(shape, 0.1, &mut wseed);
    }
    store
}

// ── gradient correctness (randomized, term by term) ─────────────────────────

/// Finite-difference check of every differentiable loss term plus the
/// straight-through identity, over `n_configs` random small architectures.
pub fn check_gradients(n_configs: usize, seed: u64) -> CheckReport {
    let mut rng = substream(seed, "fd-configs");
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    let mut st_checked = 0usize;
    let tol = 1e-4;

    let mut track = |term: &str, cfg_i: usize, rep: crate::gradcheck::FdReport| {
        checked += rep.checked;
        if rep.max_rel_err > worst {
            worst = rep.max_rel_err;
            worst_at = format!("{term} (config {cfg_i}, {:?})", rep.worst);
        }
    };

    for i in 0..n_configs {
        let cfg = small_config(&mut rng);
        let store = populated_store(&cfg, &mut rng);
        let tokens = random_tokens(&cfg, &mut rng);
        let gate = GateConfig::default();

        // LM term through the cheap branch: forced plan, so the path is
        // smooth end to end.
        let lc = cfg.n_layers - 1;
        let names =
            [format!("layers.{lc}.cheap.w_up"), format!("layers.{lc}.cheap.w_down"),
             format!("layers.{lc}.ln2_cheap.gamma")];
        let inputs: Vec<(&str, Tensor<f64>)> =
            names.iter().map(|n| (n.as_str(), store.value(store.id(n)).clone())).collect();
        let rep = finite_difference_check(&inputs, 3, seed ^ (i as u64), |g, leaves| {
            let mut vars = store.bind_all(g);
            for (k, n) in names.iter().enumerate() {
                vars[store.id(n).0] = leaves[k];
            }
            let out = model_forward(
                g, &store, &vars, &cfg, &gate, &tokens,
                &ForcingPlan::all_cheap(cfg.n_controlled), None,
            )
            .unwrap();
            let logits = g.slice_rows(out.logits, 0, tokens.len() - 1);
            lm_loss(g, logits, &tokens[1..])
        });
        track("lm", i, rep);

        // JEPA term through the gated forward. The guided controller reads a
        // stop-gradient of its input, so no path crosses the hard routing
        // and finite differences stay valid.
        let names = ["ctrl.g3.pred.w1", "ctrl.g3.w_c", "ctrl.g3.e_cheap", "ctrl.g3.pred.b2"];
        let inputs: Vec<(&str, Tensor<f64>)> =
            names.iter().map(|n| (*n, store.value(store.id(n)).clone())).collect();
        let rep = finite_difference_check(&inputs, 3, seed ^ (i as u64) ^ 0x5a, |g, leaves| {
            let mut vars = store.bind_all(g);
            for (k, n) in names.iter().enumerate() {
                vars[store.id(n).0] = leaves[k];
            }
            let out = model_forward(
                g, &store, &vars, &cfg, &gate, &tokens,
                &ForcingPlan::gate(cfg.n_controlled), Some(&G3Controller),
            )
            .unwrap();
            let proj = store.value(store.id("ctrl.g3.target_proj"));
            let mut acc: Option<Var> = None;
            for tr in &out.traces {
                let zf = project_targets(g.value(tr.h_full.unwrap()), proj);
                let zc = project_targets(g.value(tr.h_cheap.unwrap()), proj);
                let l = jepa_pair_loss(g, tr.q_full.unwrap(), tr.q_cheap.unwrap(), &zf, &zc);
                acc = Some(match acc {
                    Some(a) => g.add(a, l),
                    None => l,
                });
            }
            let n = out.traces.len() as f64;
            g.affine(acc.unwrap(), 1.0 / n, 0.0)
        });
        track("jepa", i, rep);

        // Utility and rank terms: scores from the MLP controller over fixed
        // activations, regressed and ranked against synthetic labels.
        let t = cfg.seq_len;
        let act = gaussian::<f64>(vec![t, cfg.d_model], 1.0, &mut rng);
        let labels: Vec<f64> = (0..t - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label_t = Tensor::new(vec![t - 1], labels.clone());
        let pairs: Vec<RankPair> = (0..6)
            .map(|_| {
                let i = rng.gen_range(0..t - 2);
                let j = rng.gen_range(i + 1..t - 1);
                RankPair { seq: 0, i, j, neg_sign: if labels[i] > labels[j] { -1.0 } else { 1.0 } }
            })
            .collect();
        let g1 = G1Controller::standard(&cfg);
        let names = ["ctrl.g1.w1", "ctrl.g1.b1", "ctrl.g1.w2", "ctrl.g1.b2"];
        let inputs: Vec<(&str, Tensor<f64>)> =
            names.iter().map(|n| (*n, store.value(store.id(n)).clone())).collect();
        for term in ["util", "rank"] {
            let rep = finite_difference_check(
                &inputs,
                3,
                seed ^ (i as u64) ^ 0xc3,
                |g, leaves| {
                    let mut vars = store.bind_all(g);
                    for (k, n) in names.iter().enumerate() {
                        vars[store.id(n).0] = leaves[k];
                    }
                    let a = g.constant(act.clone());
                    let u = g1.score(g, &store, &vars, 0, a).u;
                    if term == "util" {
                        let idx: Vec<usize> = (0..t - 1).collect();
                        let ul = g.gather(u, &idx);
                        let h = g.huber_vs(ul, &label_t, 1.0);
                        g.mean_all(h)
                    } else {
                        let (s, n) = rank_loss_sum(g, &[u], &pairs);
                        g.affine(s, 1.0 / n as f64, 0.0)
                    }
                },
            );
            track(term, i, rep);
        }

        // Budget and alive terms from leaf scores through the soft gate.
        let u1 = gaussian::<f64>(vec![t], 1.0, &mut rng);
        let u2 = gaussian::<f64>(vec![t], 1.0, &mut rng);
        for term in ["budget", "alive"] {
            let rep = finite_difference_check(
                &[("u1", u1.clone()), ("u2", u2.clone())],
                0,
                seed ^ (i as u64) ^ 0x77,
                |g, leaves| {
                    let pbars: Vec<Var> = leaves
                        .iter()
                        .map(|&u| {
                            let p = soft_gate(g, u, 2.0);
                            g.mean_all(p)
                        })
                        .collect();
                    if term == "budget" {
                        budget_loss(g, &pbars, 0.5)
                    } else {
                        // floor above the typical mean so the hinge is active
                        alive_loss(g, &pbars, 0.8)
                    }
                },
            );
            track(term, i, rep);
        }

        // Straight-through path: the analytic gradient of the hard decision
        // must equal the soft sigmoid derivative exactly.
        let uvals = gaussian::<f64>(vec![t], 1.0, &mut rng);
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let u = g.leaf(uvals.clone());
        let dec = gate_decide(&mut g, u, &gate);
        let s = g.sum_all(dec.m_st);
        g.backward(s);
        let got = g.grad(u).unwrap().clone();
        let tau = gate.tau;
        for (k, &uv) in uvals.data().iter().enumerate() {
            let sig = 1.0 / (1.0 + (-uv / tau).exp());
            let want = sig * (1.0 - sig) / tau;
            let err = (got.data()[k] - want).abs();
            if err > 1e-9 {
                return CheckReport::new(
                    "gradients",
                    false,
                    format!("straight-through grad off by {err} at config {i}"),
                );
            }
        }
        st_checked += t;
    }
    drop(track);

    CheckReport::new(
        "gradients",
        worst < tol,
        format!(
            "{n_configs} configs, {} partials, worst rel err {worst:.3e}{}",
            checked + st_checked,
            if worst_at.is_empty() { String::new() } else { format!(" at {worst_at}") }
        ),
    )
}

// ── straight-through forward identity ───────────────────────────────────────

/// Training-mode logits (straight-through mixing) must equal hard-routed
/// inference logits bit for bit.
pub fn check_st_forward_identity(n_draws: usize, seed: u64) -> CheckReport {
    let mut rng = substream(seed, "st-identity");
    let mut max_diff: f64 = 0.0;
    for i in 0..n_draws {
        let cfg = small_config(&mut rng);
        let store = populated_store(&cfg, &mut rng);
        let tokens = random_tokens(&cfg, &mut rng);
        let gate = GateConfig { rho: [0.25, 0.5, 0.75][i % 3], ..GateConfig::default() };

        let run = |ctrl: &dyn DepthController<f64>| -> (Tensor<f64>, Tensor<f64>) {
            let mut g: Graph<f64> = Graph::new(Mode::Train);
            let vars = store.bind_all(&mut g);
            let out = model_forward(
                &mut g, &store, &vars, &cfg, &gate, &tokens,
                &ForcingPlan::gate(cfg.n_controlled), Some(ctrl),
            )
            .unwrap();
            let train_logits = g.value(out.logits).clone();
            let (infer_logits, _) = inference_forward(&store, &cfg, &gate, &tokens, ctrl).unwrap();
            (train_logits, infer_logits)
        };
        let g1 = G1Controller::standard(&cfg);
        let (a, b) = if i % 2 == 0 { run(&g1) } else { run(&G3Controller) };
        max_diff = max_diff.max(a.max_abs_diff(&b));
    }
    CheckReport::new(
        "st-forward-identity",
        max_diff == 0.0,
        format!("{n_draws} draws, max |train - inference| = {max_diff:.3e}"),
    )
}

// ── zero-init identity ──────────────────────────────────────────────────────

/// At initialization the cheap branch is an exact residual identity: forcing
/// cheap everywhere leaves every controlled layer's output equal to its
/// post-attention input.
pub fn check_zero_init_identity(n_configs: usize, seed: u64) -> CheckReport {
    let mut rng = substream(seed, "zero-init");
    let mut max_diff: f64 = 0.0;
    for _ in 0..n_configs {
        let cfg = small_config(&mut rng);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_dense(&mut store, &cfg, rng.gen(), false);
        register_cheap(&mut store, &cfg, rng.gen(), true);
        let tokens = random_tokens(&cfg, &mut rng);

        let mut g: Graph<f64> = Graph::new(Mode::NoGrad);
        let vars = store.bind_all(&mut g);
        let out = model_forward(
            &mut g, &store, &vars, &cfg, &GateConfig::default(), &tokens,
            &ForcingPlan::all_cheap(cfg.n_controlled), None,
        )
        .unwrap();
        for tr in &out.traces {
            max_diff = max_diff.max(g.value(tr.h_out).max_abs_diff(g.value(tr.a)));
        }
    }
    CheckReport::new(
        "zero-init-identity",
        max_diff == 0.0,
        format!("{n_configs} configs, max |h_out - a| = {max_diff:.3e}"),
    )
}

// ── compute proxy arithmetic ────────────────────────────────────────────────

/// Reference-scale cost-model bands: inference ratio, the oracle-free
/// training ratio, and the refresh overhead between them.
pub fn check_proxy_arithmetic() -> CheckReport {
    let cfg = ModelConfig::reference();
    let mlp = CostModel::new(&cfg, 0.5, ControllerCost::Mlp { hidden: 160 });
    let guided = CostModel::new(&cfg, 0.5, ControllerCost::Guided);

    let infer = mlp.infer_vs_full();
    let a3_g1 = mlp.train_vs_full(false, None);
    let a3_g3 = guided.train_vs_full(true, None);
    let standard_g3 = guided.train_vs_full(true, Some(5));
    let delta = standard_g3 - a3_g3;

    let ok = (0.545..=0.555).contains(&infer)
        && (1.05..=1.12).contains(&a3_g1)
        && (1.05..=1.12).contains(&a3_g3)
        && delta >= 0.30;
    CheckReport::new(
        "proxy-arithmetic",
        ok,
        format!(
            "infer {infer:.4}, a3-g1 {a3_g1:.4}, a3-g3 {a3_g3:.4}, refresh delta {delta:.4}"
        ),
    )
}

// ── oracle correctness ──────────────────────────────────────────────────────

/// (a) labels are bit-identical across invocations, (b) the shared-prefix
/// construction matches naive from-scratch forks bitwise, (c) computing
/// labels leaks zero gradient into an otherwise identical step.
pub fn check_oracle(seed: u64) -> CheckReport {
    let mut rng = substream(seed, "oracle-check");
    let cfg = small_config(&mut rng);
    let store = populated_store(&cfg, &mut rng);
    let tokens = random_tokens(&cfg, &mut rng);
    let targets: Vec<usize> = tokens[1..].to_vec();
    let gate = GateConfig::default();
    let ocfg = OracleConfig::default();

    let labels = |()| {
        utility_labels(&store, &cfg, &gate, &ocfg, &tokens, &targets, &G3Controller).unwrap()
    };
    let (l1, _) = labels(());
    let (l2, _) = labels(());
    if l1 != l2 {
        return CheckReport::new("oracle", false, "labels differ across invocations".into());
    }

    // naive construction: full forward passes per fork, no prefix sharing
    let ce_of = |plan: &ForcingPlan| -> Vec<f64> {
        let mut g: Graph<f64> = Graph::new(Mode::NoGrad);
        let vars = store.bind_all(&mut g);
        let out =
            model_forward(&mut g, &store, &vars, &cfg, &gate, &tokens, plan, None).unwrap();
        let logits = g.value(out.logits);
        let v = logits.cols();
        targets
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                let row = &logits.data()[t * v..(t + 1) * v];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() - row[y]
            })
            .collect()
    };
    let full_ce = ce_of(&ForcingPlan::all_full(cfg.n_controlled));
    for slot in 0..cfg.n_controlled {
        let cheap_ce = ce_of(&ForcingPlan::fork_cheap_at(cfg.n_controlled, slot));
        let naive = labels_from_windows(&cheap_ce, &full_ce, ocfg.window, ocfg.decay);
        if naive != l1[slot] {
            return CheckReport::new(
                "oracle",
                false,
                format!("shared-prefix labels diverge from naive forks at slot {slot}"),
            );
        }
    }

    // gradient leakage: identical training grads with and without labels
    let grads = |with_labels: bool| -> Vec<Option<Tensor<f64>>> {
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let vars = store.bind_all(&mut g);
        let out = model_forward(
            &mut g, &store, &vars, &cfg, &gate, &tokens,
            &ForcingPlan::gate(cfg.n_controlled), Some(&G3Controller),
        )
        .unwrap();
        if with_labels {
            let _ = labels(());
        }
        let logits = g.slice_rows(out.logits, 0, tokens.len() - 1);
        let lm = lm_loss(&mut g, logits, &targets);
        g.backward(lm);
        vars.iter().map(|&v| g.grad(v).cloned()).collect()
    };
    let (ga, gb) = (grads(false), grads(true));
    for (a, b) in ga.iter().zip(&gb) {
        let same = match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => x.data() == y.data(),
            _ => false,
        };
        if !same {
            return CheckReport::new("oracle", false, "label computation leaked gradient".into());
        }
    }
    let passes_expected = 1 + cfg.n_controlled;
    let (_, passes) = labels(());
    CheckReport::new(
        "oracle",
        passes == passes_expected,
        format!(
            "bit-identical labels, naive forks match, zero grad leakage, {passes} passes per sequence"
        ),
    )
}

// ── derangement sampling ────────────────────────────────────────────────────

/// Sampled target permutations must be fixed-point-free bijections.
pub fn check_derangements(samples: usize, seed: u64) -> CheckReport {
    let mut rng = substream(seed, "derangement-check");
    for k in 0..samples {
        let n = rng.gen_range(2..=257);
        let pi = match cyclic_derangement(n, &mut rng) {
            Ok(p) => p,
            Err(e) => {
                return CheckReport::new("derangements", false, format!("sample {k}: {e}"))
            }
        };
        let mut seen = vec![false; n];
        for (i, &p) in pi.iter().enumerate() {
            if p == i || p >= n || seen[p] {
                return CheckReport::new(
                    "derangements",
                    false,
                    format!("sample {k} (n={n}) is not a fixed-point-free bijection"),
                );
            }
            seen[p] = true;
        }
    }
    CheckReport::new("derangements", true, format!("{samples} samples, all valid"))
}

// ── summary statistics fidelity ─────────────────────────────────────────────

/// Aggregation arithmetic against hand-computed values, including the
/// first-crossing threshold rule with a never-hit threshold.
pub fn check_summary_fidelity() -> CheckReport {
    let fail = |msg: &str| CheckReport::new("summary-fidelity", false, msg.to_string());

    let (m, s) = mean_std(&[5.06, 5.07]);
    if (m - 5.065).abs() > 1e-12 || (s - 0.005 * 2.0f64.sqrt()).abs() > 1e-12 {
        return fail("mean/std off the hand-computed values");
    }

    let d = paired_deltas(&[1.0, 2.0, 3.0], &[0.5, 1.0, 3.5]).unwrap();
    if d.deltas != vec![0.5, 1.0, -0.5] || d.consistent != 2 {
        return fail("paired deltas off the hand-computed values");
    }
    if (d.mean - (1.0 / 3.0)).abs() > 1e-12 {
        return fail("paired delta mean off");
    }

    let curve = vec![
        EvalPoint { step: 500, eval_lm: 5.08 },
        EvalPoint { step: 1000, eval_lm: 5.074 },
        EvalPoint { step: 1500, eval_lm: 5.076 },
    ];
    let s = lm_summary(&curve, &[5.075, 5.0], 1000, 1500).unwrap();
    if s.hits != vec![Some(1000), None] {
        return fail("threshold first-crossing (incl. never-hit) wrong");
    }
    if s.best != 5.074 || s.endpoint != 5.076 {
        return fail("best/endpoint wrong");
    }
    if (s.avg_half - (5.08 + 5.074) / 2.0).abs() > 1e-12 {
        return fail("prefix-window average wrong");
    }
    CheckReport::new("summary-fidelity", true, "mean/std, paired deltas, threshold hits".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_at_small_sample_counts() {
        for rep in [
            check_gradients(3, 40),
            check_st_forward_identity(6, 41),
            check_zero_init_identity(4, 42),
            check_proxy_arithmetic(),
            check_oracle(43),
            check_derangements(500, 44),
            check_summary_fidelity(),
        ] {
            assert!(rep.passed, "{}: {}", rep.name, rep.detail);
        }
    }
}

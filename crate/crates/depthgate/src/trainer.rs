//! Training loops: the dense backbone pre-phase, the routed controller
//! phase with the full auxiliary loss stack, hard-routed evaluation, and
//! run orchestration (JSONL log, summary JSON, abort dumps).

use crate::checkpoint::{self, Entry};
use crate::controller::{
    costmatch_hidden, cyclic_derangement, g1_hidden, jepa_pair_loss, project_targets,
    G1Controller, G3Controller,
};
use crate::data::{BatchStream, Corpus};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, GateKind};
use crate::gating::{alive_loss, budget_loss};
use crate::graph::{Graph, Mode, Var};
use crate::metrics::{collapse_diag, score_variance, ControllerCost, CostModel, EvalPoint};
use crate::model::{
    lm_loss, model_forward, register_cheap, register_dense, DepthController, ForcingPlan,
    ModelConfig,
};
use crate::optim::{adamw_step, clip_global_norm, OptimConfig, ParamStore};
use crate::oracle::{
    huber_util_sum, labels_due, rank_loss_sum, sample_rank_pairs, utility_labels,
};
use crate::tensor::{substream, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Stamped into every run directory so a log can be tied to the code that
/// produced it.
pub const VERSION: &str = concat!("depthgate-", env!("CARGO_PKG_VERSION"));

/// One training step's log line. Every field must be finite; a non-finite
/// value aborts the run instead of being written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub jepa_loss: f64,
    pub util_loss: f64,
    pub rank_loss: f64,
    pub budget_loss: f64,
    pub alive_loss: f64,
    pub total: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Mean soft gate probability per controlled layer (batch x tokens).
    pub mean_gate_prob: Vec<f64>,
    /// Fraction of tokens routed full per controlled layer.
    pub full_ratio: Vec<f64>,
    /// Mean l2 between the predictor's full/cheap summaries (0 for MLP gates).
    pub diag_qf_qc_l2: f64,
    pub diag_qf_qc_cos: f64,
    /// Population variance of gate scores across layers, batch, and tokens.
    pub diag_util_score_var: f64,
    /// Controlled-layer work this step, in full-FFN token-layer units.
    pub compute_units: f64,
    /// Oracle forward passes executed this step (0 off the refresh schedule).
    pub oracle_passes: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_lm_loss: f64,
}

/// End-of-run digest written next to the log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub dtype: String,
    pub best_eval_lm: f64,
    pub endpoint_eval_lm: f64,
    pub avg_lm_first_half: f64,
    pub avg_lm_full: f64,
    /// First step at or under each configured threshold; None if never hit.
    pub hit_steps: Vec<Option<usize>>,
    /// Hard-routed eval of the frozen backbone with every layer forced full.
    pub reference_all_full_eval_lm: f64,
    pub grad_norm_mean: f64,
    /// Mean per-step controlled-layer units / (C*T*B), as executed.
    pub compute_vs_full_measured: f64,
    /// Same quantity from the closed-form cost model (refresh amortized 1/I).
    pub compute_vs_full_model: f64,
    pub infer_vs_full: f64,
    pub final_diag_qf_qc_l2: f64,
    pub final_diag_qf_qc_cos: f64,
    pub final_diag_util_score_var: f64,
    pub final_mean_gate_prob: Vec<f64>,
    pub final_full_ratio: Vec<f64>,
    pub total_oracle_passes: usize,
    pub trainable_scalars: usize,
}

/// Where the frozen backbone weights come from.
pub enum BackboneSource<'a> {
    /// Run the dense pre-phase in-process (deterministic given the config).
    PretrainInline,
    /// Load a checkpoint produced by `pretrain_backbone` + `checkpoint::save`.
    Checkpoint(&'a Path),
}

/// One parsed line of a run log.
#[derive(Clone, Debug)]
pub enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Read a `log.jsonl` back. Eval records are distinguished by their exact
/// field set, so parsing is unambiguous.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(ev) = serde_json::from_str::<EvalRecord>(line) {
            out.push(LogLine::Eval(ev));
        } else {
            let step = serde_json::from_str::<StepRecord>(line).map_err(|e| {
                Error::input(format!("bad log line {} in {}: {e}", i + 1, path.display()))
            })?;
            out.push(LogLine::Step(step));
        }
    }
    Ok(out)
}

// ── value-level cross entropy (eval path, no tape) ──────────────────────────

/// Mean next-token CE over the first `targets.len()` logit rows, accumulated
/// in f64 regardless of the model scalar.
pub fn ce_value<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> f64 {
    let v = logits.cols();
    assert!(targets.len() <= logits.rows(), "more targets than logit rows");
    let mut acc = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = &logits.data()[t * v..(t + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
        let lse = max + row.iter().map(|&x| (x.f64() - max).exp()).sum::<f64>().ln();
        acc += lse - row[y].f64();
    }
    acc / targets.len() as f64
}

// ── dense pre-phase ─────────────────────────────────────────────────────────

/// Train a dense backbone (all layers full, no gates) on the LM loss alone.
/// Every dense parameter is trainable; cheap paths and controllers do not
/// exist yet. Returns the trained store for checkpointing.
pub fn pretrain_backbone<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let model = &cfg.model;
    let mut store: ParamStore<S> = ParamStore::new();
    register_dense(&mut store, model, cfg.pretrain_seed, true);

    let mut optim = cfg.optim;
    optim.total_steps = cfg.pretrain_steps;
    optim.warmup_steps = (cfg.pretrain_steps / 10).max(1);
    optim.validate()?;

    let mut stream = BatchStream::new(&corpus.train, model.seq_len, cfg.pretrain_seed, "pretrain")?;
    let plan = ForcingPlan::all_full(model.n_controlled);
    for step in 1..=cfg.pretrain_steps {
        let batch = stream.next_batch(cfg.batch_size);
        let mut g: Graph<S> = Graph::new(Mode::Train);
        let vars = store.bind_all(&mut g);
        let mut acc: Option<Var> = None;
        for tokens in &batch {
            let out = model_forward(&mut g, &store, &vars, model, &cfg.gate_cfg, tokens, &plan, None)?;
            let logits = g.slice_rows(out.logits, 0, tokens.len() - 1);
            let lm = lm_loss(&mut g, logits, &tokens[1..]);
            acc = Some(match acc {
                Some(a) => g.add(a, lm),
                None => lm,
            });
        }
        let sum = acc.expect("nonempty batch");
        let loss = g.affine(sum, S::from64(1.0 / batch.len() as f64), S::zero());
        let loss_v = g.value(loss).item().f64();
        g.backward(loss);
        let mut grads: Vec<Option<Tensor<S>>> =
            vars.iter().map(|&v| g.grad(v).cloned()).collect();
        let norm = clip_global_norm(&mut grads, optim.clip_norm);
        if !loss_v.is_finite() || !norm.is_finite() {
            return Err(Error::Aborted {
                step,
                reason: format!("pre-phase non-finite loss {loss_v} / grad norm {norm}"),
            });
        }
        adamw_step(&mut store, &grads, step, &optim);
    }
    Ok(store)
}

// ── run state ───────────────────────────────────────────────────────────────

/// Everything that persists across the controller-phase steps of one run.
pub struct TrainState<S: Scalar> {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub store: ParamStore<S>,
    pub controller: Box<dyn DepthController<S>>,
    pub cost: CostModel,
    pub optim: OptimConfig,
    rank_rng: ChaCha8Rng,
    derange_rng: ChaCha8Rng,
}

/// Verify a loaded backbone matches the model's dense parameter set exactly.
fn validate_dense(entries: &[Entry], model: &ModelConfig) -> Result<()> {
    let mut expected: ParamStore<f64> = ParamStore::new();
    register_dense(&mut expected, model, 0, false);
    let want: Vec<(String, Vec<usize>)> = expected
        .iter_names()
        .map(|(id, name, _)| (name.to_string(), expected.value(id).shape().to_vec()))
        .collect();
    if entries.len() != want.len() {
        return Err(Error::Checkpoint(format!(
            "backbone has {} parameters, model needs {}",
            entries.len(),
            want.len()
        )));
    }
    for (e, (name, shape)) in entries.iter().zip(&want) {
        if &e.name != name || e.tensor_f64.shape() != &shape[..] {
            return Err(Error::Checkpoint(format!(
                "backbone parameter mismatch: found {} {:?}, expected {} {:?}",
                e.name,
                e.tensor_f64.shape(),
                name,
                shape
            )));
        }
    }
    Ok(())
}

/// Assemble the controller-phase store: dense weights frozen from the
/// checkpoint entries, cheap paths and the controller freshly initialized
/// from the run seed and trainable.
pub fn build_run_state<S: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    dense: &[Entry],
) -> Result<TrainState<S>> {
    cfg.validate()?;
    validate_dense(dense, &cfg.model)?;
    let mut store: ParamStore<S> = ParamStore::new();
    checkpoint::register_all(dense, &mut store, false);
    register_cheap(&mut store, &cfg.model, seed, true);

    let (controller, ctrl_cost): (Box<dyn DepthController<S>>, ControllerCost) = match cfg.gate {
        GateKind::G1 => {
            let c = G1Controller::standard(&cfg.model);
            c.register(&mut store, &cfg.model, seed);
            (Box::new(c), ControllerCost::Mlp { hidden: g1_hidden(&cfg.model) })
        }
        GateKind::G1CostMatch => {
            let c = G1Controller::cost_matched(&cfg.model);
            c.register(&mut store, &cfg.model, seed);
            (Box::new(c), ControllerCost::Mlp { hidden: costmatch_hidden(&cfg.model) })
        }
        GateKind::G3 => {
            G3Controller::register(&mut store, &cfg.model, seed);
            (Box::new(G3Controller), ControllerCost::Guided)
        }
    };
    let cost = CostModel::new(&cfg.model, cfg.gate_cfg.rho, ctrl_cost);
    let mut optim = cfg.optim;
    optim.total_steps = cfg.steps;
    optim.validate()?;
    Ok(TrainState {
        cfg: cfg.clone(),
        seed,
        store,
        controller,
        cost,
        optim,
        rank_rng: substream(seed, "rank-pairs"),
        derange_rng: substream(seed, "a2-derangement"),
    })
}

// ── one training step ───────────────────────────────────────────────────────

fn weighted_add<S: Scalar>(g: &mut Graph<S>, acc: Var, term: Var, w: f64) -> Var {
    if w == 1.0 {
        g.add(acc, term)
    } else {
        let scaled = g.affine(term, S::from64(w), S::zero());
        g.add(acc, scaled)
    }
}

fn mean_of<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.affine(acc, S::from64(1.0 / terms.len() as f64), S::zero())
}

pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    step: usize,
    batch: &[Vec<usize>],
) -> Result<StepRecord> {
    let cfg = &state.cfg;
    let model = &cfg.model;
    let (c_slots, t, b) = (model.n_controlled, model.seq_len, batch.len());
    let t_lab = t - 1;
    let w = cfg.weights;

    // Oracle labels first: value-level forwards with no tape, so they cannot
    // leak gradient. labels[b][slot][t] over the first t-1 positions.
    let labels_now = cfg.uses_oracle() && labels_due(step, &cfg.oracle);
    let mut labels: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut oracle_passes = 0usize;
    if labels_now {
        for tokens in batch {
            let (labs, passes) = utility_labels(
                &state.store,
                model,
                &cfg.gate_cfg,
                &cfg.oracle,
                tokens,
                &tokens[1..],
                &*state.controller,
            )?;
            labels.push(labs);
            oracle_passes += passes;
        }
    }

    let mut g: Graph<S> = Graph::new(Mode::Train);
    let vars = state.store.bind_all(&mut g);
    let plan = ForcingPlan::gate(c_slots);
    let proj = cfg.gate.uses_predictor().then(|| {
        state.store.value(state.store.id("ctrl.g3.target_proj")).clone()
    });

    let mut lm_terms = Vec::with_capacity(b);
    // per slot, per sequence
    let mut u_vars: Vec<Vec<Var>> = vec![Vec::with_capacity(b); c_slots];
    let mut p_means: Vec<Vec<Var>> = vec![Vec::with_capacity(b); c_slots];
    let mut u_values: Vec<f64> = Vec::with_capacity(c_slots * b * t);
    let mut full_ratio = vec![0.0; c_slots];
    // (slot, seq, q_full, q_cheap, z_full, z_cheap) for the JEPA term
    let mut jepa_parts: Vec<(usize, Var, Var, Tensor<S>, Tensor<S>)> = Vec::new();

    for (bi, tokens) in batch.iter().enumerate() {
        let out = model_forward(
            &mut g,
            &state.store,
            &vars,
            model,
            &cfg.gate_cfg,
            tokens,
            &plan,
            Some(&*state.controller),
        )?;
        let logits = g.slice_rows(out.logits, 0, t_lab);
        lm_terms.push(lm_loss(&mut g, logits, &tokens[1..]));

        for trace in &out.traces {
            let slot = model.slot_of(trace.layer);
            let gate = trace.gate.as_ref().expect("gated plan records a decision");
            u_vars[slot].push(gate.u);
            let pm = g.mean_all(gate.p);
            p_means[slot].push(pm);
            u_values.extend(g.value(gate.u).data().iter().map(|x| x.f64()));
            if bi == 0 {
                full_ratio[slot] = gate.k as f64 / t as f64;
            } else {
                debug_assert_eq!(full_ratio[slot], gate.k as f64 / t as f64);
            }
            if let Some(proj) = &proj {
                let qf = trace.q_full.expect("guided gate emits summaries");
                let qc = trace.q_cheap.expect("guided gate emits summaries");
                let zf = project_targets(g.value(trace.h_full.expect("gate mode runs both")), proj);
                let zc = project_targets(g.value(trace.h_cheap.expect("gate mode runs both")), proj);
                jepa_parts.push((slot, qf, qc, zf, zc));
            }
        }
    }

    let lm = mean_of(&mut g, &lm_terms);

    // JEPA alignment; under the derangement ablation one shared permutation
    // of the pooled batch x token rows breaks the token-wise pairing for
    // both actions at every layer.
    let mut diag_l2 = 0.0;
    let mut diag_cos = 0.0;
    let jepa = if proj.is_some() {
        if cfg.a2_shuffled {
            // one shared permutation of the pooled batch x token rows,
            // applied per slot and action
            let pi = cyclic_derangement(b * t, &mut state.derange_rng)?;
            let ds = jepa_parts[0].3.cols();
            for slot in 0..c_slots {
                for action in 0..2 {
                    let mut pooled: Vec<S> = Vec::with_capacity(b * t * ds);
                    for part in jepa_parts.iter().filter(|p| p.0 == slot) {
                        let z = if action == 0 { &part.3 } else { &part.4 };
                        pooled.extend_from_slice(z.data());
                    }
                    for (bi, part) in
                        jepa_parts.iter_mut().filter(|p| p.0 == slot).enumerate()
                    {
                        let z = if action == 0 { &mut part.3 } else { &mut part.4 };
                        let rows = z.data_mut();
                        for ti in 0..t {
                            let src = pi[bi * t + ti];
                            rows[ti * ds..(ti + 1) * ds]
                                .copy_from_slice(&pooled[src * ds..(src + 1) * ds]);
                        }
                    }
                }
            }
        }
        let mut terms = Vec::with_capacity(jepa_parts.len());
        for (_, qf, qc, zf, zc) in &jepa_parts {
            let (l2, cos) = collapse_diag(g.value(*qf), g.value(*qc));
            diag_l2 += l2 / jepa_parts.len() as f64;
            diag_cos += cos / jepa_parts.len() as f64;
            terms.push(jepa_pair_loss(&mut g, *qf, *qc, zf, zc));
        }
        Some(mean_of(&mut g, &terms))
    } else {
        None
    };

    // Score anchoring: Huber regression on the labels plus sampled-pair
    // ranking. The rank RNG advances only on refresh steps.
    let (util, rank) = if labels_now {
        let mut util_acc: Option<Var> = None;
        let mut util_n = 0usize;
        if w.util > 0.0 {
            for slot in 0..c_slots {
                for (bi, u) in u_vars[slot].iter().enumerate() {
                    let (s, n) =
                        huber_util_sum(&mut g, *u, &labels[bi][slot], cfg.oracle.huber_delta);
                    util_n += n;
                    util_acc = Some(match util_acc {
                        Some(a) => g.add(a, s),
                        None => s,
                    });
                }
            }
        }
        let util = util_acc.map(|s| {
            g.affine(s, S::from64(1.0 / util_n as f64), S::zero())
        });

        let mut rank_acc: Option<Var> = None;
        let mut rank_n = 0usize;
        if w.rank > 0.0 {
            for slot in 0..c_slots {
                let per_seq: Vec<Vec<f64>> =
                    labels.iter().map(|lb| lb[slot].clone()).collect();
                let pairs =
                    sample_rank_pairs(&per_seq, cfg.oracle.rank_pairs, &mut state.rank_rng);
                let (s, n) = rank_loss_sum(&mut g, &u_vars[slot], &pairs);
                if n > 0 {
                    rank_n += n;
                    rank_acc = Some(match rank_acc {
                        Some(a) => g.add(a, s),
                        None => s,
                    });
                }
            }
        }
        let rank = rank_acc.map(|s| {
            g.affine(s, S::from64(1.0 / rank_n as f64), S::zero())
        });
        (util, rank)
    } else {
        (None, None)
    };

    // Budget and alive-floor pressure on the per-layer mean probabilities.
    let pbars: Vec<Var> = p_means.iter().map(|ms| mean_of(&mut g, ms)).collect();
    let budget = budget_loss(&mut g, &pbars, cfg.gate_cfg.rho);
    let alive = alive_loss(&mut g, &pbars, cfg.gate_cfg.p_min);

    let mut total = lm;
    if let Some(j) = jepa {
        // A1 keeps the value for the collapse diagnostics but adds nothing.
        if w.jepa > 0.0 {
            total = weighted_add(&mut g, total, j, w.jepa);
        }
    }
    if let Some(u) = util {
        total = weighted_add(&mut g, total, u, w.util);
    }
    if let Some(r) = rank {
        total = weighted_add(&mut g, total, r, w.rank);
    }
    total = weighted_add(&mut g, total, budget, w.budget);
    total = weighted_add(&mut g, total, alive, w.alive);

    let val = |g: &Graph<S>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().f64());
    let lm_v = g.value(lm).item().f64();
    let jepa_v = val(&g, jepa);
    let util_v = val(&g, util);
    let rank_v = val(&g, rank);
    let budget_v = g.value(budget).item().f64();
    let alive_v = g.value(alive).item().f64();
    let total_v = g.value(total).item().f64();

    g.backward(total);
    let mut grads: Vec<Option<Tensor<S>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    let grad_norm = clip_global_norm(&mut grads, state.optim.clip_norm);

    let mean_gate_prob: Vec<f64> =
        pbars.iter().map(|&p| g.value(p).item().f64()).collect();
    let record = StepRecord {
        step,
        lm_loss: lm_v,
        jepa_loss: jepa_v,
        util_loss: util_v,
        rank_loss: rank_v,
        budget_loss: budget_v,
        alive_loss: alive_v,
        total: total_v,
        grad_norm,
        mean_gate_prob,
        full_ratio,
        diag_qf_qc_l2: diag_l2,
        diag_qf_qc_cos: diag_cos,
        diag_util_score_var: score_variance(&u_values),
        compute_units: step_units(state, labels_now, b),
        oracle_passes,
    };
    check_finite(&record)?;
    adamw_step(&mut state.store, &grads, step, &state.optim);
    Ok(record)
}

/// Controlled-layer work this step in full-FFN token-layer units: both
/// branches plus the controller on every token, target projections when the
/// predictor exists, and the fork passes on refresh steps.
fn step_units<S: Scalar>(state: &TrainState<S>, labels_now: bool, b: usize) -> f64 {
    let cfg = &state.cfg;
    let cm = &state.cost;
    let mut per_token_layer = 1.0 + cm.cheap_cost() + cm.controller_cost();
    if cfg.gate.uses_predictor() {
        per_token_layer += cm.target_cost();
    }
    if labels_now {
        per_token_layer += cm.oracle_refresh_cost();
    }
    (b * cfg.model.seq_len * cfg.model.n_controlled) as f64 * per_token_layer
}

fn check_finite(r: &StepRecord) -> Result<()> {
    let scalars = [
        ("lm_loss", r.lm_loss),
        ("jepa_loss", r.jepa_loss),
        ("util_loss", r.util_loss),
        ("rank_loss", r.rank_loss),
        ("budget_loss", r.budget_loss),
        ("alive_loss", r.alive_loss),
        ("total", r.total),
        ("grad_norm", r.grad_norm),
        ("diag_qf_qc_l2", r.diag_qf_qc_l2),
        ("diag_qf_qc_cos", r.diag_qf_qc_cos),
        ("diag_util_score_var", r.diag_util_score_var),
    ];
    for (name, v) in scalars {
        if !v.is_finite() {
            return Err(Error::Aborted {
                step: r.step,
                reason: format!("non-finite {name} = {v}"),
            });
        }
    }
    if r.mean_gate_prob.iter().chain(&r.full_ratio).any(|v| !v.is_finite()) {
        return Err(Error::Aborted {
            step: r.step,
            reason: "non-finite gate statistics".to_string(),
        });
    }
    Ok(())
}

// ── evaluation ──────────────────────────────────────────────────────────────

/// Hard-routed eval: the inference path (top-k selection, no tape) over a
/// fixed, seeded slice of the validation pool.
pub fn evaluate<S: Scalar>(state: &TrainState<S>, val: &[u8]) -> Result<f64> {
    let cfg = &state.cfg;
    let mut stream =
        BatchStream::new(val, cfg.model.seq_len, cfg.pretrain_seed, "eval")?;
    let mut acc = 0.0;
    let n = cfg.eval_batches * cfg.batch_size;
    for _ in 0..n {
        let tokens = stream.next_window();
        let (logits, _) = crate::model::inference_forward(
            &state.store,
            &cfg.model,
            &cfg.gate_cfg,
            &tokens,
            &*state.controller,
        )?;
        acc += ce_value(&logits, &tokens[1..]);
    }
    Ok(acc / n as f64)
}

/// Same eval windows, but every controlled layer forced full. Independent of
/// the trainable parameters, so one measurement per run suffices.
pub fn evaluate_all_full<S: Scalar>(state: &TrainState<S>, val: &[u8]) -> Result<f64> {
    let cfg = &state.cfg;
    let mut stream =
        BatchStream::new(val, cfg.model.seq_len, cfg.pretrain_seed, "eval")?;
    let plan = ForcingPlan::all_full(cfg.model.n_controlled);
    let mut acc = 0.0;
    let n = cfg.eval_batches * cfg.batch_size;
    for _ in 0..n {
        let tokens = stream.next_window();
        let mut g: Graph<S> = Graph::new(Mode::NoGrad);
        let vars = state.store.bind_all(&mut g);
        let out = model_forward(
            &mut g,
            &state.store,
            &vars,
            &cfg.model,
            &cfg.gate_cfg,
            &tokens,
            &plan,
            None,
        )?;
        acc += ce_value(g.value(out.logits), &tokens[1..]);
    }
    Ok(acc / n as f64)
}

// ── run orchestration ───────────────────────────────────────────────────────

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::input(format!("cannot encode {}: {e}", path.display())))?;
    std::fs::write(path, s)
        .map_err(|e| Error::input(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Execute one experiment end to end. Writes into `out_dir/<name>-s<seed>/`:
/// `config.json`, `log.jsonl` (step records interleaved with eval records),
/// `summary.json`, and `backbone.ckpt` when pretraining ran inline. Returns
/// the summary.
pub fn run_experiment<S: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus: &Corpus,
    out_dir: &Path,
    backbone: BackboneSource,
) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = out_dir.join(format!("{}-s{seed}", cfg.name));
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| Error::input(format!("cannot create {}: {e}", run_dir.display())))?;

    let dense: Vec<Entry> = match backbone {
        BackboneSource::Checkpoint(p) => checkpoint::load(p)?,
        BackboneSource::PretrainInline => {
            let store = pretrain_backbone::<S>(cfg, corpus)?;
            let p = run_dir.join("backbone.ckpt");
            checkpoint::save(&store, &p)?;
            checkpoint::load(&p)?
        }
    };

    let mut state = build_run_state::<S>(cfg, seed, &dense)?;
    #[derive(Serialize)]
    struct ConfigSnapshot<'a> {
        config: &'a ExperimentConfig,
        seed: u64,
        version: &'static str,
        dtype: &'static str,
    }
    write_json(
        &run_dir.join("config.json"),
        &ConfigSnapshot { config: cfg, seed, version: VERSION, dtype: S::DTYPE },
    )?;

    let frozen0 = state.store.frozen_hash();
    let reference_all_full = evaluate_all_full(&state, &corpus.val)?;

    let log_path = run_dir.join("log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| {
        Error::input(format!("cannot create {}: {e}", log_path.display()))
    })?);
    let emit = |log: &mut std::io::BufWriter<std::fs::File>,
                    line: String|
     -> Result<()> {
        log.write_all(line.as_bytes()).map_err(Error::from)?;
        log.write_all(b"\n").map_err(Error::from)?;
        log.flush().map_err(Error::from)?;
        Ok(())
    };

    let mut train = BatchStream::new(&corpus.train, cfg.model.seq_len, seed, "train")?;
    let mut curve: Vec<EvalPoint> = Vec::new();
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut units_sum = 0.0;
    let mut passes_sum = 0usize;
    let mut last: Option<StepRecord> = None;

    // the curve starts at the untrained gate state so the run's own learning
    // is visible from its first point
    let init_eval = evaluate(&state, &corpus.val)?;
    curve.push(EvalPoint { step: 0, eval_lm: init_eval });
    emit(
        &mut log,
        serde_json::to_string(&EvalRecord { step: 0, eval_lm_loss: init_eval })
            .expect("eval record serializes"),
    )?;

    for step in 1..=cfg.steps {
        let batch = train.next_batch(cfg.batch_size);
        let record = match train_step(&mut state, step, &batch) {
            Ok(r) => r,
            Err(Error::Aborted { step, reason }) => {
                #[derive(Serialize)]
                struct AbortDump<'a> {
                    step: usize,
                    reason: &'a str,
                    last_record: &'a Option<StepRecord>,
                }
                write_json(
                    &run_dir.join("abort.json"),
                    &AbortDump { step, reason: &reason, last_record: &last },
                )?;
                return Err(Error::Aborted { step, reason });
            }
            Err(e) => return Err(e),
        };
        grad_norms.push(record.grad_norm);
        units_sum += record.compute_units;
        passes_sum += record.oracle_passes;
        emit(&mut log, serde_json::to_string(&record).expect("record serializes"))?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let eval_lm = evaluate(&state, &corpus.val)?;
            curve.push(EvalPoint { step, eval_lm });
            let line = serde_json::to_string(&EvalRecord { step, eval_lm_loss: eval_lm })
                .expect("eval record serializes");
            emit(&mut log, line)?;
            assert_eq!(
                state.store.frozen_hash(),
                frozen0,
                "frozen backbone changed mid-run"
            );
        }
        last = Some(record);
    }
    assert_eq!(state.store.frozen_hash(), frozen0, "frozen backbone changed by run end");

    let final_rec = last.expect("at least one step ran");
    let lm = crate::metrics::lm_summary(&curve, &cfg.thresholds, cfg.steps / 2, cfg.steps)?;
    let denom = (cfg.batch_size * cfg.model.seq_len * cfg.model.n_controlled) as f64;
    let summary = RunSummary {
        config: cfg.clone(),
        seed,
        version: VERSION.to_string(),
        dtype: S::DTYPE.to_string(),
        best_eval_lm: lm.best,
        endpoint_eval_lm: lm.endpoint,
        avg_lm_first_half: lm.avg_half,
        avg_lm_full: lm.avg_full,
        hit_steps: lm.hits,
        reference_all_full_eval_lm: reference_all_full,
        grad_norm_mean: crate::metrics::grad_norm_mean(&grad_norms)?,
        compute_vs_full_measured: units_sum / cfg.steps as f64 / denom,
        compute_vs_full_model: state.cost.train_vs_full(
            cfg.gate.uses_predictor(),
            cfg.uses_oracle().then_some(cfg.oracle.interval),
        ),
        infer_vs_full: state.cost.infer_vs_full(),
        final_diag_qf_qc_l2: final_rec.diag_qf_qc_l2,
        final_diag_qf_qc_cos: final_rec.diag_qf_qc_cos,
        final_diag_util_score_var: final_rec.diag_util_score_var,
        final_mean_gate_prob: final_rec.mean_gate_prob.clone(),
        final_full_ratio: final_rec.full_ratio.clone(),
        total_oracle_passes: passes_sum,
        trainable_scalars: state.store.trainable_scalars(),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

//! Decoder-only transformer whose last C layers carry a conditional
//! full/cheap FFN pair.
//!
//! Every layer applies pre-norm causal attention. Uncontrolled layers follow
//! with a standard FFN residual. Controlled layers compute both a full FFN
//! branch and a rank-r cheap branch (with its own LayerNorm) and mix them per
//! token through the straight-through mask:
//!
//!   a      = h + Attn(LN1(h))
//!   h_full = a + FFN_full(LN2(a))
//!   h_cheap= a + W_down SiLU(W_up LN2c(a))
//!   h_out  = m_st * h_full + (1 - m_st) * h_cheap
//!
//! The cheap down-projection starts at zero, so h_cheap = a exactly until the
//! optimizer moves it and an all-cheap model is the attention-only skeleton.
//!
//! Forcing plans override the gate per controlled slot, which is how the
//! utility oracle builds its counterfactual passes, and `forward_from` resumes
//! the stack at any layer so those passes can share a prefix.

use crate::error::{Error, Result};
use crate::gating::{gate_decide, GateConfig, GateDecision};
use crate::graph::{Graph, Mode, Var};
use crate::optim::ParamStore;
use crate::tensor::{gaussian, substream, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// How many of the last layers are gated (conditional depth).
    pub n_controlled: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Rank of the cheap branch.
    pub cheap_rank: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Context summary width fed to the guided controller.
    pub d_c: usize,
    /// Predictor output width (shared by targets).
    pub d_s: usize,
    /// Action embedding width.
    pub d_a: usize,
}

impl ModelConfig {
    /// Desk-scale model: small enough to train on one core in minutes while
    /// keeping the structural ratios (cheap_rank/d_ff, gate hidden = d/4).
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            n_controlled: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            cheap_rank: 32,
            vocab: 256,
            seq_len: 64,
            d_c: 16,
            d_s: 8,
            d_a: 4,
        }
    }

    /// Reference scale used for compute accounting only (never trained here).
    pub fn reference() -> Self {
        ModelConfig {
            n_layers: 12,
            n_controlled: 4,
            d_model: 640,
            n_heads: 10,
            d_ff: 2560,
            cheap_rank: 80,
            vocab: 256,
            seq_len: 256,
            d_c: 128,
            d_s: 64,
            d_a: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.cheap_rank,
            self.vocab,
            self.seq_len,
            self.d_c,
            self.d_s,
            self.d_a,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::config("model dims must all be positive"));
        }
        if self.n_controlled > self.n_layers {
            return Err(Error::config("n_controlled cannot exceed n_layers"));
        }
        if self.cheap_rank >= self.d_ff {
            return Err(Error::config("cheap_rank must be strictly below d_ff"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    /// Absolute index of the first controlled layer.
    pub fn first_controlled(&self) -> usize {
        self.n_layers - self.n_controlled
    }

    /// Is absolute layer index `layer` gated?
    pub fn is_controlled(&self, layer: usize) -> bool {
        layer >= self.first_controlled()
    }

    /// Controlled slot (0..C) for an absolute layer index.
    pub fn slot_of(&self, layer: usize) -> usize {
        debug_assert!(self.is_controlled(layer));
        layer - self.first_controlled()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    /// Ask the controller, take the straight-through top-k decision.
    Gate,
    ForceFull,
    ForceCheap,
}

/// Per-controlled-slot execution override.
#[derive(Clone, Debug)]
pub struct ForcingPlan {
    pub modes: Vec<LayerMode>,
}

impl ForcingPlan {
    pub fn gate(n_controlled: usize) -> Self {
        ForcingPlan { modes: vec![LayerMode::Gate; n_controlled] }
    }

    pub fn all_full(n_controlled: usize) -> Self {
        ForcingPlan { modes: vec![LayerMode::ForceFull; n_controlled] }
    }

    pub fn all_cheap(n_controlled: usize) -> Self {
        ForcingPlan { modes: vec![LayerMode::ForceCheap; n_controlled] }
    }

    /// Oracle fork: cheap at `slot`, full everywhere after it. Slots before
    /// the fork are irrelevant when the caller resumes from the fork layer,
    /// but are set to full so a from-scratch pass matches the shared-prefix
    /// construction.
    pub fn fork_cheap_at(n_controlled: usize, slot: usize) -> Self {
        let mut modes = vec![LayerMode::ForceFull; n_controlled];
        modes[slot] = LayerMode::ForceCheap;
        ForcingPlan { modes }
    }
}

/// What a controller hands back for one controlled slot.
pub struct ScoreOut {
    /// Gate scores, shape [T].
    pub u: Var,
    /// Predictor outputs for the full/cheap actions ([T, d_s]); present only
    /// for the guided controller, feeding the JEPA loss.
    pub q_full: Option<Var>,
    pub q_cheap: Option<Var>,
}

/// Scoring interface the backbone calls at each gated slot. `vars` is the
/// ParamStore binding for the current graph.
pub trait DepthController<S: Scalar> {
    fn score(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        vars: &[Var],
        slot: usize,
        a: Var,
    ) -> ScoreOut;
}

/// Everything one controlled layer produced for one sequence. Force modes
/// skip the unused branch and the controller, so those fields stay None.
pub struct LayerTrace<S: Scalar> {
    pub layer: usize,
    pub a: Var,
    pub h_full: Option<Var>,
    pub h_cheap: Option<Var>,
    pub gate: Option<GateDecision<S>>,
    pub q_full: Option<Var>,
    pub q_cheap: Option<Var>,
    pub h_out: Var,
}

pub struct ForwardOut<S: Scalar> {
    pub logits: Var,
    /// One trace per controlled slot executed in this pass.
    pub traces: Vec<LayerTrace<S>>,
    /// Hidden state entering each executed layer, indexed by absolute layer.
    pub layer_inputs: Vec<(usize, Var)>,
}

// ── parameter registration ──────────────────────────────────────────────────

fn gauss_param<S: Scalar>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let mut rng = substream(seed, name);
    gaussian(shape, std, &mut rng)
}

/// Register the dense backbone: embeddings, attention, full FFNs, final norm,
/// LM head. Residual output projections get the 1/sqrt(2L) shrink so the
/// residual stream variance stays flat with depth.
pub fn register_dense<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    seed: u64,
    trainable: bool,
) {
    let d = cfg.d_model;
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    store.register(
        "tok_emb",
        gauss_param(seed, "tok_emb", vec![cfg.vocab, d], INIT_STD),
        trainable,
    );
    store.register(
        "pos_emb",
        gauss_param(seed, "pos_emb", vec![cfg.seq_len, d], INIT_STD),
        trainable,
    );
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        store.register(&p("ln1.gamma"), ones(vec![d]), trainable);
        store.register(&p("ln1.beta"), Tensor::zeros(vec![d]), trainable);
        for w in ["attn.wq", "attn.wk", "attn.wv"] {
            store.register(&p(w), gauss_param(seed, &p(w), vec![d, d], INIT_STD), trainable);
        }
        store.register(
            &p("attn.wo"),
            gauss_param(seed, &p("attn.wo"), vec![d, d], resid_std),
            trainable,
        );
        store.register(&p("ln2.gamma"), ones(vec![d]), trainable);
        store.register(&p("ln2.beta"), Tensor::zeros(vec![d]), trainable);
        store.register(
            &p("ffn.w_up"),
            gauss_param(seed, &p("ffn.w_up"), vec![d, cfg.d_ff], INIT_STD),
            trainable,
        );
        store.register(
            &p("ffn.w_down"),
            gauss_param(seed, &p("ffn.w_down"), vec![cfg.d_ff, d], resid_std),
            trainable,
        );
    }
    store.register("ln_f.gamma", ones(vec![d]), trainable);
    store.register("ln_f.beta", Tensor::zeros(vec![d]), trainable);
    store.register(
        "lm_head.w",
        gauss_param(seed, "lm_head.w", vec![d, cfg.vocab], INIT_STD),
        trainable,
    );
}

/// Register the cheap branches of the controlled layers. The down projection
/// is zero so each cheap branch starts as an exact residual identity.
pub fn register_cheap<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    seed: u64,
    trainable: bool,
) {
    let d = cfg.d_model;
    for l in cfg.first_controlled()..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        store.register(&p("ln2_cheap.gamma"), ones(vec![d]), trainable);
        store.register(&p("ln2_cheap.beta"), Tensor::zeros(vec![d]), trainable);
        store.register(
            &p("cheap.w_up"),
            gauss_param(seed, &p("cheap.w_up"), vec![d, cfg.cheap_rank], INIT_STD),
            trainable,
        );
        store.register(&p("cheap.w_down"), Tensor::zeros(vec![cfg.cheap_rank, d]), trainable);
    }
}

fn ones<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![S::one(); n])
}

/// Look up a bound parameter by name.
pub fn pv<S: Scalar>(store: &ParamStore<S>, vars: &[Var], name: &str) -> Var {
    vars[store.id(name).0]
}

// ── forward pieces ──────────────────────────────────────────────────────────

/// Additive causal mask: 0 on and below the diagonal, -inf above.
fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data_mut()[i * t + j] = S::from64(f64::NEG_INFINITY);
        }
    }
    m
}

fn attention<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vars: &[Var],
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
) -> Var {
    let t = g.value(h).rows();
    let dh = cfg.head_dim();
    let p = |s: &str| format!("layers.{layer}.{s}");
    let ln_g = pv(store, vars, &p("ln1.gamma"));
    let ln_b = pv(store, vars, &p("ln1.beta"));
    let x = g.layer_norm(h, ln_g, ln_b);
    let q = {
        let w = pv(store, vars, &p("attn.wq"));
        g.matmul(x, w)
    };
    let k = {
        let w = pv(store, vars, &p("attn.wk"));
        g.matmul(x, w)
    };
    let v = {
        let w = pv(store, vars, &p("attn.wv"));
        g.matmul(x, w)
    };
    let mask = causal_mask::<S>(t);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = g.slice_cols(q, head * dh, dh);
        let kh = g.slice_cols(k, head * dh, dh);
        let vh = g.slice_cols(v, head * dh, dh);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.affine(scores, S::from64(1.0 / (dh as f64).sqrt()), S::zero());
        let masked = g.add_const(scaled, &mask);
        let attn = g.softmax_rows(masked);
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    let wo = pv(store, vars, &p("attn.wo"));
    let proj = g.matmul(cat, wo);
    g.add(h, proj)
}

/// down(SiLU(up(LN(x)))), the shared shape of both FFN branches.
fn ffn_branch<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vars: &[Var],
    layer: usize,
    stem: &str,
    ln_stem: &str,
    a: Var,
) -> Var {
    let p = |s: &str| format!("layers.{layer}.{s}");
    let ln_g = pv(store, vars, &p(&format!("{ln_stem}.gamma")));
    let ln_b = pv(store, vars, &p(&format!("{ln_stem}.beta")));
    let x = g.layer_norm(a, ln_g, ln_b);
    let up = {
        let w = pv(store, vars, &p(&format!("{stem}.w_up")));
        g.matmul(x, w)
    };
    let act = g.silu(up);
    let down = {
        let w = pv(store, vars, &p(&format!("{stem}.w_down")));
        g.matmul(act, w)
    };
    g.add(a, down)
}

/// Token + position embedding for one sequence.
pub fn embed_tokens<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vars: &[Var],
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() || tokens.len() > cfg.seq_len {
        return Err(Error::input(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::input(format!("token {bad} out of vocab range {}", cfg.vocab)));
    }
    let tok = pv(store, vars, "tok_emb");
    let pos = pv(store, vars, "pos_emb");
    let e = g.embed(tok, tokens);
    let pe = g.slice_rows(pos, 0, tokens.len());
    Ok(g.add(e, pe))
}

/// Run layers `start_layer..L` plus the head on an already-embedded hidden
/// state. The main entry point `model_forward` is this with start_layer = 0;
/// the oracle resumes counterfactual branches here from a shared prefix.
pub fn forward_from<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vars: &[Var],
    cfg: &ModelConfig,
    gate_cfg: &GateConfig,
    h0: Var,
    start_layer: usize,
    plan: &ForcingPlan,
    controller: Option<&dyn DepthController<S>>,
) -> ForwardOut<S> {
    assert_eq!(plan.modes.len(), cfg.n_controlled, "plan covers every controlled slot");
    let mut h = h0;
    let mut traces = Vec::new();
    let mut layer_inputs = Vec::with_capacity(cfg.n_layers - start_layer);
    for layer in start_layer..cfg.n_layers {
        layer_inputs.push((layer, h));
        let a = attention(g, store, vars, cfg, layer, h);
        if !cfg.is_controlled(layer) {
            h = ffn_branch(g, store, vars, layer, "ffn", "ln2", a);
            continue;
        }
        let slot = cfg.slot_of(layer);
        let mode = plan.modes[slot];
        let (h_out, trace) = match mode {
            LayerMode::ForceFull => {
                let h_full = ffn_branch(g, store, vars, layer, "ffn", "ln2", a);
                let trace = LayerTrace {
                    layer,
                    a,
                    h_full: Some(h_full),
                    h_cheap: None,
                    gate: None,
                    q_full: None,
                    q_cheap: None,
                    h_out: h_full,
                };
                (h_full, trace)
            }
            LayerMode::ForceCheap => {
                let h_cheap = ffn_branch(g, store, vars, layer, "cheap", "ln2_cheap", a);
                let trace = LayerTrace {
                    layer,
                    a,
                    h_full: None,
                    h_cheap: Some(h_cheap),
                    gate: None,
                    q_full: None,
                    q_cheap: None,
                    h_out: h_cheap,
                };
                (h_cheap, trace)
            }
            LayerMode::Gate => {
                let ctrl = controller.expect("gate mode needs a controller");
                let h_full = ffn_branch(g, store, vars, layer, "ffn", "ln2", a);
                let h_cheap = ffn_branch(g, store, vars, layer, "cheap", "ln2_cheap", a);
                let out = ctrl.score(g, store, vars, slot, a);
                let dec = gate_decide(g, out.u, gate_cfg);
                let full_part = g.row_scale(h_full, dec.m_st);
                let inv = g.affine(dec.m_st, -S::one(), S::one());
                let cheap_part = g.row_scale(h_cheap, inv);
                let h_out = g.add(full_part, cheap_part);
                let trace = LayerTrace {
                    layer,
                    a,
                    h_full: Some(h_full),
                    h_cheap: Some(h_cheap),
                    gate: Some(dec),
                    q_full: out.q_full,
                    q_cheap: out.q_cheap,
                    h_out,
                };
                (h_out, trace)
            }
        };
        traces.push(trace);
        h = h_out;
    }
    let lng = pv(store, vars, "ln_f.gamma");
    let lnb = pv(store, vars, "ln_f.beta");
    let hf = g.layer_norm(h, lng, lnb);
    let wout = pv(store, vars, "lm_head.w");
    let logits = g.matmul(hf, wout);
    ForwardOut { logits, traces, layer_inputs }
}

/// Embed and run the whole stack.
pub fn model_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vars: &[Var],
    cfg: &ModelConfig,
    gate_cfg: &GateConfig,
    tokens: &[usize],
    plan: &ForcingPlan,
    controller: Option<&dyn DepthController<S>>,
) -> Result<ForwardOut<S>> {
    let h0 = embed_tokens(g, store, vars, cfg, tokens)?;
    Ok(forward_from(g, store, vars, cfg, gate_cfg, h0, 0, plan, controller))
}

/// Hard-routed forward that executes only the selected branch per token. On a
/// fresh NoGrad graph this is the deployment path; its logits match the
/// training-mode gate forward to max abs diff 0 because the straight-through
/// forward value is exactly the hard mask and every row-level op here runs
/// the same per-row arithmetic as the dense version.
pub fn inference_forward<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    gate_cfg: &GateConfig,
    tokens: &[usize],
    controller: &dyn DepthController<S>,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let mut g: Graph<S> = Graph::new(Mode::NoGrad);
    let vars = store.bind_all(&mut g);
    let mut h = embed_tokens(&mut g, store, &vars, cfg, tokens)?;
    let t = tokens.len();
    let mut full_counts = Vec::with_capacity(cfg.n_controlled);
    for layer in 0..cfg.n_layers {
        let a = attention(&mut g, store, &vars, cfg, layer, h);
        if !cfg.is_controlled(layer) {
            h = ffn_branch(&mut g, store, &vars, layer, "ffn", "ln2", a);
            continue;
        }
        let slot = cfg.slot_of(layer);
        let out = controller.score(&mut g, store, &vars, slot, a);
        let (mask, k) = crate::gating::topk_mask(g.value(out.u).data(), gate_cfg.rho);
        let full_idx: Vec<usize> = (0..t).filter(|&i| mask.data()[i] == S::one()).collect();
        let cheap_idx: Vec<usize> = (0..t).filter(|&i| mask.data()[i] == S::zero()).collect();
        debug_assert_eq!(full_idx.len(), k);
        full_counts.push(full_idx.len());
        let mut pieces = Vec::with_capacity(2);
        if !full_idx.is_empty() {
            let rows = g.gather_rows(a, &full_idx);
            let out_rows = ffn_branch(&mut g, store, &vars, layer, "ffn", "ln2", rows);
            pieces.push(g.scatter_rows(out_rows, &full_idx, t));
        }
        if !cheap_idx.is_empty() {
            let rows = g.gather_rows(a, &cheap_idx);
            let out_rows = ffn_branch(&mut g, store, &vars, layer, "cheap", "ln2_cheap", rows);
            pieces.push(g.scatter_rows(out_rows, &cheap_idx, t));
        }
        h = if pieces.len() == 2 { g.add(pieces[0], pieces[1]) } else { pieces[0] };
    }
    let lng = pv(store, &vars, "ln_f.gamma");
    let lnb = pv(store, &vars, "ln_f.beta");
    let hf = g.layer_norm(h, lng, lnb);
    let wout = pv(store, &vars, "lm_head.w");
    let logits = g.matmul(hf, wout);
    Ok((g.value(logits).clone(), full_counts))
}

/// Mean next-token cross-entropy for one sequence: mean over positions of
/// CE(logits[t], target[t]).
pub fn lm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize]) -> Var {
    let ce = g.ce_rows(logits, targets);
    g.mean_all(ce)
}

//! The depth controllers.
//!
//! G1 is a plain two-layer MLP from the post-attention state to a scalar
//! utility score. Its cost-matched variant widens the hidden layer until its
//! trainable count reaches the guided controller's.
//!
//! G3 is the guided controller: a compressed context c = W_c sg(a) is paired
//! with a learned action embedding, a shared predictor turns each pair into a
//! low-dimensional outcome summary q_a, and a decision head scores
//! [q_full; q_cheap; q_full - q_cheap]. The predictor is additionally pulled
//! toward projections of the actually-computed branch outputs (JEPA loss)
//! through a fixed orthogonal target head that never trains.
//!
//! All controller parameters are shared across controlled layers.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{pv, DepthController, ModelConfig, ScoreOut, INIT_STD};
use crate::optim::ParamStore;
use crate::tensor::{gaussian, mm_nt, substream, Scalar, Tensor};
use rand::Rng;

fn gauss<S: Scalar>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let mut rng = substream(seed, name);
    gaussian(shape, std, &mut rng)
}

// ── parameter accounting ────────────────────────────────────────────────────

/// Default G1 hidden width: d/4.
pub fn g1_hidden(cfg: &ModelConfig) -> usize {
    cfg.d_model / 4
}

/// Trainable scalar count of a G1 controller at the given hidden width:
/// (d+1)h for the first layer plus (h+1) for the readout.
pub fn g1_param_count(cfg: &ModelConfig, hidden: usize) -> usize {
    hidden * (cfg.d_model + 2) + 1
}

/// Trainable scalar count of the guided controller. The target head is
/// excluded: it never trains.
pub fn g3_param_count(cfg: &ModelConfig) -> usize {
    let (d, dc, ds, da) = (cfg.d_model, cfg.d_c, cfg.d_s, cfg.d_a);
    let ctx = d * dc;
    let emb = 2 * da;
    let pred = (dc + da) * (2 * ds) + 2 * ds + (2 * ds) * ds + ds;
    let dec = (3 * ds) * ds + ds + ds + 1;
    ctx + emb + pred + dec
}

/// Smallest G1 hidden width whose parameter count reaches G3's.
pub fn costmatch_hidden(cfg: &ModelConfig) -> usize {
    let g3 = g3_param_count(cfg);
    let per = cfg.d_model + 2;
    g3.saturating_sub(1).div_ceil(per).max(1)
}

// ── G1: MLP gate ────────────────────────────────────────────────────────────

pub struct G1Controller {
    pub hidden: usize,
}

impl G1Controller {
    pub fn new(hidden: usize) -> Self {
        assert!(hidden > 0, "G1 hidden width must be positive");
        G1Controller { hidden }
    }

    pub fn standard(cfg: &ModelConfig) -> Self {
        Self::new(g1_hidden(cfg))
    }

    /// Cost-matched variant; asserts it really reaches G3's count.
    pub fn cost_matched(cfg: &ModelConfig) -> Self {
        let hidden = costmatch_hidden(cfg);
        assert!(
            g1_param_count(cfg, hidden) >= g3_param_count(cfg),
            "cost-matched G1 must not be smaller than G3"
        );
        G1Controller { hidden }
    }

    pub fn register<S: Scalar>(&self, store: &mut ParamStore<S>, cfg: &ModelConfig, seed: u64) {
        let d = cfg.d_model;
        let h = self.hidden;
        store.register("ctrl.g1.w1", gauss(seed, "ctrl.g1.w1", vec![d, h], INIT_STD), true);
        store.register("ctrl.g1.b1", Tensor::zeros(vec![h]), true);
        store.register("ctrl.g1.w2", gauss(seed, "ctrl.g1.w2", vec![h, 1], INIT_STD), true);
        store.register("ctrl.g1.b2", Tensor::zeros(vec![1]), true);
    }
}

impl<S: Scalar> DepthController<S> for G1Controller {
    fn score(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        vars: &[Var],
        _slot: usize,
        a: Var,
    ) -> ScoreOut {
        let w1 = pv(store, vars, "ctrl.g1.w1");
        let b1 = pv(store, vars, "ctrl.g1.b1");
        let w2 = pv(store, vars, "ctrl.g1.w2");
        let b2 = pv(store, vars, "ctrl.g1.b2");
        let x1 = g.matmul(a, w1);
        let x1 = g.add_bias(x1, b1);
        let h = g.silu(x1);
        let x2 = g.matmul(h, w2);
        let u2 = g.add_bias(x2, b2);
        let t = g.value(u2).rows();
        let u = g.reshape(u2, vec![t]);
        ScoreOut { u, q_full: None, q_cheap: None }
    }
}

// ── G3: JEPA-guided gate ────────────────────────────────────────────────────

pub struct G3Controller;

impl G3Controller {
    /// Registers everything including the frozen orthogonal target head.
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, seed: u64) {
        let (d, dc, ds, da) = (cfg.d_model, cfg.d_c, cfg.d_s, cfg.d_a);
        let dp = 2 * ds;
        store.register("ctrl.g3.w_c", gauss(seed, "ctrl.g3.w_c", vec![d, dc], INIT_STD), true);
        // action embeddings at unit scale so the two actions start distinct
        store.register("ctrl.g3.e_full", gauss(seed, "ctrl.g3.e_full", vec![da], 1.0), true);
        store.register("ctrl.g3.e_cheap", gauss(seed, "ctrl.g3.e_cheap", vec![da], 1.0), true);
        store.register(
            "ctrl.g3.pred.w1",
            gauss(seed, "ctrl.g3.pred.w1", vec![dc + da, dp], INIT_STD),
            true,
        );
        store.register("ctrl.g3.pred.b1", Tensor::zeros(vec![dp]), true);
        store.register(
            "ctrl.g3.pred.w2",
            gauss(seed, "ctrl.g3.pred.w2", vec![dp, ds], INIT_STD),
            true,
        );
        store.register("ctrl.g3.pred.b2", Tensor::zeros(vec![ds]), true);
        store.register(
            "ctrl.g3.dec.w1",
            gauss(seed, "ctrl.g3.dec.w1", vec![3 * ds, ds], INIT_STD),
            true,
        );
        store.register("ctrl.g3.dec.b1", Tensor::zeros(vec![ds]), true);
        store.register("ctrl.g3.dec.w2", gauss(seed, "ctrl.g3.dec.w2", vec![ds, 1], INIT_STD), true);
        store.register("ctrl.g3.dec.b2", Tensor::zeros(vec![1]), true);
        let mut rng = substream(seed, "ctrl.g3.target_proj");
        let proj = orthogonal_rows::<S>(ds, d, &mut rng).expect("d_s <= d checked by ModelConfig");
        store.register("ctrl.g3.target_proj", proj, false);
    }

    fn predict<S: Scalar>(
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        vars: &[Var],
        c: Var,
        emb: Var,
    ) -> Var {
        let t = g.value(c).rows();
        let e = g.broadcast_row(emb, t);
        let x = g.concat_cols(&[c, e]);
        let w1 = pv(store, vars, "ctrl.g3.pred.w1");
        let b1 = pv(store, vars, "ctrl.g3.pred.b1");
        let w2 = pv(store, vars, "ctrl.g3.pred.w2");
        let b2 = pv(store, vars, "ctrl.g3.pred.b2");
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.silu(h);
        let q = g.matmul(h, w2);
        g.add_bias(q, b2)
    }
}

impl<S: Scalar> DepthController<S> for G3Controller {
    fn score(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        vars: &[Var],
        _slot: usize,
        a: Var,
    ) -> ScoreOut {
        // context path never back-propagates into the backbone representation
        let sga = g.stop_grad(a);
        let w_c = pv(store, vars, "ctrl.g3.w_c");
        let c = g.matmul(sga, w_c);
        let e_full = pv(store, vars, "ctrl.g3.e_full");
        let e_cheap = pv(store, vars, "ctrl.g3.e_cheap");
        let q_full = Self::predict(g, store, vars, c, e_full);
        let q_cheap = Self::predict(g, store, vars, c, e_cheap);
        let diff = g.sub(q_full, q_cheap);
        let feat = g.concat_cols(&[q_full, q_cheap, diff]);
        let w1 = pv(store, vars, "ctrl.g3.dec.w1");
        let b1 = pv(store, vars, "ctrl.g3.dec.b1");
        let w2 = pv(store, vars, "ctrl.g3.dec.w2");
        let b2 = pv(store, vars, "ctrl.g3.dec.b2");
        let h = g.matmul(feat, w1);
        let h = g.add_bias(h, b1);
        let h = g.silu(h);
        let u2 = g.matmul(h, w2);
        let u2 = g.add_bias(u2, b2);
        let t = g.value(u2).rows();
        let u = g.reshape(u2, vec![t]);
        ScoreOut { u, q_full: Some(q_full), q_cheap: Some(q_cheap) }
    }
}

// ── target head and JEPA loss ───────────────────────────────────────────────

/// Gaussian matrix with rows orthonormalized by twice-iterated Gram-Schmidt,
/// each row sign-fixed to keep a positive projection onto its raw draw so
/// the result is deterministic in the seed.
pub fn orthogonal_rows<S: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    if rows > cols {
        return Err(Error::config(format!(
            "cannot orthonormalize {rows} rows in {cols} dimensions"
        )));
    }
    let raw: Tensor<f64> = gaussian(vec![rows, cols], 1.0, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for i in 0..rows {
        let a = &raw.data()[i * cols..(i + 1) * cols];
        let mut v = a.to_vec();
        for _ in 0..2 {
            for qj in &q {
                let proj: f64 = v.iter().zip(qj).map(|(x, y)| x * y).sum();
                for (vk, qk) in v.iter_mut().zip(qj) {
                    *vk -= proj * qk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate Gaussian draw during orthogonalization");
        let sign = if a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for vk in v.iter_mut() {
            *vk *= sign / norm;
        }
        q.push(v);
    }
    let flat: Vec<f64> = q.into_iter().flatten().collect();
    Ok(Tensor::from_f64s(vec![rows, cols], &flat))
}

/// Project branch outputs through the frozen target head: z = h proj^T.
/// Plain values, not graph nodes; the targets are stop-gradient by
/// construction so they never need a tape.
pub fn project_targets<S: Scalar>(h: &Tensor<S>, proj: &Tensor<S>) -> Tensor<S> {
    let (t, d) = (h.rows(), h.cols());
    let ds = proj.rows();
    assert_eq!(proj.cols(), d, "target head width must match d_model");
    let mut out = Tensor::zeros(vec![t, ds]);
    mm_nt(h.data(), proj.data(), t, d, ds, out.data_mut());
    out
}

/// Per-layer JEPA alignment loss for one sequence:
/// mean over tokens of (1 - cos(q_full, z_full)) + (1 - cos(q_cheap, z_cheap)).
pub fn jepa_pair_loss<S: Scalar>(
    g: &mut Graph<S>,
    q_full: Var,
    q_cheap: Var,
    z_full: &Tensor<S>,
    z_cheap: &Tensor<S>,
) -> Var {
    let zf = g.constant(z_full.clone());
    let zc = g.constant(z_cheap.clone());
    let cf = g.cosine_rows(q_full, zf);
    let cc = g.cosine_rows(q_cheap, zc);
    let lf = g.affine(cf, -S::one(), S::one());
    let lc = g.affine(cc, -S::one(), S::one());
    let mf = g.mean_all(lf);
    let mc = g.mean_all(lc);
    g.add(mf, mc)
}

/// Fixed-point-free permutation of 0..n: a cyclic shift by a seeded offset
/// in [1, n-1]. Used by the shuffled-target ablation.
pub fn cyclic_derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::config("derangement needs at least two elements"));
    }
    let offset = rng.gen_range(1..n);
    Ok((0..n).map(|i| (i + offset) % n).collect())
}

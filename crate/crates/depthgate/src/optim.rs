//! Named parameter store with a frozen/trainable partition, decoupled AdamW,
//! global-norm clipping, and the warmup+cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Cosine decays from lr down to lr * final_lr_frac at total_steps.
    pub final_lr_frac: f64,
}

impl OptimConfig {
    pub fn standard(total_steps: usize) -> Self {
        OptimConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 1000,
            total_steps,
            final_lr_frac: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config("optimizer lr/eps/clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::config("final_lr_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear warmup to lr over warmup_steps, then cosine decay to
/// lr * final_lr_frac at total_steps.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    debug_assert!(step <= cfg.total_steps, "lr_at past end of schedule");
    if step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let lo = cfg.lr * cfg.final_lr_frac;
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ── parameter store ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct Param<S: Scalar> {
    name: String,
    value: Tensor<S>,
    trainable: bool,
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Ordered parameter store. The trainable/frozen partition is fixed at
/// registration time; there is deliberately no API to change it afterwards.
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {:?} registered twice",
            name
        );
        let (m, v) = if trainable {
            (Tensor::zeros(value.shape().to_vec()), Tensor::zeros(value.shape().to_vec()))
        } else {
            (Tensor::zeros(vec![0]), Tensor::zeros(vec![0]))
        };
        self.params.push(Param { name: name.to_string(), value, trainable, m, v });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> ParamId {
        ParamId(*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {:?}", name)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn iter_names(&self) -> impl Iterator<Item = (ParamId, &str, bool)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p.name.as_str(), p.trainable))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).map(ParamId).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Bind every parameter as a graph leaf, in registration order.
    /// Trainable parameters become differentiable leaves; frozen ones become
    /// constants the backward pass prunes around.
    pub fn bind_all(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// FNV-1a over the exact bit patterns of every frozen parameter.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            if p.trainable {
                continue;
            }
            for &x in p.value.data() {
                for b in x.f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

// ── gradient clipping and AdamW ─────────────────────────────────────────────

/// Global L2 norm over all gradients; rescales in place when it exceeds
/// clip_norm. Returns the pre-clip norm (the value that gets logged).
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], clip_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            let x = v.f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let scale = S::from64(clip_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut().iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One decoupled AdamW step over the trainable partition. `grads` is indexed
/// by ParamId; a missing gradient for a trainable parameter is treated as an
/// exact zero (moments decay, weight decay still applies). Frozen parameters
/// are never touched. `step` is 1-based.
pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Option<Tensor<S>>],
    step: usize,
    cfg: &OptimConfig,
) {
    assert!(step >= 1, "adamw_step is 1-based");
    assert_eq!(grads.len(), store.params.len(), "one grad slot per parameter");
    let lr = S::from64(lr_at(step, cfg));
    let (b1, b2) = (S::from64(cfg.beta1), S::from64(cfg.beta2));
    let (ob1, ob2) = (S::one() - b1, S::one() - b2);
    let bc1 = S::from64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = S::from64(1.0 - cfg.beta2.powi(step as i32));
    let eps = S::from64(cfg.eps);
    let wd = S::from64(cfg.weight_decay);

    for (i, p) in store.params.iter_mut().enumerate() {
        if !p.trainable {
            debug_assert!(grads[i].is_none(), "gradient for frozen parameter {:?}", p.name);
            continue;
        }
        let zero_grad;
        let gdata: &[S] = match &grads[i] {
            Some(g) => {
                assert_eq!(g.shape(), p.value.shape(), "grad shape mismatch for {:?}", p.name);
                g.data()
            }
            None => {
                zero_grad = vec![S::zero(); p.value.numel()];
                &zero_grad
            }
        };
        let (mv, vv, wv) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
        for j in 0..wv.len() {
            let g = gdata[j];
            mv[j] = b1 * mv[j] + ob1 * g;
            vv[j] = b2 * vv[j] + ob2 * g * g;
            let mhat = mv[j] / bc1;
            let vhat = vv[j] / bc2;
            wv[j] = wv[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * wv[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(trainable: bool) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::new(vec![2], vec![1.0, -2.0]), trainable);
        (s, id)
    }

    #[test]
    fn zero_grad_step_is_pure_decay() {
        let (mut s, id) = store_with(true);
        let cfg = OptimConfig { warmup_steps: 1, total_steps: 10, ..OptimConfig::standard(10) };
        let grads = vec![None];
        adamw_step(&mut s, &grads, 1, &cfg);
        let lr1 = lr_at(1, &cfg);
        let want = [1.0 * (1.0 - lr1 * 0.01), -2.0 * (1.0 - lr1 * 0.01)];
        for (got, want) in s.value(id).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-15, "decay-only update exact");
        }
    }

    #[test]
    fn constant_grad_update_magnitude_approaches_lr() {
        // With a constant gradient the bias-corrected update tends to lr_t.
        let (mut s, id) = store_with(true);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            warmup_steps: 1,
            total_steps: 10_000,
            final_lr_frac: 1.0, // hold lr constant after warmup
            ..OptimConfig::standard(10_000)
        };
        let g = Tensor::new(vec![2], vec![0.37, 0.37]);
        let mut prev = s.value(id).data().to_vec();
        let mut last_delta = 0.0;
        for step in 1..=200 {
            adamw_step(&mut s, &[Some(g.clone())], step, &cfg);
            last_delta = (s.value(id).data()[0] - prev[0]).abs();
            prev = s.value(id).data().to_vec();
        }
        assert!((last_delta - cfg.lr).abs() < cfg.lr * 0.05, "delta {} vs lr {}", last_delta, cfg.lr);
    }

    #[test]
    fn frozen_params_never_move() {
        let (mut s, id) = store_with(false);
        let before = s.value(id).clone();
        let h0 = s.frozen_hash();
        let cfg = OptimConfig { warmup_steps: 1, total_steps: 10, ..OptimConfig::standard(10) };
        adamw_step(&mut s, &[None], 1, &cfg);
        assert_eq!(s.value(id), &before);
        assert_eq!(s.frozen_hash(), h0);
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let cfg = OptimConfig::standard(20_000);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(1000, &cfg) - 2e-4).abs() < 1e-18);
        assert!((lr_at(20_000, &cfg) - 2e-6).abs() < 1e-12);
        // continuity across the warmup/cosine seam
        let just_after = lr_at(1001, &cfg);
        assert!((just_after - 2e-4).abs() < 1e-6);
        // monotone decay after warmup
        assert!(lr_at(5000, &cfg) > lr_at(15_000, &cfg));
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![Some(Tensor::<f64>::new(vec![2], vec![0.3, 0.4]))];
        let n = clip_global_norm(&mut grads, 1.0);
        assert!((n - 0.5).abs() < 1e-12);
        assert_eq!(grads[0].as_ref().unwrap().data(), &[0.3, 0.4], "below clip: untouched");

        let mut grads = vec![Some(Tensor::<f64>::new(vec![2], vec![1.2, 1.6]))];
        let n = clip_global_norm(&mut grads, 1.0);
        assert!((n - 2.0).abs() < 1e-12, "returns pre-clip norm");
        let d = grads[0].as_ref().unwrap().data();
        let newn = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((newn - 1.0).abs() < 1e-12, "rescaled to clip_norm");

        let mut grads: Vec<Option<Tensor<f64>>> = vec![Some(Tensor::zeros(vec![3]))];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 0.0, "all-zero grads: norm 0, no-op");
    }

    #[test]
    fn store_partition_is_fixed_and_ordered() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.register("a", Tensor::zeros(vec![2]), true);
        s.register("b", Tensor::zeros(vec![3]), false);
        assert_eq!(s.trainable_scalars(), 2);
        assert_eq!(s.trainable_ids(), vec![ParamId(0)]);
        assert_eq!(s.name(s.id("b")), "b");
    }
}

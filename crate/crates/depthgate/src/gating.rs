//! Straight-through top-k gating.
//!
//! Scores u become soft probabilities p = sigmoid(u / tau) and a hard
//! per-sequence top-k mask. The straight-through surrogate executes the hard
//! mask in the forward pass while backpropagating through p, so
//! d m_st / d u = sigma'(u/tau) / tau is the only channel through which the
//! LM loss reaches the controller.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateConfig {
    /// Target fraction of tokens routed through the full branch.
    pub rho: f64,
    /// Gate temperature.
    pub tau: f64,
    /// Floor on per-layer mean gate probability enforced by the alive loss.
    pub p_min: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { rho: 0.5, tau: 2.0, p_min: 0.05 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("gate rho must lie in (0, 1]"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("gate tau must be positive"));
        }
        if !(0.0..1.0).contains(&self.p_min) {
            return Err(Error::config("gate p_min must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything one controlled layer's gate produced for one sequence.
pub struct GateDecision<S: Scalar> {
    /// Raw controller scores, shape [T].
    pub u: Var,
    /// sigmoid(u / tau), shape [T].
    pub p: Var,
    /// Straight-through mask: hard values, soft gradient. Shape [T].
    pub m_st: Var,
    /// The hard mask values (exactly 0.0 / 1.0).
    pub m_hard: Tensor<S>,
    /// Number of tokens routed full: ceil(rho * T).
    pub k: usize,
}

/// Exact top-k selection: k = ceil(rho * T), ties broken by lower index.
/// Returns the binary mask and k.
pub fn topk_mask<S: Scalar>(scores: &[S], rho: f64) -> (Tensor<S>, usize) {
    let t = scores.len();
    assert!(t > 0, "topk_mask on empty scores");
    assert!(scores.iter().all(|s| s.is_finite()), "topk_mask on non-finite scores");
    let k = (rho * t as f64).ceil() as usize;
    let k = k.min(t);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores compare").then(a.cmp(&b))
    });
    let mut mask = Tensor::zeros(vec![t]);
    for &i in order.iter().take(k) {
        mask.data_mut()[i] = S::one();
    }
    (mask, k)
}

/// p = sigmoid(u / tau)
pub fn soft_gate<S: Scalar>(g: &mut Graph<S>, u: Var, tau: f64) -> Var {
    let scaled = g.affine(u, S::from64(1.0 / tau), S::zero());
    g.sigmoid(scaled)
}

/// Full gate for one sequence at one controlled layer: scores in, straight
/// through top-k decision out.
pub fn gate_decide<S: Scalar>(g: &mut Graph<S>, u: Var, cfg: &GateConfig) -> GateDecision<S> {
    assert_eq!(g.value(u).shape().len(), 1, "gate scores must be rank-1");
    let p = soft_gate(g, u, cfg.tau);
    let (m_hard, k) = topk_mask(g.value(u).data(), cfg.rho);
    let m_st = g.straight_through(p, &m_hard);
    GateDecision { u, p, m_st, m_hard, k }
}

/// (1/C) * sum_l (pbar_l - rho)^2, over per-layer mean gate probabilities.
pub fn budget_loss<S: Scalar>(g: &mut Graph<S>, pbars: &[Var], rho: f64) -> Var {
    assert!(!pbars.is_empty(), "budget_loss needs at least one layer");
    let mut acc: Option<Var> = None;
    for &pb in pbars {
        let d = g.affine(pb, S::one(), S::from64(-rho));
        let sq = g.mul(d, d);
        acc = Some(match acc {
            Some(a) => g.add(a, sq),
            None => sq,
        });
    }
    g.affine(acc.unwrap(), S::from64(1.0 / pbars.len() as f64), S::zero())
}

/// (1/C) * sum_l relu(p_min - pbar_l): zero whenever every layer keeps its
/// mean gate probability above the floor.
pub fn alive_loss<S: Scalar>(g: &mut Graph<S>, pbars: &[Var], p_min: f64) -> Var {
    assert!(!pbars.is_empty(), "alive_loss needs at least one layer");
    let mut acc: Option<Var> = None;
    for &pb in pbars {
        let d = g.affine(pb, -S::one(), S::from64(p_min));
        let r = g.relu(d);
        acc = Some(match acc {
            Some(a) => g.add(a, r),
            None => r,
        });
    }
    g.affine(acc.unwrap(), S::from64(1.0 / pbars.len() as f64), S::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use proptest::prelude::*;

    #[test]
    fn topk_basic_and_ties() {
        let (mask, k) = topk_mask(&[3.0, 1.0, 2.0, 0.0], 0.5);
        assert_eq!(mask.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(k, 2);

        // k = ceil(0.5 * 5) = 3
        let (_, k) = topk_mask(&[0.0; 5], 0.5);
        assert_eq!(k, 3);

        // equal scores: lower indices win
        let (mask, _) = topk_mask(&[1.0, 1.0, 1.0, 0.5], 0.5);
        assert_eq!(mask.data(), &[1.0, 1.0, 0.0, 0.0]);

        // rho = 1 selects everything
        let (mask, k) = topk_mask(&[0.3, -0.1], 1.0);
        assert_eq!(k, 2);
        assert_eq!(mask.data(), &[1.0, 1.0]);
    }

    #[test]
    fn gate_decision_is_exactly_binary_and_budgeted() {
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let u = g.leaf(Tensor::new(vec![6], vec![0.3, -0.2, 0.9, 0.0, -1.1, 0.4]));
        let dec = gate_decide(&mut g, u, &GateConfig::default());
        assert_eq!(dec.k, 3);
        let m = g.value(dec.m_st).data();
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn straight_through_gradient_is_soft_path_derivative() {
        // d sum(m_st) / d u must equal sigma'(u/tau)/tau even though the
        // forward value is the hard mask.
        let tau = 2.0;
        let us = [0.3, -0.2, 0.9, 0.0, -1.1, 0.4];
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let u = g.leaf(Tensor::new(vec![6], us.to_vec()));
        let dec = gate_decide(&mut g, u, &GateConfig { tau, ..GateConfig::default() });
        let s = g.sum_all(dec.m_st);
        g.backward(s);
        for (got, &ui) in g.grad(u).unwrap().data().iter().zip(&us) {
            let sig = 1.0 / (1.0 + (-(ui / tau)).exp());
            let want = sig * (1.0 - sig) / tau;
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn budget_and_alive_hand_values() {
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let a = g.leaf(Tensor::scalar(0.6));
        let b = g.leaf(Tensor::scalar(0.4));
        let loss = budget_loss(&mut g, &[a, b], 0.5);
        assert!((g.value(loss).item() - 0.01).abs() < 1e-12);

        let exact = g.leaf(Tensor::scalar(0.5));
        let z = budget_loss(&mut g, &[exact], 0.5);
        assert_eq!(g.value(z).item(), 0.0);

        let collapsed = g.leaf(Tensor::scalar(1.0));
        let dead = g.leaf(Tensor::scalar(0.0));
        let worst = budget_loss(&mut g, &[collapsed, dead], 0.5);
        assert!((g.value(worst).item() - 0.25).abs() < 1e-12);

        let starving = g.leaf(Tensor::scalar(0.01));
        let al = alive_loss(&mut g, &[starving], 0.05);
        assert!((g.value(al).item() - 0.04).abs() < 1e-12);

        let healthy = g.leaf(Tensor::scalar(0.30));
        let al0 = alive_loss(&mut g, &[healthy], 0.05);
        assert_eq!(g.value(al0).item(), 0.0, "above the floor: exactly zero");
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        assert!(GateConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { rho: 1.5, ..Default::default() }.validate().is_err());
        assert!(GateConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { p_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn mask_sums_to_k_and_is_shift_invariant(
            scores in prop::collection::vec(-10.0f64..10.0, 1..40),
            shift in -5.0f64..5.0,
            rho in 0.05f64..1.0,
        ) {
            let (mask, k) = topk_mask(&scores, rho);
            prop_assert_eq!(mask.data().iter().sum::<f64>() as usize, k);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let (mask2, k2) = topk_mask(&shifted, rho);
            prop_assert_eq!(k, k2);
            prop_assert_eq!(mask.data(), mask2.data());
        }

        #[test]
        fn mask_is_permutation_equivariant_for_distinct_scores(
            base in prop::collection::vec(-100i64..100, 2..30),
            rho in 0.05f64..1.0,
        ) {
            // strictly distinct scores so tie-breaking can't interfere
            let mut scores: Vec<f64> = base.iter().enumerate()
                .map(|(i, &b)| b as f64 + i as f64 * 1e-3).collect();
            let (mask, _) = topk_mask(&scores, rho);
            scores.reverse();
            let (rmask, _) = topk_mask(&scores, rho);
            let mut un: Vec<f64> = rmask.data().to_vec();
            un.reverse();
            prop_assert_eq!(mask.data(), &un[..]);
        }
    }
}

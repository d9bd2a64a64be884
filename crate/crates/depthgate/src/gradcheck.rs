//! Central finite-difference gradient checking. This is the independent
//! oracle every backward rule is validated against, always at f64.

use crate::graph::{Graph, Mode, Var};
use crate::tensor::{substream, Tensor};
use rand::seq::SliceRandom;

/// Step size for central differences.
pub const FD_H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input name, flat coordinate) of the worst comparison.
    pub worst: Option<(String, usize)>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    // Relative for gradients of ordinary size; coordinates where both sides
    // are below 1e-2 in magnitude are effectively compared with an absolute
    // tolerance of tol * 1e-2, which keeps near-zero gradients from turning
    // float noise into spurious relative error.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compare the tape gradient of `build`'s scalar output against central
/// finite differences, for every named input. `samples_per_input` limits how
/// many coordinates are probed per input (0 = all), chosen by a seeded
/// shuffle so reports are reproducible.
pub fn finite_difference_check<F>(
    inputs: &[(&str, Tensor<f64>)],
    samples_per_input: usize,
    seed: u64,
    build: F,
) -> FdReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    // Analytic gradients in one backward pass.
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "finite_difference_check needs a scalar output");
    g.backward(loss);
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();

    let eval = |perturbed: &[(&str, Tensor<f64>)]| -> f64 {
        let mut g = Graph::new(Mode::NoGrad);
        let vars: Vec<Var> = perturbed.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut rng = substream(seed, "fd-coords");
    let mut report = FdReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work: Vec<(&str, Tensor<f64>)> = inputs.to_vec();

    for i in 0..inputs.len() {
        let n = inputs[i].1.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if samples_per_input > 0 && samples_per_input < n {
            coords.shuffle(&mut rng);
            coords.truncate(samples_per_input);
        }
        for c in coords {
            let base = inputs[i].1.data()[c];
            let mut central = |h: f64| {
                work[i].1.data_mut()[c] = base + h;
                let up = eval(&work);
                work[i].1.data_mut()[c] = base - h;
                let down = eval(&work);
                (up - down) / (2.0 * h)
            };
            // Richardson extrapolation of two central differences cancels
            // the h^2 truncation term, which matters for sharply curved
            // losses (cosine terms near small norms).
            let coarse = central(FD_H);
            let fine = central(FD_H / 2.0);
            work[i].1.data_mut()[c] = base;

            let fd = (4.0 * fine - coarse) / 3.0;
            let an = analytic[i].as_ref().map_or(0.0, |t| t.data()[c]);
            let e = rel_err(an, fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((inputs[i].0.to_string(), c));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]);
        let report = finite_difference_check(&[("x", x)], 0, 1, |g, vs| {
            let y = g.mul(vs[0], vs[0]);
            g.sum_all(y)
        });
        assert!(report.passes(1e-7), "{:?}", report);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn chained_nonlinearities_pass_at_1e4() {
        let mut rng = substream(11, "t");
        let x = gaussian(vec![4, 3], 0.8, &mut rng);
        let w = gaussian(vec![5, 3], 0.5, &mut rng);
        let report = finite_difference_check(&[("x", x), ("w", w)], 0, 2, |g, vs| {
            let h = g.matmul_nt(vs[0], vs[1]);
            let a = g.silu(h);
            let s = g.softmax_rows(a);
            let c = g.cosine_rows(s, a);
            g.mean_all(c)
        });
        assert!(report.passes(1e-4), "{:?}", report);
    }

    #[test]
    fn sampling_limits_coordinate_count() {
        let x = Tensor::new(vec![10], vec![0.1; 10]);
        let report = finite_difference_check(&[("x", x)], 4, 7, |g, vs| g.sum_all(vs[0]));
        assert_eq!(report.checked, 4);
    }
}

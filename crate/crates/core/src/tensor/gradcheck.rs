//! Central finite-difference gradient checking.
//!
//! The probed function may return a tensor of any shape. It is reduced to a
//! scalar `L = Σ wᵢ·yᵢ` with fixed pseudo-random weights `w`, and the
//! analytical side is the vector-Jacobian product seeded with `w`. The numeric
//! side is `Σ wᵢ·(yᵢ⁺ − yᵢ⁻) / 2h` accumulated in `f64`, so outputs untouched by
//! a perturbation cancel exactly instead of contributing rounding noise.
//!
//! The reported error for an input is the norm-wise relative error
//! `‖analytic − numeric‖₂ / ‖numeric‖₂`. A single f32 ulp in one output already
//! costs ~1e-4 of an O(1) gradient at step 1e-3, so elementwise maxima sit on the
//! rounding floor while the norm-wise measure still exposes real mistakes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input.
    pub per_input: Vec<f32>,
    pub max_rel_error: f32,
    /// Norm-wise relative error of all inputs' gradients taken as one vector.
    pub joint_rel_error: f32,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Checks the gradient of `f` at `inputs` with central differences of size `step`.
pub fn check<F>(inputs: &[Tensor], step: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_impl(inputs, step, f)
}

/// Random-projection variant of [`check`] for deep composites.
///
/// Each input is moved along `directions` random ±1 vectors `u` and the
/// central difference `(L(x + hu) − L(x − hu)) / 2` is compared with `h·⟨∇L, u⟩`.
/// The same is done at `2h` and the two are combined to cancel the cubic
/// truncation term. Per-coordinate probes of a long f32 chain drown small gradient
/// entries in rounding noise; a projection sums the whole gradient coherently
/// while the noise stays that of a single evaluation. `per_input` holds the
/// norm-wise error over the directions; `joint_rel_error` moves all inputs at once.
pub fn check_projected<F>(inputs: &[Tensor], step: f32, directions: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().map(|&x| x as f64).sum())
    };
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.vjp(out, &vec![1.0; g.value(out).numel()])?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect::<Vec<_>>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6f6a);
    // which inputs move together: each alone, then all at once
    let groups: Vec<Vec<usize>> = (0..inputs.len()).map(|i| vec![i]).chain([(0..inputs.len()).collect()]).collect();
    let mut errors = Vec::with_capacity(groups.len());
    for group in &groups {
        let (mut err_sq, mut scale_sq) = (0.0f64, 0.0f64);
        for _ in 0..directions {
            let signs: Vec<Vec<f32>> = group
                .iter()
                .map(|&i| (0..inputs[i].numel()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
                .collect();
            let central = |k: f32| -> Result<(f64, f64)> {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut predicted = 0.0f64;
                for (&i, u) in group.iter().zip(&signs) {
                    for (j, &s) in u.iter().enumerate() {
                        let x = inputs[i].data()[j];
                        plus[i].data_mut()[j] = x + k * s * step;
                        minus[i].data_mut()[j] = x - k * s * step;
                        // realized half-step after f32 rounding
                        let h = (plus[i].data()[j] as f64 - minus[i].data()[j] as f64) / 2.0;
                        predicted += analytic[i].data()[j] as f64 * h;
                    }
                }
                Ok((predicted, (eval(&plus)? - eval(&minus)?) / 2.0))
            };
            let (p1, n1) = central(1.0)?;
            let (p2, n2) = central(2.0)?;
            // a gradient error r shows up as r at h and 2r at 2h, the
            // truncation term as c·h³ and 8c·h³; solving leaves r
            err_sq += ((8.0 * (n1 - p1) - (n2 - p2)) / 6.0).powi(2);
            scale_sq += ((8.0 * n1 - n2) / 6.0).powi(2);
        }
        errors.push(if scale_sq > 0.0 { (err_sq / scale_sq).sqrt() } else { err_sq.sqrt() } as f32);
    }
    let joint_rel_error = errors.pop().unwrap_or(0.0);
    let max_rel_error = errors.iter().copied().fold(joint_rel_error, f32::max);
    Ok(GradCheckReport {
        per_input: errors,
        max_rel_error,
        joint_rel_error,
    })
}

fn check_impl<F>(inputs: &[Tensor], step: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, out, vars))
    };

    let (g, out, vars) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let weights: Vec<f32> = (0..g.value(out).numel())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let grads = g.vjp(out, &weights)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let output = |values: &[Tensor]| -> Result<Vec<f32>> {
        let (g, out, _) = eval(values)?;
        Ok(g.value(out).data().to_vec())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut err_sq, mut scale_sq) = (0.0f64, 0.0f64);
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + step;
            let plus = output(&probe)?;
            probe[i].data_mut()[j] = x - step;
            let minus = output(&probe)?;
            probe[i].data_mut()[j] = x;
            let delta: f64 = plus
                .iter()
                .zip(&minus)
                .zip(&weights)
                .map(|((&p, &m), &w)| (p as f64 - m as f64) * w as f64)
                .sum();
            // the realized step may differ from `step` after f32 rounding
            let h = (x + step) as f64 - (x - step) as f64;
            *slot = delta / h;
        }
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = analytic[i]
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        err_sq += err * err;
        scale_sq += scale * scale;
        let rel = if scale > 0.0 { err / scale } else { err };
        per_input.push(rel as f32);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f32::max);
    let joint_rel_error = if scale_sq > 0.0 { (err_sq / scale_sq).sqrt() } else { err_sq.sqrt() } as f32;
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        joint_rel_error,
    })
}

/// Uniform random tensor in `[-scale, scale)`, handy for building probes.
pub fn random_tensor(shape: &[usize], scale: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

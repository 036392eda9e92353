//! Central-difference gradient verification.

use alloc::vec::Vec;

use rand::seq::index;

use super::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many seeded-random coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_coords_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `f` at `x` and returns the worst elementwise relative error.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let opts = GradCheckOptions { step, ..GradCheckOptions::default() };
    grad_check_multi(|g, vars| f(g, vars[0]), core::slice::from_ref(x), opts).map(|r| r.max_rel_error)
}

/// Checks a scalar function of several tensors against central differences.
///
/// `f` is evaluated twice at the unperturbed point first; differing outputs
/// (dropout, unseeded sampling) reject the check with a contract error.
pub fn grad_check_multi<F>(mut f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        bail!(Parameter, "grad_check step must be positive, got {}", opts.step);
    }
    fn eval<F: FnMut(&mut Graph, &[Var]) -> Result<Var>>(f: &mut F, point: &[Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            bail!(Contract, "grad_check needs a scalar function, got shape {:?}", v.shape());
        }
        Ok(v.item())
    }

    let base = eval(&mut f, inputs)?;
    if eval(&mut f, inputs)?.to_bits() != base.to_bits() {
        bail!(Contract, "function is not deterministic (dropout or unseeded sampling active)");
    }

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut rng = crate::rng::seeded(opts.seed, 0);
    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < input.len() => {
                let mut c = index::sample(&mut rng, input.len(), limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = input.data()[i];
            point[which].data_mut()[i] = orig + opts.step;
            let plus = eval(&mut f, &point)?;
            point[which].data_mut()[i] = orig - opts.step;
            let minus = eval(&mut f, &point)?;
            point[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
            coords_checked += 1;
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_input, coords_checked })
}

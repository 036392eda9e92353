//! Dense associative memory (modern continuous Hopfield network).
//!
//! Stored patterns are the columns of a `d×n` matrix `X`. The energy of a
//! state pattern `p` is
//!
//! ```text
//! E(p) = -lse(β, Xᵀp) + ½ pᵀp + β⁻¹ log n + ½ M²
//! ```
//!
//! with `M` the largest stored-pattern norm, and the update rule
//! `p ← X · softmax(β Xᵀp)` never increases it. One update with projected
//! queries, keys and values is exactly scaled dot-product attention, which is
//! what [`hopfield_layer_forward`] exposes to the model.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::HeadVars;
use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Slack allowed for floating-point noise when asserting energy descent.
pub const ENERGY_SLACK: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50;

/// `d×n` matrix of stored patterns, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMatrix {
    x: Tensor,
    max_norm: f64,
}

impl PatternMatrix {
    pub fn new(x: Tensor) -> Result<Self> {
        let (d, n) = x.require_matrix("pattern matrix")?;
        if !x.all_finite() {
            bail!(Parameter, "stored patterns must be finite");
        }
        let max_norm = (0..n)
            .map(|j| math::sqrt((0..d).map(|i| x.at(i, j) * x.at(i, j)).sum::<f64>()))
            .fold(0.0, f64::max);
        Ok(Self { x, max_norm })
    }

    /// Builds the matrix from patterns given as rows.
    pub fn from_patterns(patterns: &[&[f64]]) -> Result<Self> {
        let rows = Tensor::from_rows(patterns)?;
        Self::new(tensor::transpose(&rows)?)
    }

    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn count(&self) -> usize {
        self.x.cols()
    }

    /// Largest column norm `M`.
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn matrix(&self) -> &Tensor {
        &self.x
    }

    pub fn pattern(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.x.at(i, j)).collect()
    }

    /// `Xᵀp`
    fn similarities(&self, p: &[f64]) -> Vec<f64> {
        let (d, n) = (self.dim(), self.count());
        let mut s = vec![0.0; n];
        for i in 0..d {
            let pi = p[i];
            for (j, sj) in s.iter_mut().enumerate() {
                *sj += self.x.data()[i * n + j] * pi;
            }
        }
        s
    }

    fn check(&self, p: &[f64], beta: f64) -> Result<()> {
        if !(beta > 0.0) || !beta.is_finite() {
            bail!(Parameter, "beta must be positive, got {}", beta);
        }
        if p.len() != self.dim() {
            bail!(Dimension, "state pattern has dim {}, stored patterns have dim {}", p.len(), self.dim());
        }
        if p.iter().any(|v| !v.is_finite()) {
            bail!(Parameter, "state pattern must be finite");
        }
        Ok(())
    }
}

pub fn energy(x: &PatternMatrix, p: &[f64], beta: f64) -> Result<f64> {
    x.check(p, beta)?;
    let sims = x.similarities(p);
    let half_pp = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
    let m = x.max_norm();
    Ok(-tensor::lse(beta, &sims)? + half_pp + math::ln(x.count() as f64) / beta + 0.5 * m * m)
}

/// One update `X · softmax(β Xᵀp)`.
pub fn update(x: &PatternMatrix, p: &[f64], beta: f64) -> Result<Vec<f64>> {
    x.check(p, beta)?;
    let mut w = x.similarities(p);
    tensor::softmax_slice(&mut w, 1.0 / beta);
    let (d, n) = (x.dim(), x.count());
    Ok((0..d).map(|i| (0..n).map(|j| x.x.data()[i * n + j] * w[j]).sum()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub state: Vec<f64>,
    /// Number of updates applied before the state stopped moving: the
    /// smallest `t` with `‖update(p_t) − p_t‖∞ < tol`, or `max_iter`.
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates [`update`] from `p0` until the state moves by less than `tol` in
/// max-norm or `max_iter` updates have been applied. Energy is checked after
/// every update and an increase beyond [`ENERGY_SLACK`] is reported as an
/// invariant violation.
pub fn retrieve(x: &PatternMatrix, p0: &[f64], beta: f64, max_iter: usize, tol: f64) -> Result<Retrieval> {
    if max_iter == 0 {
        bail!(Parameter, "max_iter must be at least 1");
    }
    if !(tol > 0.0) {
        bail!(Parameter, "tol must be positive, got {}", tol);
    }
    let mut p = p0.to_vec();
    let mut e = energy(x, &p, beta)?;
    for t in 0..max_iter {
        let next = update(x, &p, beta)?;
        let e_next = energy(x, &next, beta)?;
        if e_next > e + ENERGY_SLACK {
            bail!(Invariant, "energy increased from {} to {} at update {}", e, e_next, t + 1);
        }
        let moved = p.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        e = e_next;
        if moved < tol {
            return Ok(Retrieval { state: p, iterations: t, converged: true });
        }
    }
    Ok(Retrieval { state: p, iterations: max_iter, converged: false })
}

/// Hopfield attention block on the graph.
///
/// Memory rows are projected to stored key patterns `K = memory·W_K` and
/// values `V = memory·W_V`; query rows `Q = queries_src·W_Q` are state
/// patterns. The first `n_steps − 1` updates move the queries in key space,
/// `Q ← softmax(β Q Kᵀ) K`, and the last one reads out through the values,
/// `softmax(β Q Kᵀ) V`.
pub fn hopfield_layer_forward(
    g: &mut Graph,
    queries_src: Var,
    memory: Var,
    w: &HeadVars,
    beta: f64,
    n_steps: usize,
) -> Result<Var> {
    if !(beta > 0.0) || !beta.is_finite() {
        bail!(Parameter, "beta must be positive, got {}", beta);
    }
    if n_steps == 0 {
        bail!(Parameter, "n_steps must be at least 1");
    }
    let (_, pq) = g.value(queries_src).require_matrix("query entities")?;
    let (_, pm) = g.value(memory).require_matrix("memory entities")?;
    if pq != pm {
        bail!(Dimension, "query entity dim {} != memory entity dim {}", pq, pm);
    }
    let tau = 1.0 / beta;
    let mut q = g.matmul(queries_src, w.wq)?;
    let k = g.matmul(memory, w.wk)?;
    let v = g.matmul(memory, w.wv)?;
    let kt = g.transpose(k)?;
    for _ in 1..n_steps {
        let logits = g.matmul(q, kt)?;
        let a = g.softmax(logits, tau)?;
        q = g.matmul(a, k)?;
    }
    let logits = g.matmul(q, kt)?;
    let a = g.softmax(logits, tau)?;
    g.matmul(a, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        let x = PatternMatrix::from_patterns(&[&[0.6, -1.2, 2.0]]).unwrap();
        for &beta in &[0.1, 1.0, 7.0] {
            let e = energy(&x, &[0.6, -1.2, 2.0], beta).unwrap();
            assert!(e.abs() < 1e-12, "{e}");
        }
        let x = PatternMatrix::from_patterns(&[&[1.0, 0.0]]).unwrap();
        assert!((energy(&x, &[0.0, 0.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(energy(&x, &[0.0, 0.0], 0.0), Err(crate::Error::Parameter(_))));
        assert!(matches!(energy(&x, &[0.0], 1.0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn update_examples() {
        let one = PatternMatrix::from_patterns(&[&[0.3, 0.9]]).unwrap();
        assert_eq!(update(&one, &[5.0, -2.0], 3.0).unwrap(), [0.3, 0.9]);

        let same = PatternMatrix::from_patterns(&[&[0.3, 0.9], &[0.3, 0.9], &[0.3, 0.9]]).unwrap();
        let p = update(&same, &[1.0, 1.0], 2.0).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.9).abs() < 1e-15);

        let basis = PatternMatrix::from_patterns(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(update(&basis, &[0.0, 0.0], 1.0).unwrap(), [0.5, 0.5]);
        assert!(update(&basis, &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn retrieval_of_single_pattern_takes_one_update() {
        let one = PatternMatrix::from_patterns(&[&[0.3, 0.9]]).unwrap();
        let r = retrieve(&one, &[4.0, 4.0], 1.0, 10, 1e-6).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.state, [0.3, 0.9]);
    }

    #[test]
    fn symmetric_pair_settles_on_the_mean() {
        let x = PatternMatrix::from_patterns(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        // (0.2, 0.2) is equidistant from both patterns; symmetry keeps the
        // iterate on the diagonal, whose energy minimum is the mean pattern.
        let r = retrieve(&x, &[0.2, 0.2], 1.0, 50, 1e-12).unwrap();
        assert!(r.converged);
        assert!((r.state[0] - 0.5).abs() < 1e-12 && (r.state[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn well_separated_pattern_is_retrieved() {
        let x = PatternMatrix::from_patterns(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let r = retrieve(&x, &[1.0, 0.0, 0.0], 20.0, 50, 1e-9).unwrap();
        assert!(r.iterations <= 3);
        assert!((r.state[0] - 1.0).abs() < 1e-3 && r.state[1].abs() < 1e-3);
    }

    #[test]
    fn retrieve_rejects_bad_parameters() {
        let x = PatternMatrix::from_patterns(&[&[1.0, 0.0]]).unwrap();
        assert!(retrieve(&x, &[0.0, 0.0], 1.0, 0, 1e-6).is_err());
        assert!(retrieve(&x, &[0.0, 0.0], 1.0, 5, 0.0).is_err());
    }
}

//! Energy view of classifier logits and the per-example scores built on it.
//!
//! `E(x) = -logsumexp_y f(x)_y`. The partition function is never computed;
//! every density-like quantity here is only meaningful up to ranking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Anything that assigns a differentiable energy to each row of a batch.
pub trait EnergyModel {
    /// Per-example shape of the inputs.
    fn input_shape(&self) -> &[usize];

    /// Records `[B]` energies for `x: [B, ..input_shape]`.
    fn energy(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl EnergyModel for Model {
    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn energy(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.bind(tape, false);
        let logits = self.forward(tape, &params, x)?;
        energy(tape, logits)
    }
}

/// `E(x) = c/2 * ||x||^2` per row. Negative curvature gives a concave
/// energy, which SGLD climbs away from the origin without bound.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnergy {
    pub curvature: f64,
    shape: Vec<usize>,
}

impl QuadraticEnergy {
    pub fn new(dim: usize, curvature: f64) -> Self {
        Self {
            curvature,
            shape: vec![dim],
        }
    }
}

impl EnergyModel for QuadraticEnergy {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn energy(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let flat = tape.flatten(x)?;
        let sq = tape.square(flat)?;
        let s = tape.sum_last(sq)?;
        Ok(tape.scale(s, 0.5 * self.curvature)?)
    }
}

/// Records `-logsumexp` over the class axis of `[B, K]` logits.
pub fn energy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.logsumexp(logits)?;
    Ok(tape.neg(lse)?)
}

fn logsumexp_rows(logits: &Tensor) -> Result<Vec<f64>> {
    let k = match logits.shape() {
        [_, k] if *k > 0 => *k,
        s => {
            return Err(Error::InvalidSpec(format!(
                "logits must be [batch, classes] with classes >= 1, got {s:?}"
            )))
        }
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect())
}

/// Per-example energies of `[B, K]` logits.
pub fn energy_values(logits: &Tensor) -> Result<Vec<f64>> {
    Ok(logsumexp_rows(logits)?.into_iter().map(|v| -v).collect())
}

/// Unnormalized log-density `log p(x) + log Z = -E(x)`.
pub fn log_px_proxy(logits: &Tensor) -> Result<Vec<f64>> {
    logsumexp_rows(logits)
}

/// Row-wise softmax, shift-invariant.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    let lse = logsumexp_rows(logits)?;
    let k = logits.shape()[1];
    let data = logits
        .data()
        .chunks(k)
        .zip(&lse)
        .flat_map(|(row, &l)| row.iter().map(move |&v| (v - l).exp()))
        .collect();
    Ok(Tensor::new(logits.shape().to_vec(), data)?)
}

/// `max_y p(y | x)` per example.
pub fn max_softmax_score(logits: &Tensor) -> Result<Vec<f64>> {
    let lse = logsumexp_rows(logits)?;
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .zip(lse)
        .map(|(row, l)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (max - l).exp()
        })
        .collect())
}

/// `dE/dx` for every example of the batch.
///
/// Computed from one backward pass over the batch-summed energy, which is
/// valid only because examples do not interact inside the model.
pub fn energy_grad_input<M: EnergyModel + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let e = model.energy(&mut tape, xv)?;
    let total = tape.sum(e)?;
    let grads = tape.backward(total, &[xv], false)?;
    Ok(grads.into_tensors().remove(0))
}

/// Energy-gradient magnitude `||dE/dx||_2` per example.
pub fn egm<M: EnergyModel + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<f64>> {
    let g = energy_grad_input(model, x)?;
    Ok((0..g.rows())
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Approximate Mass `s(x) = -||dE/dx||_2`; values near zero are typical.
pub fn approximate_mass_score<M: EnergyModel + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<f64>> {
    Ok(egm(model, x)?.into_iter().map(|v| -v).collect())
}

/// The three out-of-distribution scores. Higher means more in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    LogDensityProxy,
    MaxSoftmax,
    ApproximateMass,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [
        ScoreKind::LogDensityProxy,
        ScoreKind::MaxSoftmax,
        ScoreKind::ApproximateMass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::LogDensityProxy => "log_density_proxy",
            ScoreKind::MaxSoftmax => "max_softmax",
            ScoreKind::ApproximateMass => "approximate_mass",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown score kind `{s}`")))
    }
}

/// Scores one batch with the chosen criterion.
pub fn score_batch(model: &Model, x: &Tensor, kind: ScoreKind) -> Result<Vec<f64>> {
    match kind {
        ScoreKind::LogDensityProxy => log_px_proxy(&model.logits(x)?),
        ScoreKind::MaxSoftmax => max_softmax_score(&model.logits(x)?),
        ScoreKind::ApproximateMass => approximate_mass_score(model, x),
    }
}

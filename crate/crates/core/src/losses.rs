//! Training objectives: cross-entropy, the sampled EBM loss and the
//! energy-gradient penalty, plus their per-mode combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::energy::energy;
use crate::error::{Error, Result};
use crate::nn::{forward, Model, ModelSpec};
use crate::sampler::{sgld_chain, ReplayBuffer, SgldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[serde(alias = "ce")]
    CrossEntropy,
    Jem,
    Ngebm,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CrossEntropy => "cross_entropy",
            LossMode::Jem => "jem",
            LossMode::Ngebm => "ngebm",
        }
    }
}

/// Objective selection and the penalty/cross-entropy mixing weights.
///
/// `beta` weights the energy-gradient penalty and `gamma` the
/// cross-entropy term; they must sum to one unless `allow_unnormalized`
/// is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub beta: f64,
    pub gamma: f64,
    /// Negate the penalty, i.e. reward large energy gradients. Ablation only.
    pub literal_sign: bool,
    pub allow_unnormalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ngebm,
            beta: 0.5,
            gamma: 0.5,
            literal_sign: false,
            allow_unnormalized: false,
        }
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            mode: LossMode::CrossEntropy,
            ..Self::default()
        }
    }

    pub fn jem() -> Self {
        Self {
            mode: LossMode::Jem,
            ..Self::default()
        }
    }

    /// Gradient-penalty training with `gamma = 1 - beta`.
    pub fn ngebm(beta: f64) -> Result<Self> {
        let cfg = Self {
            mode: LossMode::Ngebm,
            beta,
            gamma: 1.0 - beta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Arbitrary non-negative weights, bypassing the `beta + gamma = 1` rule.
    pub fn ngebm_unnormalized(beta: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            mode: LossMode::Ngebm,
            beta,
            gamma,
            allow_unnormalized: true,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.beta.is_finite() && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0 (beta {}, gamma {})",
                self.beta, self.gamma
            )));
        }
        if !self.allow_unnormalized && (self.beta + self.gamma - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "beta + gamma must equal 1 (beta {}, gamma {})",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Scalar values of the terms making up one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    /// Gradient penalty (NG-EBM) or sampled EBM loss (JEM).
    pub other: f64,
    pub cross_entropy_weight: f64,
    pub other_weight: f64,
    pub diverged_chains: usize,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.cross_entropy_weight * self.cross_entropy + self.other_weight * self.other
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Batch mean of `-log p(y | x)` for `[B, K]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [b, k] = shape[..] else {
        return Err(Error::InvalidSpec(format!("logits must be 2-D, got {shape:?}")));
    };
    if labels.len() != b {
        return Err(Error::InputShape {
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    check_labels(labels, k)?;
    let lse = tape.logsumexp(logits)?;
    let picked = tape.gather(logits, labels)?;
    let nll = tape.sub(lse, picked)?;
    Ok(tape.mean(nll)?)
}

/// `sum E(x_gen) - sum E(x_train)`.
pub fn ebm_loss(tape: &mut Tape, spec: &ModelSpec, params: &[Var], x_train: Var, x_gen: Var) -> Result<Var> {
    if tape.shape(x_train) != tape.shape(x_gen) {
        return Err(Error::InputShape {
            expected: tape.shape(x_train).to_vec(),
            got: tape.shape(x_gen).to_vec(),
        });
    }
    let lg = forward(tape, spec, params, x_gen)?;
    let eg = energy(tape, lg)?;
    let sg = tape.sum(eg)?;
    let lt = forward(tape, spec, params, x_train)?;
    let et = energy(tape, lt)?;
    let st = tape.sum(et)?;
    Ok(tape.sub(sg, st)?)
}

/// Batch mean of `||dE/dx||_2`, differentiable with respect to `params`.
///
/// Minimizing this drives the energy surface flat around training data.
/// With `literal_sign` the value is negated.
pub fn grad_penalty(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &[Var],
    x: &Tensor,
    literal_sign: bool,
) -> Result<Var> {
    let xv = tape.leaf(x.clone());
    let logits = forward(tape, spec, params, xv)?;
    let e = energy(tape, logits)?;
    let total = tape.sum(e)?;
    let grads = tape.backward(total, &[xv], true)?;
    let g = grads.node(xv).expect("create_graph yields gradient nodes");
    let flat = tape.flatten(g)?;
    let norms = tape.l2norm(flat)?;
    let mean = tape.mean(norms)?;
    Ok(if literal_sign { tape.neg(mean)? } else { mean })
}

/// Sampler state needed by the JEM objective.
pub struct JemSampler<'a, R: Rng + ?Sized> {
    pub buffer: &'a mut ReplayBuffer,
    pub config: &'a SgldConfig,
    pub rng: &'a mut R,
}

/// Records the loss selected by `config` for one batch.
///
/// `model` supplies the spec and the current parameter values used by the
/// sampler; `params` are the tape variables the loss is differentiated
/// against. JEM mode draws chain initializations from the buffer, runs SGLD
/// with the model frozen, drops diverged chains (together with the matching
/// training rows) and writes surviving endpoints back to the buffer.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &LossConfig,
    model: &Model,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    jem: Option<JemSampler<'_, R>>,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let spec = &model.spec;
    let xv = tape.constant(x.clone());
    let logits = forward(tape, spec, params, xv)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let ce_value = tape.value(ce).item().unwrap_or(f64::NAN);

    match config.mode {
        LossMode::CrossEntropy => Ok((
            ce,
            LossBreakdown {
                total: ce_value,
                cross_entropy: ce_value,
                cross_entropy_weight: 1.0,
                ..LossBreakdown::default()
            },
        )),
        LossMode::Ngebm => {
            let pen = grad_penalty(tape, spec, params, x, config.literal_sign)?;
            let wce = tape.scale(ce, config.gamma)?;
            let wpen = tape.scale(pen, config.beta)?;
            let total = tape.add(wce, wpen)?;
            let breakdown = LossBreakdown {
                total: tape.value(total).item().unwrap_or(f64::NAN),
                cross_entropy: ce_value,
                other: tape.value(pen).item().unwrap_or(f64::NAN),
                cross_entropy_weight: config.gamma,
                other_weight: config.beta,
                diverged_chains: 0,
            };
            Ok((total, breakdown))
        }
        LossMode::Jem => {
            let jem = jem.ok_or_else(|| Error::Config("JEM mode needs a replay buffer and sampler".into()))?;
            let cfg = jem.config;
            let (x0, slots) = jem.buffer.draw(x.rows(), cfg.init_low, cfg.init_high)?;
            let outcome = sgld_chain(model, &x0, cfg, jem.rng)?;
            jem.buffer.push(&outcome.samples, &slots, &outcome.report.rows)?;
            let kept = outcome.kept_rows();
            let diverged = outcome.report.rows.len();
            let (total, other) = if kept.is_empty() {
                (ce, 0.0)
            } else {
                let xg = tape.constant(outcome.samples.select_rows(&kept)?);
                let xt = tape.constant(x.select_rows(&kept)?);
                let ebm = ebm_loss(tape, spec, params, xt, xg)?;
                let other = tape.value(ebm).item().unwrap_or(f64::NAN);
                (tape.add(ce, ebm)?, other)
            };
            let breakdown = LossBreakdown {
                total: tape.value(total).item().unwrap_or(f64::NAN),
                cross_entropy: ce_value,
                other,
                cross_entropy_weight: 1.0,
                other_weight: 1.0,
                diverged_chains: diverged,
            };
            Ok((total, breakdown))
        }
    }
}

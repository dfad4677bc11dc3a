//! SGLD sampling over model inputs, the replay buffer that seeds chains, and
//! divergence monitoring.
//!
//! One update is `x <- x - (a_i / 2) dE/dx + noise` with
//! `a_i = a * (i + 1)^(-decay)` and per-coordinate Gaussian noise of
//! variance `a_i` (unless a fixed noise standard deviation is configured).
//! Each row of a batch is an independent chain; a row that becomes
//! non-finite or leaves the divergence bound is frozen and reported.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::energy::{energy_grad_input, EnergyModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub n_steps: usize,
    pub step_size: f64,
    /// Polynomial decay exponent for the step size; 0 keeps it constant.
    pub decay_exponent: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub noise: bool,
    /// Fixed noise standard deviation; by default the noise variance equals
    /// the current step size.
    pub noise_std: Option<f64>,
    /// Largest admissible `|x|` per coordinate; defaults to ten times the
    /// half-width of the init domain.
    pub divergence_bound: Option<f64>,
    /// EGM threshold below which a deterministic chain counts as converged.
    pub convergence_tol: f64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            step_size: 1.0,
            decay_exponent: 0.0,
            init_low: -1.0,
            init_high: 1.0,
            noise: true,
            noise_std: None,
            divergence_bound: None,
            convergence_tol: 1e-3,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("sgld step size {} must be > 0", self.step_size)));
        }
        if !(self.init_low < self.init_high) {
            return Err(Error::Config(format!(
                "sgld init bounds [{}, {}] must satisfy low < high",
                self.init_low, self.init_high
            )));
        }
        if self.decay_exponent < 0.0 {
            return Err(Error::Config("sgld decay exponent must be >= 0".into()));
        }
        if let Some(s) = self.noise_std {
            if !(s >= 0.0) {
                return Err(Error::Config("sgld noise std must be >= 0".into()));
            }
        }
        if self.bound() <= 0.0 {
            return Err(Error::Config("sgld divergence bound must be > 0".into()));
        }
        Ok(())
    }

    pub fn bound(&self) -> f64 {
        self.divergence_bound
            .unwrap_or(10.0 * (self.init_high - self.init_low) / 2.0)
    }

    /// Step size used by update `i` (0-based).
    pub fn step_size_at(&self, i: usize) -> f64 {
        self.step_size * ((i + 1) as f64).powf(-self.decay_exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    NonFinite,
    BoundExceeded,
}

/// Outcome of divergence monitoring for one batch of chains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DivergenceReport {
    pub diverged: bool,
    /// 0-based index of the first update that produced an offending value.
    pub step: Option<usize>,
    pub magnitude: Option<f64>,
    pub reason: Option<DivergenceReason>,
    /// Rows that diverged, in row order.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldOutcome {
    pub samples: Tensor,
    pub report: DivergenceReport,
    pub steps_executed: usize,
    /// Per step, `||dE/dx||_2` of each row before the update. Only filled by
    /// [`sgld_chain_deterministic`].
    pub egm_trace: Vec<Vec<f64>>,
    /// Per-row EGM at the returned samples (deterministic chains only).
    pub final_egm: Vec<f64>,
    pub converged: bool,
}

impl SgldOutcome {
    /// Rows that finished without diverging.
    pub fn kept_rows(&self) -> Vec<usize> {
        (0..self.samples.rows())
            .filter(|r| !self.report.rows.contains(r))
            .collect()
    }

    /// Mean EGM across rows for every recorded step.
    pub fn mean_egm_trace(&self) -> Vec<f64> {
        self.egm_trace
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
            .collect()
    }
}

fn check_input<M: EnergyModel + ?Sized>(model: &M, x0: &Tensor) -> Result<()> {
    let shape = x0.shape();
    if shape.len() != model.input_shape().len() + 1 || &shape[1..] != model.input_shape() {
        return Err(Error::InputShape {
            expected: model.input_shape().to_vec(),
            got: shape.to_vec(),
        });
    }
    Ok(())
}

fn run_chain<M: EnergyModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Tensor,
    config: &SgldConfig,
    noise: bool,
    trace: bool,
    rng: &mut R,
) -> Result<SgldOutcome> {
    config.validate()?;
    check_input(model, x0)?;
    let bound = config.bound();
    let rows = x0.rows();
    let mut x = x0.clone();
    let mut active = vec![true; rows];
    let mut report = DivergenceReport::default();
    let mut egm_trace = Vec::new();
    let mut steps = 0;

    for i in 0..config.n_steps {
        if !active.iter().any(|&a| a) {
            break;
        }
        let alpha = config.step_size_at(i);
        let grad = energy_grad_input(model, &x)?;
        if trace {
            egm_trace.push(row_norms(&grad));
        }
        let std = config.noise_std.unwrap_or_else(|| alpha.sqrt());
        #[allow(clippy::needless_range_loop)]
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let row = x.row_mut(r);
            for (v, &g) in row.iter_mut().zip(grad.row(r)) {
                *v -= 0.5 * alpha * g;
                if noise {
                    let eps: f64 = StandardNormal.sample(rng);
                    *v += std * eps;
                }
            }
            let offending = if row.iter().any(|v| !v.is_finite()) {
                Some((DivergenceReason::NonFinite, f64::INFINITY))
            } else {
                let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (m > bound).then_some((DivergenceReason::BoundExceeded, m))
            };
            if let Some((reason, magnitude)) = offending {
                active[r] = false;
                report.rows.push(r);
                if !report.diverged {
                    report.diverged = true;
                    report.step = Some(i);
                    report.reason = Some(reason);
                    report.magnitude = Some(magnitude);
                }
            }
        }
        steps = i + 1;
    }

    let (final_egm, converged) = if trace {
        let kept: Vec<usize> = (0..rows).filter(|&r| active[r]).collect();
        let egm = if kept.is_empty() {
            Vec::new()
        } else {
            row_norms(&energy_grad_input(model, &x.select_rows(&kept)?)?)
        };
        let converged = !egm.is_empty() && egm.iter().all(|&e| e < config.convergence_tol);
        (egm, converged)
    } else {
        (Vec::new(), false)
    };

    Ok(SgldOutcome {
        samples: x,
        report,
        steps_executed: steps,
        egm_trace,
        final_egm,
        converged,
    })
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Runs `config.n_steps` SGLD updates from `x0` with the model held fixed.
pub fn sgld_chain<M: EnergyModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Tensor,
    config: &SgldConfig,
    rng: &mut R,
) -> Result<SgldOutcome> {
    run_chain(model, x0, config, config.noise, false, rng)
}

/// Noise-free chain that also records the energy-gradient magnitude at
/// every visited point.
pub fn sgld_chain_deterministic<M: EnergyModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    config: &SgldConfig,
) -> Result<SgldOutcome> {
    // The RNG is never consulted with noise off.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_chain(model, x0, config, false, true, &mut rng)
}

/// Cache of past chain endpoints used to initialize new chains.
///
/// Each drawn slot comes from the cache with probability `1 - reinit_prob`
/// and is otherwise sampled uniformly from the init domain.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    reinit_prob: f64,
    sample_shape: Vec<usize>,
    sanity_bound: f64,
    entries: VecDeque<Vec<f64>>,
    rng: ChaCha8Rng,
}

/// Where a drawn chain initialization came from.
pub type Slot = Option<usize>;

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 10_000;
    pub const DEFAULT_REINIT_PROB: f64 = 0.05;

    pub fn new(sample_shape: Vec<usize>, capacity: usize, reinit_prob: f64, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::Config(format!("reinit probability {reinit_prob} not in [0, 1]")));
        }
        Ok(Self {
            capacity,
            reinit_prob,
            sample_shape,
            sanity_bound: f64::INFINITY,
            entries: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Samples with any `|x|` above `bound` are refused by [`ReplayBuffer::push`].
    pub fn with_sanity_bound(mut self, bound: f64) -> Self {
        self.sanity_bound = bound;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entry(&self, i: usize) -> Option<&[f64]> {
        self.entries.get(i).map(Vec::as_slice)
    }

    fn row_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Draws `batch` chain initializations and the slot each came from
    /// (`None` for fresh uniform samples).
    pub fn draw(&mut self, batch: usize, low: f64, high: f64) -> Result<(Tensor, Vec<Slot>)> {
        if batch == 0 {
            return Err(Error::Config("buffer draw needs batch size >= 1".into()));
        }
        let d = self.row_len();
        let mut data = Vec::with_capacity(batch * d);
        let mut slots = Vec::with_capacity(batch);
        for _ in 0..batch {
            let fresh = self.entries.is_empty() || self.rng.random::<f64>() < self.reinit_prob;
            if fresh {
                for _ in 0..d {
                    data.push(self.rng.random_range(low..high));
                }
                slots.push(None);
            } else {
                let i = self.rng.random_range(0..self.entries.len());
                data.extend_from_slice(&self.entries[i]);
                slots.push(Some(i));
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, slots))
    }

    /// Stores chain endpoints. Rows listed in `skip` (diverged chains) and
    /// rows that are non-finite or beyond the sanity bound are discarded.
    /// Drawn slots are overwritten in place; fresh rows are appended with
    /// FIFO eviction once the buffer is full.
    pub fn push(&mut self, samples: &Tensor, slots: &[Slot], skip: &[usize]) -> Result<()> {
        if samples.rows() != slots.len() || samples.row_len() != self.row_len() {
            return Err(Error::InputShape {
                expected: self.sample_shape.clone(),
                got: samples.shape().to_vec(),
            });
        }
        let ok = |r: usize, row: &[f64]| {
            !skip.contains(&r) && row.iter().all(|v| v.is_finite() && v.abs() <= self.sanity_bound)
        };
        let mut fresh = Vec::new();
        for (r, slot) in slots.iter().enumerate() {
            let row = samples.row(r);
            if !ok(r, row) {
                continue;
            }
            match slot {
                Some(i) if *i < self.entries.len() => self.entries[*i] = row.to_vec(),
                _ => fresh.push(row.to_vec()),
            }
        }
        for row in fresh {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row);
        }
        Ok(())
    }
}

/// Uniform samples in `[low, high)` of shape `[n, ..sample_shape]`.
pub fn uniform_init<R: Rng + ?Sized>(sample_shape: &[usize], n: usize, low: f64, high: f64, rng: &mut R) -> Result<Tensor> {
    let d: usize = sample_shape.iter().product();
    let data = (0..n * d).map(|_| rng.random_range(low..high)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Ok(Tensor::new(shape, data)?)
}

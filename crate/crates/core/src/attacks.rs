//! White-box projected gradient descent attacks under L2 and L-infinity
//! budgets, and accuracy-versus-epsilon sweeps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            _ => Err(Error::Config(format!("unknown norm `{s}` (use l2 or linf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub n_steps: usize,
    /// Defaults to `2.5 * epsilon / n_steps`.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub clip_low: f64,
    pub clip_high: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 0.0,
            n_steps: 40,
            step_size: None,
            random_start: true,
            clip_low: -1.0,
            clip_high: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.n_steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon {} must be >= 0", self.epsilon)));
        }
        if self.epsilon > 0.0 && !(self.step() > 0.0) {
            return Err(Error::Config("attack step size must be > 0".into()));
        }
        if !(self.clip_low < self.clip_high) {
            return Err(Error::Config("attack clip bounds must satisfy low < high".into()));
        }
        Ok(())
    }
}

/// Projects `delta` onto the `eps`-ball of `norm` in place.
pub fn project(delta: &mut [f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of(delta);
            if n > eps {
                let s = eps / n;
                for d in delta.iter_mut() {
                    *d *= s;
                }
            }
        }
    }
}

fn input_gradient(model: &Model, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let logits = model.forward(&mut tape, &params, xv)?;
    let loss = cross_entropy(&mut tape, logits, y)?;
    let g = tape.backward(loss, &[xv], false)?.into_tensors().remove(0);
    if !g.all_finite() {
        return Err(Error::NonFiniteGradient("input".into()));
    }
    Ok(g)
}

/// Moves `adv` toward `orig` one ulp at a time until `|adv - orig| <= eps`.
fn settle_linf(adv: &mut f64, orig: f64, eps: f64) {
    while (*adv - orig).abs() > eps {
        *adv = if *adv > orig { adv.next_down() } else { adv.next_up() };
    }
}

/// Untargeted PGD on the cross-entropy of the true labels.
///
/// Returns `x_adv` with `||x_adv - x|| <= epsilon` per example, clipped to
/// the configured input bounds.
pub fn pgd<R: Rng + ?Sized>(model: &Model, x: &Tensor, y: &[usize], config: &AttackConfig, rng: &mut R) -> Result<Tensor> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (eps, norm) = (config.epsilon, config.norm);
    let (lo, hi) = (config.clip_low, config.clip_high);
    let d = x.row_len();
    let mut adv = x.clone();
    if config.random_start {
        for r in 0..x.rows() {
            let mut delta: Vec<f64> = match norm {
                Norm::Linf => (0..d).map(|_| rng.random_range(-eps..=eps)).collect(),
                Norm::L2 => {
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                    let zn = Norm::L2.of(&z).max(f64::MIN_POSITIVE);
                    let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
                    z.into_iter().map(|v| v / zn * radius).collect()
                }
            };
            project(&mut delta, norm, eps);
            for ((a, &o), dv) in adv.row_mut(r).iter_mut().zip(x.row(r)).zip(delta) {
                *a = (o + dv).clamp(lo, hi);
            }
        }
    }
    let step = config.step();
    for _ in 0..config.n_steps {
        let g = input_gradient(model, &adv, y)?;
        for r in 0..x.rows() {
            let gr = g.row(r);
            let dir: Vec<f64> = match norm {
                Norm::Linf => gr.iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect(),
                Norm::L2 => {
                    let n = Norm::L2.of(gr);
                    if n == 0.0 {
                        vec![0.0; d]
                    } else {
                        gr.iter().map(|v| v / n).collect()
                    }
                }
            };
            let orig = x.row(r);
            let mut delta: Vec<f64> = adv
                .row(r)
                .iter()
                .zip(orig)
                .zip(&dir)
                .map(|((a, o), s)| a + step * s - o)
                .collect();
            project(&mut delta, norm, eps);
            for ((a, &o), dv) in adv.row_mut(r).iter_mut().zip(orig).zip(delta) {
                *a = (o + dv).clamp(lo, hi);
            }
        }
    }
    if norm == Norm::Linf {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            settle_linf(a, o, eps);
        }
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub epsilon: f64,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub norm: Norm,
    pub rows: Vec<AttackRow>,
    /// Per epsilon, whether the attack left each example misclassified.
    pub success: Vec<Vec<bool>>,
}

impl AttackReport {
    /// Columns: `norm,epsilon,clean_accuracy,adversarial_accuracy,n_examples`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["norm", "epsilon", "clean_accuracy", "adversarial_accuracy", "n_examples"])?;
        for r in &self.rows {
            out.write_record([
                self.norm.as_str().to_string(),
                r.epsilon.to_string(),
                r.clean_accuracy.to_string(),
                r.adversarial_accuracy.to_string(),
                r.n_examples.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Attacks every example of `dataset` at each budget in `epsilons`.
///
/// Batch `b` at budget index `k` uses a ChaCha stream derived from
/// `(seed + k, b)`, so results do not depend on thread scheduling.
pub fn attack_sweep(
    model: &Model,
    dataset: &Dataset,
    epsilons: &[f64],
    base: &AttackConfig,
    seed: u64,
    batch_size: usize,
) -> Result<AttackReport> {
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("epsilon list must be sorted ascending".into()));
    }
    if batch_size == 0 || dataset.is_empty() {
        return Err(Error::EmptyInput("attack_sweep"));
    }
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(batch_size).collect();
    let clean_pred = model.predict(&dataset.inputs)?;
    let clean_correct = clean_pred
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, y)| p == y)
        .count();
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut success = Vec::with_capacity(epsilons.len());
    for (k, &eps) in epsilons.iter().enumerate() {
        let cfg = AttackConfig { epsilon: eps, ..*base };
        let parts = starts
            .par_iter()
            .enumerate()
            .map(|(b, &s)| {
                let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
                let x = dataset.inputs.select_rows(&idx)?;
                let y: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                rng.set_stream(b as u64);
                let adv = pgd(model, &x, &y, &cfg, &mut rng)?;
                let pred = model.predict(&adv)?;
                Ok(pred.iter().zip(&y).map(|(p, t)| p != t).collect::<Vec<bool>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let flags: Vec<bool> = parts.into_iter().flatten().collect();
        let adv_correct = flags.iter().filter(|&&f| !f).count();
        rows.push(AttackRow {
            epsilon: eps,
            clean_accuracy: clean_correct as f64 / n as f64,
            adversarial_accuracy: adv_correct as f64 / n as f64,
            n_examples: n,
        });
        success.push(flags);
    }
    Ok(AttackReport {
        norm: base.norm,
        rows,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelSpec, Parameters};

    #[test]
    fn projection_examples() {
        let mut d = vec![0.1, -0.2];
        project(&mut d, Norm::L2, 1.0);
        assert_eq!(d, vec![0.1, -0.2]);
        let mut d = vec![3.0, 4.0];
        project(&mut d, Norm::L2, 1.0);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let mut d = vec![2.0, -0.5];
        project(&mut d, Norm::Linf, 1.0);
        assert_eq!(d, vec![1.0, -0.5]);
    }

    fn linear_two_class() -> Model {
        // logits = [x0 - x1, x1 - x0] style model.
        let spec = ModelSpec::mlp(2, &[], 2);
        let params = Parameters::new(vec![
            ("layer0.weight".into(), Tensor::new(vec![2, 2], vec![1.0, -1.0, -2.0, 2.0]).unwrap()),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ]);
        Model::new(spec, params).unwrap()
    }

    #[test]
    fn zero_budget_returns_input() {
        let model = linear_two_class();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let adv = pgd(&model, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn single_sign_step_on_linear_model() {
        // Class 0 logit minus class 1 logit is 2 x0 - 4 x1, so increasing the
        // loss for label 0 moves x0 down and x1 up.
        let model = linear_two_class();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap();
        let cfg = AttackConfig {
            norm: Norm::Linf,
            epsilon: 0.05,
            n_steps: 1,
            step_size: Some(0.2),
            random_start: false,
            ..AttackConfig::default()
        };
        let adv = pgd(&model, &x, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((adv.data()[0] - 0.25).abs() < 1e-15);
        assert!((adv.data()[1] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn budgets_hold_with_random_start() {
        let model = Model::init(ModelSpec::mlp(3, &[8], 3), 2).unwrap();
        let x = Tensor::new(vec![4, 3], vec![0.9, -0.9, 0.1, 0.0, 0.5, -1.0, 1.0, 1.0, 1.0, -0.3, 0.2, 0.7]).unwrap();
        let y = [0, 1, 2, 1];
        for norm in [Norm::L2, Norm::Linf] {
            let cfg = AttackConfig {
                norm,
                epsilon: 0.3,
                n_steps: 10,
                ..AttackConfig::default()
            };
            let adv = pgd(&model, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            for r in 0..4 {
                let delta: Vec<f64> = adv.row(r).iter().zip(x.row(r)).map(|(a, b)| a - b).collect();
                match norm {
                    Norm::Linf => assert!(norm.of(&delta) <= 0.3),
                    Norm::L2 => assert!(norm.of(&delta) <= 0.3 + 1e-9),
                }
                assert!(adv.row(r).iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("L2".parse::<Norm>().unwrap(), Norm::L2);
        assert_eq!("linf".parse::<Norm>().unwrap(), Norm::Linf);
        assert!("l1".parse::<Norm>().is_err());
    }
}

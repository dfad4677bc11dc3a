//! Classifiers `f_θ`, their initialization, Adam and the staircase schedule.
//!
//! Models contain no normalization layers, so logits are a deterministic
//! function of the input and per-example quantities can be obtained from
//! batch-level backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

/// Layer topology of a classifier mapping inputs of `input_shape` to
/// `num_classes` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Dense/ReLU stack, e.g. `mlp(2, &[32, 32], 2)` for a 2-32-32-2 net.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: prev,
                outputs: h,
            });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense {
            inputs: prev,
            outputs: num_classes,
        });
        Self {
            input_shape: vec![input_dim],
            layers,
            num_classes,
        }
    }

    /// Four 3x3 conv layers (two of them strided) and a dense head, for
    /// CIFAR-shaped `channels x height x width` inputs.
    pub fn small_conv(channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        let conv = |i, o, stride| Layer::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let (h, w) = (height.div_ceil(2).div_ceil(2), width.div_ceil(2).div_ceil(2));
        Self {
            input_shape: vec![channels, height, width],
            layers: vec![
                conv(channels, 16, 1),
                Layer::Relu,
                conv(16, 16, 2),
                Layer::Relu,
                conv(16, 32, 1),
                Layer::Relu,
                conv(32, 32, 2),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: 32 * h * w,
                    outputs: num_classes,
                },
            ],
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Per-example output shape after every layer; errors if layers do not
    /// compose or the last layer does not emit `num_classes` logits.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be at least 1".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape.as_slice()) {
                (Layer::Dense { inputs, outputs }, &[d]) if d == inputs && outputs > 0 => vec![outputs],
                (
                    Layer::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    &[c, h, w],
                ) if c == in_channels
                    && out_channels > 0
                    && kernel > 0
                    && stride > 0
                    && h + 2 * padding >= kernel
                    && w + 2 * padding >= kernel =>
                {
                    vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                (Layer::Relu, s) => s.to_vec(),
                (Layer::Flatten, s) => vec![s.iter().product()],
                (layer, s) => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {i} ({layer:?}) cannot take input of shape {s:?}"
                    )))
                }
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::InvalidSpec(format!(
                "final shape {shape:?} is not [{}] logits",
                self.num_classes
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// Names, shapes and fan-in of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    out.push((format!("layer{i}.weight"), vec![inputs, outputs], inputs));
                    out.push((format!("layer{i}.bias"), vec![outputs], inputs));
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    out.push((
                        format!("layer{i}.weight"),
                        vec![out_channels, in_channels, kernel, kernel],
                        fan_in,
                    ));
                    out.push((format!("layer{i}.bias"), vec![out_channels], fan_in));
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }
}

/// Named parameter tensors in the order given by [`ModelSpec::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
}

impl Parameters {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(shape)))
            .collect();
        Self { entries }
    }

    /// Checks that names and shapes follow `spec` and all values are finite.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.entries.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in layout.iter().zip(&self.entries) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::InvalidSpec(format!(
                    "parameter `{pname}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::InvalidSpec(format!("parameter `{pname}` has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A model specification bundled with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Parameters,
}

impl Model {
    pub fn new(spec: ModelSpec, params: Parameters) -> Result<Self> {
        spec.validate()?;
        params.check(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = Parameters::init(&spec, seed)?;
        Ok(Self { spec, params })
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass for a batch `x: [B, ..input_shape]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        forward(tape, &self.spec, params, x)
    }

    /// Logits for a batch, evaluated on a scratch tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Records `f_θ(x)` for `x: [B, ..spec.input_shape]`, returning `[B, K]` logits.
pub fn forward(tape: &mut Tape, spec: &ModelSpec, params: &[Var], x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
        return Err(Error::InputShape {
            expected: spec.input_shape.clone(),
            got: xs,
        });
    }
    let batch = xs[0];
    let mut h = x;
    let mut p = params.iter();
    let mut next = |what: &str| {
        p.next()
            .copied()
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter for {what}")))
    };
    for layer in &spec.layers {
        h = match *layer {
            Layer::Dense { outputs, .. } => {
                let (w, b) = (next("dense weight")?, next("dense bias")?);
                let z = tape.matmul(h, w)?;
                let bb = tape.broadcast(b, &[batch, outputs])?;
                tape.add(z, bb)?
            }
            Layer::Conv { stride, padding, .. } => {
                let (w, b) = (next("conv weight")?, next("conv bias")?);
                let z = tape.conv2d(h, w, stride, padding)?;
                let zs = tape.shape(z).to_vec();
                let (o, hw) = (zs[1], zs[2] * zs[3]);
                let be = tape.expand_last(b, hw)?;
                let be = tape.reshape(be, &zs[1..])?;
                let bb = tape.broadcast(be, &zs)?;
                debug_assert_eq!(tape.shape(be)[0], o);
                tape.add(z, bb)?
            }
            Layer::Relu => tape.relu(h)?,
            Layer::Flatten => tape.flatten(h)?,
        };
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`. Nothing is modified if
    /// any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidSpec(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::InvalidSpec(format!(
                    "adam: gradient for `{name}` has shape {:?}, expected {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Staircase learning-rate decay: `base * factor^(milestones <= epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub factor: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.base)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} not in (0, 1]", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Rate for `epoch`; a milestone's decay applies from that epoch onward.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_spec_is_valid() {
        let spec = ModelSpec::mlp(2, &[32, 32], 2);
        assert_eq!(spec.layer_shapes().unwrap().last().unwrap(), &vec![2]);
        assert_eq!(spec.param_layout().len(), 6);
    }

    #[test]
    fn small_conv_spec_composes() {
        let spec = ModelSpec::small_conv(3, 32, 32, 10);
        spec.validate().unwrap();
        let spec = ModelSpec::small_conv(1, 5, 7, 3);
        spec.validate().unwrap();
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = ModelSpec::mlp(2, &[4], 3);
        spec.num_classes = 4;
        assert!(spec.validate().is_err());
        let spec = ModelSpec {
            input_shape: vec![3],
            layers: vec![Layer::Dense { inputs: 2, outputs: 2 }],
            num_classes: 2,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let spec = ModelSpec::mlp(3, &[5], 4);
        let model = Model::new(spec.clone(), Parameters::zeros(&spec)).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 0.2, 0.9, 0.1, -0.5]).unwrap();
        let out = model.logits(&x).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_layer() {
        let spec = ModelSpec::mlp(2, &[], 2);
        let params = Parameters::new(vec![
            ("layer0.weight".into(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ]);
        let model = Model::new(spec, params).unwrap();
        let out = model.logits(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = Model::init(ModelSpec::mlp(3, &[4], 2), 0).unwrap();
        let err = model.logits(&Tensor::zeros(vec![2, 4])).unwrap_err();
        assert!(matches!(err, Error::InputShape { .. }));
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::mlp(4, &[8], 3);
        let a = Parameters::init(&spec, 7).unwrap();
        let b = Parameters::init(&spec, 7).unwrap();
        let c = Parameters::init(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("layer0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_variance() {
        let spec = ModelSpec::mlp(256, &[], 256);
        let p = Parameters::init(&spec, 3).unwrap();
        let w = p.get("layer0.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 256.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var} vs {target}");
    }

    fn scalar_params(v: f64) -> Parameters {
        Parameters::new(vec![("p".into(), Tensor::scalar(v))])
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = scalar_params(1.5);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(p.get("p").unwrap().item(), Some(1.5));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        // m_hat = 1, v_hat = 1, so the step is 0.1 / (1 + 1e-8).
        let moved = p.get("p").unwrap().item().unwrap();
        assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let cfg = AdamConfig::default();
        let grads = [0.7, -1.3];
        let (mut theta, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = scalar_params(0.25);
        let mut s = AdamState::new(cfg, &p);
        for g in grads {
            s.step(&mut p, &[Tensor::scalar(g)], 0.01).unwrap();
        }
        assert!((p.get("p").unwrap().item().unwrap() - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = s.step(&mut p, &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn staircase_schedule() {
        let s = LrSchedule {
            base: 1e-4,
            milestones: vec![60, 120],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(59), 1e-4);
        assert!((s.lr_at(60) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(130) - 1e-6).abs() < 1e-20);
        s.validate().unwrap();
        let bad = LrSchedule {
            milestones: vec![5, 5],
            ..s
        };
        assert!(bad.validate().is_err());
    }
}

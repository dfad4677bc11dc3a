//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ngebm::attacks::{AttackConfig, Norm};
use ngebm::data::{
    cifar10_int_with_std, read_cifar_binary, CifarVariant, Dataset, GaussianMixture, Split, INTERP_NOISE_STD,
};
use ngebm::energy::ScoreKind;
use ngebm::nn::{Layer, ModelSpec};
use ngebm::sampler::SgldConfig;
use ngebm::trainer::TrainConfig;
use ngebm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative to the config file. Overridden by `NGEBM_OUT_DIR` and `--out`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Number of seeded repetitions run by `train` (seeds `seed..seed+repeats`).
    #[serde(default = "one")]
    pub repeats: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub attack: AttackSweep,
    #[serde(default)]
    pub sample: SampleConfig,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp { hidden: Vec<usize> },
    SmallConv,
    Custom { layers: Vec<Layer> },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { hidden: vec![32, 32] }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize], num_classes: usize) -> Result<ModelSpec, CliError> {
        let spec = match self {
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(input_shape.iter().product(), hidden, num_classes),
            ModelConfig::SmallConv => match input_shape {
                [c, h, w] => ModelSpec::small_conv(*c, *h, *w, num_classes),
                _ => {
                    return Err(CliError::Config(format!(
                        "small_conv needs [C, H, W] inputs, data has shape {input_shape:?}"
                    )))
                }
            },
            ModelConfig::Custom { layers } => ModelSpec {
                input_shape: input_shape.to_vec(),
                layers: layers.clone(),
                num_classes,
            },
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    /// Defaults to the training set.
    #[serde(default)]
    pub eval: Option<DataSource>,
    /// Out-of-distribution set for `ood`.
    #[serde(default)]
    pub ood: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Mixture(GaussianMixture),
    Cifar(CifarSource),
    Csv(CsvSource),
    Interpolated(InterpolatedSource),
}

/// Midpoints of consecutive batches of `base` plus Gaussian noise (the
/// CIFAR10-Int construction). The first batch is paired with itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolatedSource {
    pub base: Box<DataSource>,
    #[serde(default = "interp_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "interp_std")]
    pub noise_std: f64,
}

fn interp_batch() -> usize {
    64
}

fn interp_std() -> f64 {
    INTERP_NOISE_STD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSource {
    pub variant: CifarVariant,
    /// One or more binary batch files, concatenated in order.
    pub paths: Vec<PathBuf>,
    #[serde(default = "train_split")]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub num_classes: usize,
    #[serde(default = "train_split")]
    pub split: Split,
}

fn train_split() -> Split {
    Split::Train
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset, CliError> {
        let ds = match self {
            DataSource::Mixture(gm) => gm.generate()?,
            DataSource::Csv(c) => Dataset::read_csv(&base.join(&c.path), c.num_classes, c.split)?,
            DataSource::Cifar(c) => {
                let mut parts = Vec::with_capacity(c.paths.len());
                for p in &c.paths {
                    parts.push(read_cifar_binary(&base.join(p), c.variant, c.split)?);
                }
                concat(parts)?
            }
            DataSource::Interpolated(src) => interpolate(src.base.load(base)?, src)?,
        };
        Ok(ds)
    }
}

fn interpolate(mut ds: Dataset, src: &InterpolatedSource) -> Result<Dataset, CliError> {
    if src.batch_size == 0 || !(src.noise_std >= 0.0 && src.noise_std.is_finite()) {
        return Err(CliError::Config("interpolated source needs batch_size >= 1 and noise_std >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    let mut prev: Option<Tensor> = None;
    for chunk in idx.chunks(src.batch_size) {
        let cur = ds.inputs.select_rows(chunk).map_err(ngebm::Error::from)?;
        let other = match &prev {
            Some(p) if p.shape() == cur.shape() => p,
            _ => &cur,
        };
        parts.push(cifar10_int_with_std(&cur, other, src.noise_std, &mut rng)?);
        prev = Some(cur);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    ds.inputs = Tensor::concat_rows(&refs).map_err(ngebm::Error::from)?;
    ds.provenance = format!("interpolated({})", ds.provenance);
    Ok(ds)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset, CliError> {
    let mut it = parts.into_iter();
    let mut first = it
        .next()
        .ok_or_else(|| CliError::Config("cifar source needs at least one path".into()))?;
    for next in it {
        first.inputs = Tensor::concat_rows(&[&first.inputs, &next.inputs])
            .map_err(|e| CliError::Config(e.to_string()))?;
        first.labels.extend(next.labels);
        if let (Some(a), Some(b)) = (first.coarse_labels.as_mut(), next.coarse_labels) {
            a.extend(b);
        }
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ece_bins: usize,
    pub hist_bins: usize,
    pub batch_size: usize,
    pub score_kinds: Vec<ScoreKind>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ece_bins: ngebm::metrics::DEFAULT_ECE_BINS,
            hist_bins: 50,
            batch_size: 256,
            score_kinds: ScoreKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSweep {
    pub norms: Vec<Norm>,
    pub epsilons: Vec<f64>,
    pub n_steps: usize,
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub batch_size: usize,
}

impl Default for AttackSweep {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            norms: vec![Norm::L2, Norm::Linf],
            epsilons: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5],
            n_steps: base.n_steps,
            step_size: None,
            random_start: base.random_start,
            batch_size: 128,
        }
    }
}

impl AttackSweep {
    pub fn base(&self, norm: Norm) -> AttackConfig {
        AttackConfig {
            norm,
            n_steps: self.n_steps,
            step_size: self.step_size,
            random_start: self.random_start,
            ..AttackConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub sgld: SgldConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 256,
            sgld: SgldConfig::default(),
        }
    }
}

impl ExperimentConfig {
    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg = Self::from_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema check only; call [`ExperimentConfig::validate`] afterwards.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be >= 1".into()));
        }
        if self.metrics.ece_bins == 0 || self.metrics.hist_bins == 0 || self.metrics.batch_size == 0 {
            return Err(CliError::Config("metrics bins and batch_size must be >= 1".into()));
        }
        if self.attack.epsilons.windows(2).any(|w| w[0] > w[1]) || self.attack.epsilons.iter().any(|e| *e < 0.0) {
            return Err(CliError::Config("attack.epsilons must be non-negative and ascending".into()));
        }
        if self.attack.batch_size == 0 {
            return Err(CliError::Config("attack.batch_size must be >= 1".into()));
        }
        self.sample.sgld.validate()?;
        if self.sample.n == 0 {
            return Err(CliError::Config("sample.n must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data.train]
        source = "mixture"
        centers = [[-0.5, 0.0], [0.5, 0.0]]
        std = 0.15
        n_per_class = 16
        seed = 1
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs, 150);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.metrics.ece_bins, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["bogus = 1", "[train]\nepochz = 3", "[model]\nkind = \"mlp\"\nhidden = [4]\nwidth = 2"] {
            let text = format!("{extra}\n{MINIMAL}");
            assert!(ExperimentConfig::parse(&text).is_err(), "{extra}");
        }
        let text = MINIMAL.replace("seed = 1", "seed = 1\nsigma = 2");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn interpolated_source_keeps_labels_and_shape() {
        let text = format!(
            "{MINIMAL}\n[data.ood]\nsource = \"interpolated\"\nbatch_size = 5\nseed = 3\n\n[data.ood.base]\nsource = \"mixture\"\ncenters = [[-0.5, 0.0], [0.5, 0.0]]\nstd = 0.15\nn_per_class = 16\nseed = 1\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let plain = cfg.data.train.load(Path::new(".")).unwrap();
        let mixed = cfg.data.ood.unwrap().load(Path::new(".")).unwrap();
        assert_eq!(mixed.labels, plain.labels);
        assert_eq!(mixed.inputs.shape(), plain.inputs.shape());
        assert_ne!(mixed.inputs, plain.inputs);
        let first = plain.inputs.row(0)[0];
        assert!((mixed.inputs.row(0)[0] - first).abs() < 0.2);
    }

    #[test]
    fn invalid_mode_is_rejected() {
        let text = format!("[train.loss]\nmode = \"gan\"\n{MINIMAL}");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
    }
}

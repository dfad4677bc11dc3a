//! Datasets: synthetic 2-D Gaussian mixtures, CIFAR binary records, the
//! interpolated CIFAR10-Int transform and seeded mini-batching.
//!
//! All inputs live in `[-1, 1]`. CIFAR pixel bytes map through
//! `x = b / 127.5 - 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ..input_shape]`, every value in `[-1, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
    /// CIFAR-100 coarse labels, kept so records can be written back.
    pub coarse_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, provenance: impl Into<String>) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            split,
            provenance: provenance.into(),
            coarse_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.shape().len() < 2 || self.inputs.rows() != self.labels.len() {
            return Err(Error::InputShape {
                expected: vec![self.labels.len()],
                got: self.inputs.shape().to_vec(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        if let Some(v) = self.inputs.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("input value {v} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance.clone(),
            coarse_labels: self
                .coarse_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        })
    }

    /// Flat-row CSV with columns `x0,..,x{D-1},label`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.inputs.row_len();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for (i, &y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the CSV layout of [`Dataset::write_csv`] as flat `[N, D]` inputs.
    pub fn read_csv(path: &Path, num_classes: usize, split: Split) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let d = rdr.headers()?.len().saturating_sub(1);
        if d == 0 {
            return Err(Error::Config(format!("{}: expected columns x0..,label", path.display())));
        }
        let (mut data, mut labels) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad value `{s}`: {e}", path.display())))
            };
            for field in rec.iter().take(d) {
                data.push(parse(field)?);
            }
            let label = rec.get(d).unwrap_or("");
            labels.push(
                label
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("{}: bad label `{label}`: {e}", path.display())))?,
            );
        }
        let inputs = Tensor::new(vec![labels.len(), d], data)?;
        Dataset::new(inputs, labels, num_classes, split, format!("csv:{}", path.display()))
    }
}

/// Labeled isotropic Gaussian blobs in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
    pub n_per_class: usize,
    pub seed: u64,
    /// Fraction of labels replaced by a uniformly chosen different class.
    #[serde(default)]
    pub label_noise: f64,
    /// Points are divided by this factor; by default `max(1, max |coord|)`
    /// so that everything lands in `[-1, 1]`.
    #[serde(default)]
    pub scale: Option<f64>,
    /// Class index assigned to the first center (useful for OOD blobs).
    #[serde(default)]
    pub first_label: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl GaussianMixture {
    pub fn new(centers: Vec<[f64; 2]>, std: f64, n_per_class: usize, seed: u64) -> Self {
        Self {
            centers,
            std,
            n_per_class,
            seed,
            label_noise: 0.0,
            scale: None,
            first_label: 0,
            num_classes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("gaussian mixture needs at least one center".into()));
        }
        for (i, a) in self.centers.iter().enumerate() {
            if self.centers[..i].contains(a) {
                return Err(Error::Config(format!("duplicate mixture center {a:?}")));
            }
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Config(format!("mixture std {} must be >= 0", self.std)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label noise must be in [0, 1]".into()));
        }
        if matches!(self.scale, Some(s) if !(s > 0.0)) {
            return Err(Error::Config("mixture scale must be > 0".into()));
        }
        Ok(())
    }

    /// Points before rescaling, class by class, with their clean labels.
    pub fn sample_raw(&self) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.std).expect("validated std");
        let mut points = Vec::with_capacity(self.centers.len() * self.n_per_class);
        let mut labels = Vec::with_capacity(points.capacity());
        for (k, c) in self.centers.iter().enumerate() {
            for _ in 0..self.n_per_class {
                points.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                labels.push(self.first_label + k);
            }
        }
        Ok((points, labels))
    }

    pub fn generate(&self) -> Result<Dataset> {
        let (points, mut labels) = self.sample_raw()?;
        let classes = self.num_classes.unwrap_or(self.first_label + self.centers.len());
        let max_abs = points.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = self.scale.unwrap_or(max_abs.max(1.0));
        let data: Vec<f64> = points
            .iter()
            .flatten()
            .map(|v| (v / scale).clamp(-1.0, 1.0))
            .collect();
        if self.label_noise > 0.0 && classes > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1);
            for y in labels.iter_mut() {
                if rng.random::<f64>() < self.label_noise {
                    let shift = rng.random_range(1..classes);
                    *y = (*y + shift) % classes;
                }
            }
        }
        let n = labels.len();
        Dataset::new(
            Tensor::new(vec![n, 2], data)?,
            labels,
            classes,
            Split::Train,
            format!(
                "gaussian_mixture_2d(seed={}, std={}, scale={scale}, label_noise={})",
                self.seed, self.std, self.label_noise
            ),
        )
    }
}

/// Balanced 2-D Gaussian blobs, one class per center.
pub fn gen_gaussian_mixture_2d(n_per_class: usize, centers: &[[f64; 2]], std: f64, seed: u64) -> Result<Dataset> {
    GaussianMixture::new(centers.to_vec(), std, n_per_class, seed).generate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses concatenated CIFAR records. CIFAR-100 yields fine labels and keeps
/// the coarse ones in [`Dataset::coarse_labels`].
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Parse {
            offset,
            reason: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() % rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let base = (i * rec) as u64;
        let (label_offset, label) = match variant {
            CifarVariant::Cifar10 => (0, chunk[0] as usize),
            CifarVariant::Cifar100 => {
                if chunk[0] >= 20 {
                    return Err(Error::Parse {
                        offset: base,
                        reason: format!("coarse label {} out of range", chunk[0]),
                    });
                }
                coarse.push(chunk[0] as usize);
                (1, chunk[1] as usize)
            }
        };
        if label >= variant.num_classes() {
            return Err(Error::Parse {
                offset: base + label_offset,
                reason: format!("label {label} out of range for {} classes", variant.num_classes()),
            });
        }
        labels.push(label);
        data.extend(chunk[variant.label_bytes()..].iter().map(|&b| byte_to_unit(b)));
    }
    let mut ds = Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        variant.num_classes(),
        split,
        format!("{variant:?}"),
    )?;
    if variant == CifarVariant::Cifar100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

pub fn read_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut ds = parse_cifar_bytes(&bytes, variant, split)?;
    ds.provenance = format!("{variant:?}:{}", path.display());
    Ok(ds)
}

/// Serializes a `[N, 3, 32, 32]` dataset in CIFAR record layout.
pub fn write_cifar_binary<W: Write>(dataset: &Dataset, variant: CifarVariant, mut w: W) -> Result<()> {
    if dataset.input_shape() != [3, 32, 32] {
        return Err(Error::InputShape {
            expected: vec![3, 32, 32],
            got: dataset.input_shape().to_vec(),
        });
    }
    let mut buf = Vec::with_capacity(dataset.len() * variant.record_len());
    for (i, &y) in dataset.labels.iter().enumerate() {
        if y >= variant.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: variant.num_classes(),
            });
        }
        if variant == CifarVariant::Cifar100 {
            let c = dataset.coarse_labels.as_ref().map_or(0, |c| c[i]);
            buf.push(c as u8);
        }
        buf.push(y as u8);
        buf.extend(dataset.inputs.row(i).iter().map(|&x| unit_to_byte(x)));
    }
    w.write_all(&buf).map_err(|e| Error::io("<cifar writer>", e))
}

/// Standard deviation of the CIFAR10-Int perturbation (variance 0.001).
pub const INTERP_NOISE_STD: f64 = 0.031_622_776_601_683_79;

/// Midpoint of two batches plus Gaussian noise, clipped to `[-1, 1]`.
pub fn cifar10_int_with_std<R: Rng + ?Sized>(current: &Tensor, previous: &Tensor, noise_std: f64, rng: &mut R) -> Result<Tensor> {
    if current.shape() != previous.shape() {
        return Err(Error::InputShape {
            expected: current.shape().to_vec(),
            got: previous.shape().to_vec(),
        });
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let data = current
        .data()
        .iter()
        .zip(previous.data())
        .map(|(&a, &b)| ((a + b) / 2.0 + noise.sample(rng)).clamp(-1.0, 1.0))
        .collect();
    Ok(Tensor::new(current.shape().to_vec(), data)?)
}

/// CIFAR10-Int with the default `N(0, 0.001)` perturbation.
pub fn cifar10_int(current: &Tensor, previous: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cifar10_int_with_std(current, previous, INTERP_NOISE_STD, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Seeded mini-batching: a fresh permutation per epoch, last batch short.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batches<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(Self {
            dataset,
            batch_size,
            seed,
        })
    }

    /// Visit order for `epoch`; depends only on the seed and epoch.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> EpochIter<'a> {
        EpochIter {
            dataset: self.dataset,
            order: self.order(epoch),
            batch_size: self.batch_size,
            pos: 0,
            previous: None,
        }
    }
}

pub struct EpochIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    previous: Option<Batch>,
}

impl Iterator for EpochIter<'_> {
    type Item = (Batch, Option<Batch>);

    /// Yields each batch together with its predecessor in the epoch (the
    /// first batch of an epoch has none; callers pair it with itself).
    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let batch = Batch {
            x: self
                .dataset
                .inputs
                .select_rows(&indices)
                .expect("indices come from a permutation of the dataset"),
            y: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        };
        let prev = self.previous.replace(batch.clone());
        Some((batch, prev))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_mixture_sits_on_centers() {
        let g = GaussianMixture::new(vec![[0.5, -0.25], [-0.75, 0.0]], 0.0, 4, 3);
        let (pts, labels) = g.sample_raw().unwrap();
        assert!(pts[..4].iter().all(|p| *p == [0.5, -0.25]));
        assert!(pts[4..].iter().all(|p| *p == [-0.75, 0.0]));
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let ds = g.generate().unwrap();
        assert_eq!(ds.inputs.row(0), &[0.5, -0.25]);
    }

    #[test]
    fn mixture_is_seeded_and_in_range() {
        let centers = [[3.0, 0.0], [-3.0, 1.0]];
        let a = gen_gaussian_mixture_2d(50, &centers, 0.5, 9).unwrap();
        let b = gen_gaussian_mixture_2d(50, &centers, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.inputs.data().iter().all(|v| v.abs() <= 1.0));
        assert!(GaussianMixture::new(vec![[0.0, 0.0], [0.0, 0.0]], 0.1, 1, 0).generate().is_err());
    }

    #[test]
    fn label_noise_flips_about_the_right_fraction() {
        let mut g = GaussianMixture::new(vec![[0.5, 0.0], [-0.5, 0.0]], 0.1, 2000, 1);
        g.label_noise = 0.1;
        let noisy = g.generate().unwrap();
        let (_, clean) = g.sample_raw().unwrap();
        let flipped = noisy.labels.iter().zip(&clean).filter(|(a, b)| a != b).count();
        let frac = flipped as f64 / clean.len() as f64;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
    }

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(pixel, CIFAR_PIXELS));
        r
    }

    #[test]
    fn cifar_endpoint_mapping() {
        let ds = parse_cifar_bytes(&record(0, 0), CifarVariant::Cifar10, Split::Test).unwrap();
        assert_eq!(ds.labels, vec![0]);
        assert!(ds.inputs.data().iter().all(|&v| v == -1.0));
        let ds = parse_cifar_bytes(&record(9, 255), CifarVariant::Cifar10, Split::Test).unwrap();
        assert!(ds.inputs.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.inputs.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn byte_roundtrip_for_all_values() {
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut bytes = record(1, 7);
        bytes.extend(record(2, 7));
        bytes.truncate(bytes.len() - 10);
        match parse_cifar_bytes(&bytes, CifarVariant::Cifar10, Split::Train) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let mut bytes = record(1, 7);
        bytes.extend(record(10, 7));
        match parse_cifar_bytes(&bytes, CifarVariant::Cifar10, Split::Train) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut r = vec![3u8, 42];
        r.extend(std::iter::repeat_n(128u8, CIFAR_PIXELS));
        let ds = parse_cifar_bytes(&r, CifarVariant::Cifar100, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![42]);
        assert_eq!(ds.coarse_labels, Some(vec![3]));
        let mut out = Vec::new();
        write_cifar_binary(&ds, CifarVariant::Cifar100, &mut out).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn interpolation_midpoint() {
        let a = Tensor::full(vec![2, 3], 1.0);
        let b = Tensor::full(vec![2, 3], -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = cifar10_int_with_std(&a, &b, 0.0, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let same = cifar10_int_with_std(&a, &a, 0.0, &mut rng).unwrap();
        assert_eq!(same, a);
        assert!(cifar10_int(&a, &Tensor::zeros(vec![3, 2]), 0).is_err());
    }

    #[test]
    fn batching_partitions_each_epoch() {
        let ds = gen_gaussian_mixture_2d(5, &[[0.5, 0.5], [-0.5, -0.5]], 0.1, 0).unwrap();
        let batches = Batches::new(&ds, 3, 11).unwrap();
        let mut seen: Vec<usize> = batches.epoch(0).flat_map(|(b, _)| b.indices).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batches.epoch(0).count(), 4);
        assert_eq!(batches.order(2), Batches::new(&ds, 3, 11).unwrap().order(2));
        let whole = Batches::new(&ds, 10, 11).unwrap();
        assert_eq!(whole.epoch(0).count(), 1);
        let mut it = batches.epoch(1);
        let (first, prev) = it.next().unwrap();
        assert!(prev.is_none());
        let (_, prev) = it.next().unwrap();
        assert_eq!(prev.unwrap(), first);
    }

    #[test]
    fn csv_roundtrip() {
        let ds = gen_gaussian_mixture_2d(3, &[[0.5, 0.5], [-0.5, -0.5]], 0.1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(fs::File::create(&path).unwrap()).unwrap();
        let back = Dataset::read_csv(&path, 2, Split::Train).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
    }
}

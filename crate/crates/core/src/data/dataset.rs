use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

const BATCH_STREAM: u64 = 0xba7c_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine map applied to `[0, 1]` pixels: `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics of `[0, 1]`-scaled bytes laid out
    /// `[S, C, H, W]` with `shape = [C, H, W]`.
    pub fn fit(pixels: &[u8], shape: [usize; 3]) -> Result<Self> {
        let [channels, h, w] = shape;
        let hw = h * w;
        let plane = channels * hw;
        if pixels.is_empty() || plane == 0 {
            return Err(Error::EmptyDataset);
        }
        let samples = pixels.len() / plane;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let mut hist = [0u64; 256];
            for s in 0..samples {
                let base = s * plane + c * hw;
                for &p in &pixels[base..base + hw] {
                    hist[p as usize] += 1;
                }
            }
            let n = (samples * hw) as f64;
            let m = hist
                .iter()
                .enumerate()
                .map(|(v, &k)| k as f64 * v as f64 / 255.0)
                .sum::<f64>()
                / n;
            let var = hist
                .iter()
                .enumerate()
                .map(|(v, &k)| k as f64 * (v as f64 / 255.0 - m).powi(2))
                .sum::<f64>()
                / n;
            mean[c] = m;
            // A constant channel is left unscaled.
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, channel: usize, byte: u8) -> f32 {
        ((byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]) as f32
    }

    /// Inverse of [`apply`](Self::apply), rounded back to a byte.
    pub fn invert(&self, channel: usize, value: f32) -> u8 {
        let v = (value as f64 * self.std[channel] + self.mean[channel]) * 255.0;
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Labelled images `[S, C, H, W]`, stored standardized in single precision
/// and cast to the training precision batch by batch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    norm: Normalization,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: [usize; 3],
        images: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        norm: Normalization,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != labels.len() * per {
            return Err(Error::DataLength {
                shape: vec![labels.len(), shape[0], shape[1], shape[2]],
                len: images.len(),
                expected: labels.len() * per,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if norm.mean.len() != shape[0] || norm.std.len() != shape[0] {
            return Err(Error::InvalidArgument(format!(
                "normalization has {} channels, images have {}",
                norm.mean.len(),
                shape[0]
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            images,
            labels,
            num_classes,
            norm,
        })
    }

    /// Standardizes raw bytes laid out `[S, C, H, W]` with `norm`.
    pub fn from_bytes(
        name: impl Into<String>,
        split: Split,
        shape: [usize; 3],
        pixels: &[u8],
        labels: Vec<usize>,
        num_classes: usize,
        norm: Normalization,
    ) -> Result<Self> {
        let hw = shape[1] * shape[2];
        let per = shape[0] * hw;
        let images = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| norm.apply((i % per) / hw, p))
            .collect();
        Self::new(name, split, shape, images, labels, num_classes, norm)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    /// Gathers `indices` into a `[B, C, H, W]` tensor and its labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        self.slice(0, n, self.split)
    }

    /// Samples `start..end` (clamped to the length) tagged as `split`.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        let per = self.shape.iter().product::<usize>();
        Self {
            name: self.name.clone(),
            split,
            shape: self.shape,
            images: self.images[start * per..end * per].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        }
    }
}

/// Class-conditional Gaussian blobs with unit noise. Class centres are
/// random directions scaled so that any two centres lie about
/// `separation` noise standard deviations apart.
pub fn synthetic(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
    separation: f64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs >= 2 classes and positive sizes, got {classes} x {per_class} of {shape:?}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidArgument(format!("separation {separation}")));
    }
    let dim: usize = shape.iter().product();
    let mut rng = Rng::new(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let scale = separation / std::f64::consts::SQRT_2 / norm;
            v.into_iter().map(|x| x * scale).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    let perm = rng.permutation(order.len());
    order = perm.into_iter().map(|i| order[i]).collect();
    let mut images = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        images.extend(
            centres[c]
                .iter()
                .map(|&m| (m + rng.standard_normal()) as f32),
        );
    }
    Dataset::new(
        "synthetic",
        Split::Train,
        shape,
        images,
        order,
        classes,
        Normalization::identity(shape[0]),
    )
}

/// Sample order for one epoch: a permutation drawn from `(seed, epoch)`,
/// cut into batches of `batch_size`; the trailing partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let order = Rng::with_stream(seed, BATCH_STREAM + epoch).permutation(n);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

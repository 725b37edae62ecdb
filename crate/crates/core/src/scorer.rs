//! Context scorers: anything that maps a contextual sample to a probability
//! vector over the K object categories plus background (last index).
//!
//! The builtin scorer is multinomial logistic regression on the sample
//! downsampled to `feature_size × feature_size` RGB, trained by mini-batch
//! gradient descent on cross-entropy with L2 weight decay.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::ContextualSample;
use crate::error::{Error, IoContext, Result};
use crate::par;
use crate::seeding;

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_FEATURE_SIZE: u32 = 32;

const MAGIC: &[u8; 8] = b"CTXSCORE";
const FORMAT_VERSION: u32 = 1;

/// Probabilities over `K + 1` classes, background last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Checks the simplex invariant.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::validation("score vector needs at least two classes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation(format!("invalid probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::validation(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn background(&self) -> f64 {
        *self.0.last().expect("non-empty")
    }

    /// Most likely object class (background excluded) and its probability.
    /// Ties go to the lower index.
    pub fn best_object(&self) -> (usize, f64) {
        let objects = &self.0[..self.0.len() - 1];
        objects
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
            .0
    }
}

pub trait ContextScorer: Sync {
    /// The K object categories; background is implicit.
    fn class_names(&self) -> &[String];

    fn score(&self, sample: &ContextualSample) -> Result<ScoreVector>;

    fn num_outputs(&self) -> usize {
        self.class_names().len() + 1
    }

    fn score_batch(&self, samples: &[ContextualSample]) -> Result<Vec<ScoreVector>> {
        par::map(samples, |s| self.score(s)).into_iter().collect()
    }
}

/// Area-averaged downsampling of `pixels` to `size × size × 3`, centered
/// to `[-0.5, 0.5]`.
pub fn features(pixels: &image::RgbImage, size: u32) -> Vec<f64> {
    let (w, h) = pixels.dimensions();
    let mut out = Vec::with_capacity((size * size * 3) as usize);
    for j in 0..size {
        let (ya, yb) = (j * h / size, ((j + 1) * h / size).max(j * h / size + 1).min(h));
        for i in 0..size {
            let (xa, xb) = (i * w / size, ((i + 1) * w / size).max(i * w / size + 1).min(w));
            let mut acc = [0u64; 3];
            for y in ya..yb {
                for x in xa..xb {
                    let p = pixels.get_pixel(x, y).0;
                    for c in 0..3 {
                        acc[c] += p[c] as u64;
                    }
                }
            }
            let n = ((yb - ya) * (xb - xa)) as f64 * 255.0;
            for a in acc {
                out.push(a as f64 / n - 0.5);
            }
        }
    }
    out
}

/// `-ln softmax(z)[y]`, computed without clamping so divergence shows up as
/// a non-finite value.
fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Linear softmax classifier on downsampled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltinScorer {
    pub input_size: u32,
    pub feature_size: u32,
    pub class_names: Vec<String>,
    /// `(D + 1) × (K + 1)` row-major; the last row is the bias.
    pub weights: Vec<f64>,
}

impl BuiltinScorer {
    pub fn zeros(input_size: u32, feature_size: u32, class_names: Vec<String>) -> Self {
        let d = (feature_size * feature_size * 3) as usize;
        let k = class_names.len() + 1;
        Self {
            input_size,
            feature_size,
            class_names,
            weights: vec![0.0; (d + 1) * k],
        }
    }

    pub fn feature_dim(&self) -> usize {
        (self.feature_size * self.feature_size * 3) as usize
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.weights, x, self.num_outputs())
    }

    pub fn score_features(&self, x: &[f64]) -> ScoreVector {
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        ScoreVector(z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.weights.len() * 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.input_size.to_le_bytes());
        b.extend_from_slice(&self.feature_size.to_le_bytes());
        b.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        for name in &self.class_names {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
        }
        b.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::validation("not a scorer file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::validation(format!("unsupported scorer version {version}")));
        }
        let input_size = r.u32()?;
        let feature_size = r.u32()?;
        if feature_size == 0 || input_size < feature_size {
            return Err(Error::validation(format!(
                "bad sizes: input {input_size}, features {feature_size}"
            )));
        }
        let k = r.u32()? as usize;
        if k == 0 || k > 1 << 16 {
            return Err(Error::validation(format!("bad class count {k}")));
        }
        let mut class_names = Vec::with_capacity(k);
        for _ in 0..k {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::validation("class name is not UTF-8"))?;
            class_names.push(name.to_string());
        }
        let n = r.u64()? as usize;
        let d = (feature_size as usize).pow(2) * 3;
        if n != (d + 1) * (k + 1) {
            return Err(Error::validation(format!(
                "weight count {n} does not match {} features × {} classes",
                d + 1,
                k + 1
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::validation("overflow"))?)?;
        let weights: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("scorer weights are not finite"));
        }
        if r.pos != bytes.len() {
            return Err(Error::validation("trailing bytes after scorer weights"));
        }
        Ok(Self {
            input_size,
            feature_size,
            class_names,
            weights,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::validation("scorer file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ContextScorer for BuiltinScorer {
    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn score(&self, sample: &ContextualSample) -> Result<ScoreVector> {
        let (w, h) = sample.pixels.dimensions();
        if (w, h) != (self.input_size, self.input_size) {
            return Err(Error::validation(format!(
                "sample is {w}x{h}, scorer expects {0}x{0}",
                self.input_size
            )));
        }
        Ok(self.score_features(&features(&sample.pixels, self.feature_size)))
    }
}

fn logits(weights: &[f64], x: &[f64], k: usize) -> Vec<f64> {
    let d = x.len();
    let mut z = weights[d * k..(d + 1) * k].to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &weights[i * k..(i + 1) * k];
        for (zk, wk) in z.iter_mut().zip(row) {
            *zk += xi * wk;
        }
    }
    z
}

/// Precomputed features and labels.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn from_samples(samples: &[ContextualSample], feature_size: u32) -> Self {
        let rows = par::map(samples, |s| features(&s.pixels, feature_size));
        let mut set = Self::new((feature_size * feature_size * 3) as usize);
        for (row, s) in rows.into_iter().zip(samples) {
            set.push(row, s.label);
        }
        set
    }

    pub fn push(&mut self, row: Vec<f64>, label: usize) {
        assert_eq!(row.len(), self.dim, "feature width");
        self.features.extend(row);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean cross-entropy over `batch` plus `weight_decay · ½‖W‖²`, and its
/// gradient with respect to `weights`.
pub fn loss_and_gradient(
    weights: &[f64],
    data: &FeatureSet,
    batch: &[usize],
    n_outputs: usize,
    weight_decay: f64,
) -> (f64, Vec<f64>) {
    let k = n_outputs;
    let d = data.dim;
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    for &i in batch {
        let x = data.row(i);
        let mut p = logits(weights, x, k);
        let y = data.labels[i];
        loss += cross_entropy(&p, y);
        softmax_in_place(&mut p);
        p[y] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let g = &mut grad[j * k..(j + 1) * k];
            for (gk, dk) in g.iter_mut().zip(&p) {
                *gk += xj * dk;
            }
        }
        for (gk, dk) in grad[d * k..].iter_mut().zip(&p) {
            *gk += dk;
        }
    }
    if !batch.is_empty() {
        let n = batch.len() as f64;
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
    }
    let mut sq = 0.0;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += weight_decay * w;
        sq += w * w;
    }
    (loss + 0.5 * weight_decay * sq, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 60,
            early_stop_patience: 4,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::validation("learning rate must be positive, weight decay non-negative"));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::validation("batch size and patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub scorer: BuiltinScorer,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn mean_loss(weights: &[f64], data: &FeatureSet, idx: &[usize], k: usize) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let losses = par::map(idx, |&i| {
        cross_entropy(&logits(weights, data.row(i), k), data.labels[i])
    });
    losses.iter().sum::<f64>() / idx.len() as f64
}

pub fn accuracy_on(scorer: &BuiltinScorer, data: &FeatureSet, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = par::map(idx, |&i| {
        (scorer.score_features(data.row(i)).argmax() == data.labels[i]) as usize
    });
    hits.iter().sum::<usize>() as f64 / idx.len() as f64
}

pub fn accuracy(scorer: &BuiltinScorer, data: &FeatureSet) -> f64 {
    let all: Vec<usize> = (0..data.len()).collect();
    accuracy_on(scorer, data, &all)
}

/// Trains on precomputed features.
///
/// Holds out `val_fraction` of the data by seeded shuffle. When validation
/// loss has not improved for `early_stop_patience` epochs the learning rate
/// drops tenfold once; the next plateau stops training. The best-validation
/// weights are returned.
pub fn train_on_features(
    data: &FeatureSet,
    input_size: u32,
    feature_size: u32,
    class_names: Vec<String>,
    p: &TrainParams,
) -> Result<TrainOutcome> {
    p.validate()?;
    let k = class_names.len() + 1;
    if data.dim != (feature_size * feature_size * 3) as usize {
        return Err(Error::validation("feature width does not match feature size"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {bad} exceeds {k} outputs")));
    }
    let mut present = vec![false; k];
    data.labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::validation("training needs at least two classes"));
    }

    let mut rng = seeding::stream(p.seed, "train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (data.len() as f64 * p.val_fraction).round() as usize;
    let n_val = n_val.min(data.len().saturating_sub(1));
    let val_indices = order[..n_val].to_vec();
    let mut train_indices = order[n_val..].to_vec();
    let monitor: Vec<usize> = if val_indices.is_empty() {
        train_indices.clone()
    } else {
        val_indices.clone()
    };

    let mut scorer = BuiltinScorer::zeros(input_size, feature_size, class_names);
    let mut weights = scorer.weights.clone();
    let mut best_weights = weights.clone();
    let mut best_loss = mean_loss(&weights, data, &monitor, k);
    let mut best_epoch = 0;
    let mut lr = p.learning_rate;
    let mut dropped = false;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 1..=p.max_epochs {
        train_indices.shuffle(&mut rng);
        for batch in train_indices.chunks(p.batch_size) {
            let (_, grad) = loss_and_gradient(&weights, data, batch, k, p.weight_decay);
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        let train_loss = mean_loss(&weights, data, &train_indices, k);
        let val_loss = mean_loss(&weights, data, &monitor, k);
        if !train_loss.is_finite() || !val_loss.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        scorer.weights.clone_from(&weights);
        let val_accuracy = accuracy_on(&scorer, data, &monitor);
        log::debug!("epoch {epoch}: lr {lr:.1e} train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3}");
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_weights.clone_from(&weights);
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= p.early_stop_patience {
                if dropped {
                    break;
                }
                lr /= 10.0;
                dropped = true;
                stale = 0;
            }
        }
    }
    scorer.weights = best_weights;
    Ok(TrainOutcome {
        scorer,
        history,
        best_epoch,
        train_indices,
        val_indices,
    })
}

/// Trains directly on contextual samples.
pub fn train_builtin(
    samples: &[ContextualSample],
    class_names: Vec<String>,
    p: &TrainParams,
) -> Result<TrainOutcome> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("no training samples"))?;
    let input_size = first.pixels.width();
    if samples
        .iter()
        .any(|s| s.pixels.dimensions() != (input_size, input_size))
    {
        return Err(Error::validation("training samples must share one square size"));
    }
    let feature_size = DEFAULT_FEATURE_SIZE.min(input_size);
    let data = FeatureSet::from_samples(samples, feature_size);
    train_on_features(&data, input_size, feature_size, class_names, p)
}

#[cfg(test)]
mod tests {
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::BoundingBox;

    fn sample(pixels: RgbImage, label: usize) -> ContextualSample {
        let (w, h) = pixels.dimensions();
        let r = BoundingBox::from_pixels(0, 0, w, h);
        ContextualSample {
            pixels,
            masked_region: r,
            label,
            source_box: r,
        }
    }

    fn noise_image(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn random_scorer(rng: &mut ChaCha8Rng, k: usize) -> BuiltinScorer {
        let names = (0..k).map(|i| format!("c{i}")).collect();
        let mut s = BuiltinScorer::zeros(64, 8, names);
        s.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.05..0.05));
        s
    }

    #[test]
    fn zero_scorer_is_uniform() {
        let s = BuiltinScorer::zeros(40, 8, vec!["a".into(), "b".into(), "c".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = s.score(&sample(noise_image(&mut rng, 40), 0)).unwrap();
        assert_eq!(v.len(), 4);
        for p in v.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_are_simplex_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_scorer(&mut rng, 3);
        for _ in 0..10 {
            let x = sample(noise_image(&mut rng, 64), 0);
            let a = s.score(&x).unwrap();
            let b = s.score(&x).unwrap();
            assert_eq!(a, b);
            assert!((a.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            ScoreVector::new(a.probs().to_vec()).unwrap();
        }
        let err = s.score(&sample(noise_image(&mut rng, 32), 0)).unwrap_err();
        assert!(err.to_string().contains("expects 64x64"));
    }

    #[test]
    fn score_vector_validation() {
        assert!(ScoreVector::new(vec![0.25, 0.25]).is_err());
        assert!(ScoreVector::new(vec![1.5, -0.5]).is_err());
        let v = ScoreVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        assert_eq!(v.best_object(), (1, 0.6));
        assert_eq!(v.background(), 0.3);
    }

    #[test]
    fn features_of_constant_image() {
        let img = RgbImage::from_pixel(300, 300, Rgb([255, 0, 51]));
        let f = features(&img, 32);
        assert_eq!(f.len(), 32 * 32 * 3);
        assert!((f[0] - 0.5).abs() < 1e-12 && (f[1] + 0.5).abs() < 1e-12 && (f[2] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 3;
        let mut data = FeatureSet::new(12);
        for i in 0..5 {
            data.push((0..12).map(|_| rng.random_range(-0.5..0.5)).collect(), i % k);
        }
        let weights: Vec<f64> = (0..13 * k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let batch: Vec<usize> = (0..5).collect();
        let wd = 1e-2;
        let (_, grad) = loss_and_gradient(&weights, &data, &batch, k, wd);
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for j in 0..weights.len() {
            let mut wp = weights.clone();
            wp[j] += eps;
            let mut wm = weights.clone();
            wm[j] -= eps;
            let fd = (loss_and_gradient(&wp, &data, &batch, k, wd).0
                - loss_and_gradient(&wm, &data, &batch, k, wd).0)
                / (2.0 * eps);
            let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn weight_decay_alone_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = FeatureSet::new(12);
        let mut w: Vec<f64> = (0..13 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
        let mut last = norm(&w);
        for _ in 0..20 {
            let (_, g) = loss_and_gradient(&w, &data, &[], 2, 10.0);
            w.iter_mut().zip(&g).for_each(|(w, g)| *w -= 0.01 * g);
            let n = norm(&w);
            assert!(n < last);
            last = n;
        }
    }

    fn intensity_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<ContextualSample> {
        (0..n)
            .map(|_| {
                let level: f64 = rng.random_range(0.05..0.95);
                let img = RgbImage::from_fn(48, 48, |_, _| {
                    let v = (level * 255.0 + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0);
                    let v = v as u8;
                    Rgb([v, v, v])
                });
                let mean = img.pixels().map(|p| p.0[0] as f64).sum::<f64>() / (48.0 * 48.0 * 255.0);
                sample(img, (mean > 0.5) as usize)
            })
            .collect()
    }

    #[test]
    fn learns_intensity_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = intensity_set(&mut rng, 300);
        let out = train_builtin(&samples, vec!["bright".into()], &TrainParams::default()).unwrap();
        let data = FeatureSet::from_samples(&samples, out.scorer.feature_size);
        let acc = accuracy_on(&out.scorer, &data, &out.train_indices);
        assert!(acc >= 0.99, "train accuracy {acc}");
        // best-so-far training loss never increases
        let mut best = f64::INFINITY;
        for e in &out.history {
            let next = best.min(e.train_loss);
            assert!(next <= best);
            best = next;
        }
    }

    #[test]
    fn zero_epochs_and_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = intensity_set(&mut rng, 40);
        let p = TrainParams {
            max_epochs: 0,
            ..Default::default()
        };
        let out = train_builtin(&samples, vec!["bright".into()], &p).unwrap();
        assert!(out.scorer.weights.iter().all(|&w| w == 0.0));
        assert!(out.history.is_empty());

        let one: Vec<_> = samples.iter().cloned().map(|mut s| {
            s.label = 0;
            s
        }).collect();
        assert!(train_builtin(&one, vec!["bright".into()], &TrainParams::default()).is_err());
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = intensity_set(&mut rng, 40);
        let p = TrainParams {
            learning_rate: f64::MAX,
            ..Default::default()
        };
        let err = train_builtin(&samples, vec!["bright".into()], &p).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1 }), "{err:?}");
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_scorer(&mut rng, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        s.save(&path).unwrap();
        let back = BuiltinScorer::load(&path).unwrap();
        assert_eq!(back.class_names, ["c0", "c1"]);
        for _ in 0..10 {
            let x = sample(noise_image(&mut rng, 64), 0);
            let a = s.score(&x).unwrap();
            let b = back.score(&x).unwrap();
            for (p, q) in a.probs().iter().zip(b.probs()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        let bytes = s.to_bytes();
        assert!(BuiltinScorer::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(BuiltinScorer::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BuiltinScorer::from_bytes(&bad).is_err());
    }
}

//! Pseudo-label refinement with a patch classifier.
//!
//! Confident detections (above `lambda_high`) and confident rejections
//! (below `lambda_low`) train a logistic-regression classifier on small
//! grayscale patches; the classifier then decides which of the detections in
//! between are kept. Refinement only filters; confidences are untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::manifest::{Annotation, DatasetManifest, Stage};
use crate::raster::Raster;
use crate::store::RasterStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lambda_high: f64,
    pub lambda_low: f64,
    /// Patch side; `None` uses the pseudo-box side for the default radius.
    pub patch_size: Option<u32>,
    pub feature_size: u32,
    pub epochs: usize,
    /// Step size as a fraction of the inverse smoothness bound of the loss.
    pub learning_rate: f64,
    pub keep_threshold: f64,
    /// Fewer confident samples than this in either class disables the
    /// classifier.
    pub min_per_class: usize,
    /// Tops up scarce confident negatives with random patches from entries
    /// labeled vehicle-free, up to the number of confident positives.
    pub background_negatives: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda_high: 0.7,
            lambda_low: 0.3,
            patch_size: None,
            feature_size: 16,
            epochs: 400,
            learning_rate: 1.0,
            keep_threshold: 0.5,
            min_per_class: 5,
            background_negatives: true,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lambda_low, self.lambda_high);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::invalid(format!("need 0 <= lambda_low < lambda_high <= 1, got {lo}, {hi}")));
        }
        if self.feature_size == 0 || self.patch_size == Some(0) {
            return Err(Error::invalid("patch and feature sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.keep_threshold) {
            return Err(Error::invalid(format!("keep threshold {}", self.keep_threshold)));
        }
        Ok(())
    }

    pub fn resolved_patch_size(&self) -> u32 {
        self.patch_size
            .unwrap_or_else(|| BoxGeometry::default().side.round() as u32)
    }

    /// Thresholds placed `margin` either side of an optimal-F1 confidence.
    pub fn with_auto_lambdas(mut self, optimal_threshold: f64, margin: f64) -> Result<Self> {
        self.lambda_high = (optimal_threshold + margin).min(1.0);
        self.lambda_low = (optimal_threshold - margin).max(0.0);
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Positive,
    Uncertain,
    Negative,
}

/// Band of a confidence; equality with either threshold is uncertain.
pub fn band(confidence: f64, cfg: &RefineConfig) -> Band {
    if confidence > cfg.lambda_high {
        Band::Positive
    } else if confidence < cfg.lambda_low {
        Band::Negative
    } else {
        Band::Uncertain
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub positives: Vec<Annotation>,
    pub uncertain: Vec<Annotation>,
    pub negatives: Vec<Annotation>,
}

pub fn partition(anns: &[Annotation], cfg: &RefineConfig) -> Result<Partition> {
    let mut p = Partition::default();
    for a in anns {
        let c = a
            .confidence
            .ok_or_else(|| Error::invalid("partition needs scored annotations"))?;
        match band(c, cfg) {
            Band::Positive => p.positives.push(*a),
            Band::Uncertain => p.uncertain.push(*a),
            Band::Negative => p.negatives.push(*a),
        }
    }
    Ok(p)
}

/// Grayscale `patch_size` square around the rounded center, with indices
/// clamped into the image (edge replication).
pub fn crop_patch(image: &Raster, c: &Annotation, patch_size: u32) -> Raster {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let ps = patch_size as i64;
    let x0 = c.cx.round() as i64 - ps / 2;
    let y0 = c.cy.round() as i64 - ps / 2;
    let ch = image.channels();
    let weights: Vec<f32> = if ch == 3 {
        vec![0.299, 0.587, 0.114]
    } else {
        vec![1.0 / ch as f32; ch as usize]
    };
    Raster::from_fn(patch_size, patch_size, 1, |_, j, i| {
        let x = (x0 + i as i64).clamp(0, w - 1) as u32;
        let y = (y0 + j as i64).clamp(0, h - 1) as u32;
        (0..ch).map(|k| weights[k as usize] * image.get(k, y, x)).sum()
    })
}

/// Box-filter downsample of a single-channel patch to `size * size` values.
pub fn features(patch: &Raster, size: u32) -> Vec<f64> {
    let (pw, ph) = (patch.width() as usize, patch.height() as usize);
    let n = size as usize;
    let span = |k: usize, len: usize| {
        let lo = k * len / n;
        let hi = ((k + 1) * len / n).max(lo + 1).min(len);
        (lo.min(len - 1), hi)
    };
    let plane = patch.plane(0);
    let mut out = Vec::with_capacity(n * n);
    for fy in 0..n {
        let (y0, y1) = span(fy, ph);
        for fx in 0..n {
            let (x0, x1) = span(fx, pw);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += plane[y * pw + x] as f64;
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logit(weights: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    weights[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + weights[d]
}

/// Weighted binary cross-entropy of a logistic model whose last weight is
/// the bias. `sample_weights` should sum to one.
pub fn logistic_loss(weights: &[f64], xs: &[Vec<f64>], labels: &[bool], sample_weights: &[f64]) -> f64 {
    xs.iter()
        .zip(labels)
        .zip(sample_weights)
        .map(|((x, &y), &sw)| {
            let z = logit(weights, x);
            // -log sigma(z) = softplus(-z); -log(1 - sigma(z)) = softplus(z)
            sw * if y { softplus(-z) } else { softplus(z) }
        })
        .sum()
}

/// Analytic gradient of [`logistic_loss`].
pub fn logistic_gradient(weights: &[f64], xs: &[Vec<f64>], labels: &[bool], sample_weights: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; weights.len()];
    let d = weights.len() - 1;
    for ((x, &y), &sw) in xs.iter().zip(labels).zip(sample_weights) {
        let r = sw * (sigmoid(logit(weights, x)) - if y { 1.0 } else { 0.0 });
        for (gk, v) in g[..d].iter_mut().zip(x) {
            *gk += r * v;
        }
        g[d] += r;
    }
    g
}

/// Equal total weight per class.
pub fn balanced_weights(labels: &[bool]) -> Vec<f64> {
    let npos = labels.iter().filter(|&&y| y).count() as f64;
    let nneg = labels.len() as f64 - npos;
    labels
        .iter()
        .map(|&y| if y { 0.5 / npos } else { 0.5 / nneg })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchClassifier {
    pub feature_size: u32,
    pub patch_size: u32,
    /// `feature_size^2` weights followed by the bias, over standardized
    /// features.
    pub weights: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub training_loss_trace: Vec<f64>,
}

impl PatchClassifier {
    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict_features(&self, f: &[f64]) -> f64 {
        sigmoid(logit(&self.weights, &self.standardize(f)))
    }

    /// Probability that a grayscale patch shows a vehicle.
    pub fn predict(&self, patch: &Raster) -> f64 {
        self.predict_features(&features(patch, self.feature_size))
    }

    pub fn predict_at(&self, image: &Raster, c: &Annotation) -> f64 {
        self.predict(&crop_patch(image, c, self.patch_size))
    }
}

pub fn train_classifier(pos: &[Raster], neg: &[Raster], cfg: &RefineConfig) -> Result<PatchClassifier> {
    let fs = cfg.feature_size;
    let pf: Vec<Vec<f64>> = pos.iter().map(|p| features(p, fs)).collect();
    let nf: Vec<Vec<f64>> = neg.iter().map(|p| features(p, fs)).collect();
    train_on_features(&pf, &nf, cfg)
}

/// Full-batch gradient descent on the class-balanced logistic loss.
pub fn train_on_features(pos: &[Vec<f64>], neg: &[Vec<f64>], cfg: &RefineConfig) -> Result<PatchClassifier> {
    cfg.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "classifier needs both classes, got {} positive and {} negative samples",
            pos.len(),
            neg.len()
        )));
    }
    let d = (cfg.feature_size * cfg.feature_size) as usize;
    if pos.iter().chain(neg).any(|f| f.len() != d) {
        return Err(Error::invalid("feature length does not match feature_size"));
    }
    let n = (pos.len() + neg.len()) as f64;
    let mut mean = vec![0.0; d];
    for f in pos.iter().chain(neg) {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for f in pos.iter().chain(neg) {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let mut clf = PatchClassifier {
        feature_size: cfg.feature_size,
        patch_size: cfg.resolved_patch_size(),
        weights: Vec::new(),
        feature_mean: mean,
        feature_scale: scale,
        training_loss_trace: Vec::with_capacity(cfg.epochs),
    };
    let xs: Vec<Vec<f64>> = pos.iter().chain(neg).map(|f| clf.standardize(f)).collect();
    let labels: Vec<bool> = (0..xs.len()).map(|i| i < pos.len()).collect();
    let sw = balanced_weights(&labels);

    // The Hessian of the weighted loss is bounded by 1/4 max |x~|^2 with x~
    // the bias-augmented feature vector, so this step never overshoots.
    let smooth = 0.25 * xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0).fold(0.0, f64::max);
    let step = cfg.learning_rate / smooth;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w: Vec<f64> = (0..=d).map(|_| rng.gen_range(-0.01..0.01)).collect();
    for _ in 0..cfg.epochs {
        let g = logistic_gradient(&w, &xs, &labels, &sw);
        for (wk, gk) in w.iter_mut().zip(&g) {
            *wk -= step * gk;
        }
        clf.training_loss_trace.push(logistic_loss(&w, &xs, &labels, &sw));
    }
    clf.weights = w;
    Ok(clf)
}

/// Uncertain annotations whose patch the classifier accepts.
pub fn refine_labels(clf: &PatchClassifier, uncertain: &[(Annotation, Raster)], keep_threshold: f64) -> Vec<Annotation> {
    uncertain
        .iter()
        .filter(|(_, patch)| clf.predict(patch) >= keep_threshold)
        .map(|(a, _)| *a)
        .collect()
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub manifest: DatasetManifest,
    pub classifier: Option<PatchClassifier>,
    /// Too few confident samples; only confident positives were kept.
    pub fallback: bool,
    pub n_positive: usize,
    pub n_uncertain: usize,
    pub n_negative: usize,
    /// Background patches added to the negatives.
    pub n_background: usize,
    pub n_kept: usize,
}

/// Partitions all annotations of a pseudo-labeled manifest, trains the
/// classifier on image patches of the confident ones and keeps the positives
/// plus the accepted uncertain annotations.
pub fn refine_manifest(manifest: &DatasetManifest, store: &dyn RasterStore, cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    let ps = cfg.resolved_patch_size();
    let fs = cfg.feature_size;

    let mut bands: Vec<Vec<Band>> = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let b = e
            .annotations
            .iter()
            .map(|a| {
                a.confidence
                    .map(|c| band(c, cfg))
                    .ok_or_else(|| Error::invalid(format!("{} has unscored annotations", e.image_path)))
            })
            .collect::<Result<Vec<_>>>()?;
        bands.push(b);
    }
    let count = |want: Band| bands.iter().flatten().filter(|&&b| b == want).count();
    let (n_positive, n_uncertain, n_negative) = (count(Band::Positive), count(Band::Uncertain), count(Band::Negative));

    // Patch features for every annotation, grouped per entry.
    let feats: Vec<Vec<Vec<f64>>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            if e.annotations.is_empty() {
                return Ok(Vec::new());
            }
            let img = store.load(&e.image_path)?;
            Ok(e.annotations.iter().map(|a| features(&crop_patch(&img, a, ps), fs)).collect())
        })
        .collect::<Result<_>>()?;

    let background = if cfg.background_negatives && n_negative < n_positive {
        background_features(manifest, store, cfg, n_positive - n_negative)?
    } else {
        Vec::new()
    };
    let n_background = background.len();

    let enough = cfg.min_per_class.max(1);
    let fallback = n_positive < enough || n_negative + n_background < enough;
    let classifier = if fallback {
        log::warn!(
            "refinement fallback: {n_positive} confident positives, {n_negative} confident negatives"
        );
        None
    } else {
        let pick = |want: Band| -> Vec<Vec<f64>> {
            bands
                .iter()
                .zip(&feats)
                .flat_map(|(b, f)| b.iter().zip(f).filter(move |(bb, _)| **bb == want).map(|(_, f)| f.clone()))
                .collect()
        };
        let mut negatives = pick(Band::Negative);
        negatives.extend(background);
        Some(train_on_features(&pick(Band::Positive), &negatives, cfg)?)
    };

    let mut n_kept = 0;
    let mut entries = Vec::with_capacity(manifest.len());
    for ((e, b), f) in manifest.entries.iter().zip(&bands).zip(&feats) {
        let mut out = e.clone();
        out.stage_tag = Stage::Refined;
        if e.annotations.is_empty() {
            entries.push(out);
            continue;
        }
        let mut keep = Vec::new();
        for ((a, bb), ff) in e.annotations.iter().zip(b).zip(f) {
            let take = match (bb, &classifier) {
                (Band::Positive, _) => true,
                (Band::Uncertain, Some(clf)) => clf.predict_features(ff) >= cfg.keep_threshold,
                _ => false,
            };
            if take {
                if *bb == Band::Uncertain {
                    n_kept += 1;
                }
                keep.push(*a);
            }
        }
        if keep.is_empty() {
            out.annotations.clear();
            out.weak_only = e.has_vehicles;
        } else {
            out.set_annotations(keep);
        }
        entries.push(out);
    }
    Ok(RefineOutcome {
        manifest: DatasetManifest::new(entries)?,
        classifier,
        fallback,
        n_positive,
        n_uncertain,
        n_negative,
        n_background,
        n_kept,
    })
}

/// Features of `n` patches at uniform random centers of vehicle-free
/// entries, visited round-robin.
fn background_features(
    manifest: &DatasetManifest,
    store: &dyn RasterStore,
    cfg: &RefineConfig,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let empty: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| !e.has_vehicles && !e.weak_only && e.annotations.is_empty())
        .collect();
    if empty.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let ps = cfg.resolved_patch_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b67_6e65_6761_7476);
    let mut centers: Vec<Vec<Annotation>> = vec![Vec::new(); empty.len()];
    for k in 0..n {
        let e = empty[k % empty.len()];
        let pick = |rng: &mut ChaCha8Rng, dim: u32| {
            let half = (ps as f64 / 2.0).min(dim as f64 / 2.0);
            rng.gen_range(half..=(dim as f64 - half).max(half))
        };
        let x = pick(&mut rng, e.width);
        let y = pick(&mut rng, e.height);
        centers[k % empty.len()].push(Annotation::new(x, y));
    }
    let feats: Vec<Vec<Vec<f64>>> = empty
        .par_iter()
        .zip(&centers)
        .filter(|(_, c)| !c.is_empty())
        .map(|(e, c)| {
            let img = store.load(&e.image_path)?;
            Ok(c.iter().map(|a| features(&crop_patch(&img, a, ps), cfg.feature_size)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(feats.into_iter().flatten().collect())
}

/// Keeps detections with confidence at least `threshold`; the fixed-threshold
/// alternative to classifier refinement.
pub fn threshold_manifest(manifest: &DatasetManifest, threshold: f64) -> DatasetManifest {
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let mut out = e.clone();
            out.stage_tag = Stage::Refined;
            if e.annotations.is_empty() {
                return out;
            }
            let keep: Vec<Annotation> = e
                .annotations
                .iter()
                .filter(|a| a.confidence.unwrap_or(1.0) >= threshold)
                .copied()
                .collect();
            if keep.is_empty() {
                out.annotations.clear();
                out.weak_only = e.has_vehicles;
            } else {
                out.set_annotations(keep);
            }
            out
        })
        .collect();
    DatasetManifest { entries }
}

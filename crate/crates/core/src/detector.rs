//! Trainable blob detector used for every detection stage.
//!
//! A raster is collapsed to one response plane, thresholded, split into
//! 8-connected components, filtered by area and merged by center distance.
//! Training is an exhaustive search over a parameter grid maximizing F1.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compare_dets, match_detections, MatchCounts, MatchMode};
use crate::manifest::{Annotation, DatasetManifest, ManifestEntry, Stage};
use crate::raster::Raster;
use crate::store::RasterStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelReduce {
    /// Rec. 601 luma for 3-channel input; identity for 1 channel.
    Luminance,
    /// First channel only.
    SingleChannel,
    /// Mean of the channels with the third (background) channel inverted.
    StackMean,
    /// Minimum of the channels with the third channel inverted.
    StackMin,
}

impl ChannelReduce {
    pub const ALL: [ChannelReduce; 4] = [
        ChannelReduce::Luminance,
        ChannelReduce::SingleChannel,
        ChannelReduce::StackMean,
        ChannelReduce::StackMin,
    ];

    /// Collapses `input` to a single row-major plane.
    pub fn apply(self, input: &Raster) -> Vec<f32> {
        let n = input.plane_len();
        let ch = input.channels();
        if ch == 1 {
            return input.plane(0).to_vec();
        }
        match self {
            ChannelReduce::SingleChannel => input.plane(0).to_vec(),
            ChannelReduce::Luminance if ch == 3 => {
                let (r, g, b) = (input.plane(0), input.plane(1), input.plane(2));
                (0..n)
                    .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                    .collect()
            }
            ChannelReduce::Luminance => {
                let mut out = vec![0f32; n];
                for c in 0..ch {
                    for (o, v) in out.iter_mut().zip(input.plane(c)) {
                        *o += v / ch as f32;
                    }
                }
                out
            }
            ChannelReduce::StackMean | ChannelReduce::StackMin => {
                let voted = |c: u32, v: f32| if c == 2 { 1.0 - v } else { v };
                let min = self == ChannelReduce::StackMin;
                let mut out = vec![if min { f32::INFINITY } else { 0.0 }; n];
                for c in 0..ch {
                    for (o, &v) in out.iter_mut().zip(input.plane(c)) {
                        let v = voted(c, v);
                        if min {
                            *o = o.min(v);
                        } else {
                            *o += v;
                        }
                    }
                }
                if !min {
                    out.iter_mut().for_each(|o| *o /= ch as f32);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub channel_reduce: ChannelReduce,
    pub bin_threshold: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub merge_radius: f64,
    /// F1 on the training set at fit time.
    pub fitted_f1: f64,
    /// Set when the model was fit on data without a single positive.
    #[serde(default)]
    pub no_positives: bool,
}

impl DetectorModel {
    pub fn new(
        channel_reduce: ChannelReduce,
        bin_threshold: f64,
        min_area: f64,
        max_area: f64,
        merge_radius: f64,
    ) -> Result<Self> {
        let m = DetectorModel {
            channel_reduce,
            bin_threshold,
            min_area,
            max_area,
            merge_radius,
            fitted_f1: 0.0,
            no_positives: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_threshold > 0.0 && self.bin_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "bin_threshold {} outside (0, 1)",
                self.bin_threshold
            )));
        }
        if !(self.min_area > 0.0 && self.min_area <= self.max_area) {
            return Err(Error::invalid(format!(
                "area range [{}, {}] is invalid",
                self.min_area, self.max_area
            )));
        }
        if !(self.merge_radius >= 0.0 && self.merge_radius.is_finite()) {
            return Err(Error::invalid(format!("merge_radius {}", self.merge_radius)));
        }
        Ok(())
    }
}

/// Summary of one connected component above threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub area: usize,
    pub cx: f64,
    pub cy: f64,
    pub peak: f64,
}

/// 8-connected components of `plane >= threshold`, in raster-scan order of
/// their first pixel. Centers are intensity-weighted centroids.
pub fn components(plane: &[f32], width: usize, height: usize, threshold: f64) -> Vec<Component> {
    let thr = threshold as f32;
    let mut seen = vec![false; plane.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..plane.len() {
        if seen[start] || plane[start] < thr {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sw, mut sx, mut sy, mut peak) = (0usize, 0.0f64, 0.0f64, 0.0f64, f64::MIN);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let v = plane[p] as f64;
            area += 1;
            sw += v;
            sx += v * x as f64;
            sy += v * y as f64;
            peak = peak.max(v);
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let q = ny * width + nx;
                    if !seen[q] && plane[q] >= thr {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        // All-zero components only occur at threshold 0.
        let (cx, cy) = if sw > 0.0 {
            (sx / sw, sy / sw)
        } else {
            ((start % width) as f64, (start / width) as f64)
        };
        out.push(Component { area, cx, cy, peak });
    }
    out
}

/// Area filter and greedy radius merge over precomputed components.
pub fn finish_detections(comps: &[Component], min_area: f64, max_area: f64, merge_radius: f64) -> Vec<Annotation> {
    let mut cands: Vec<Annotation> = comps
        .iter()
        .filter(|c| (c.area as f64) >= min_area && (c.area as f64) <= max_area)
        .map(|c| Annotation::with_confidence(c.cx, c.cy, c.peak.clamp(0.0, 1.0)))
        .collect();
    cands.sort_by(compare_dets);
    let mut kept: Vec<Annotation> = Vec::with_capacity(cands.len());
    for c in cands {
        if kept.iter().all(|k| k.distance(&c) >= merge_radius) {
            kept.push(c);
        }
    }
    kept
}

/// Detected centers with confidences, sorted by confidence descending and
/// then `(cy, cx)`.
pub fn detect(m: &DetectorModel, input: &Raster) -> Vec<Annotation> {
    let plane = m.channel_reduce.apply(input);
    let comps = components(&plane, input.width() as usize, input.height() as usize, m.bin_threshold);
    finish_detections(&comps, m.min_area, m.max_area, m.merge_radius)
}

/// Candidate values for each detector parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub reduces: Vec<ChannelReduce>,
    pub thresholds: Vec<f64>,
    pub min_areas: Vec<f64>,
    pub max_areas: Vec<f64>,
    pub merge_radii: Vec<f64>,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| ((lo + k as f64 * step) * 1e6).round() / 1e6).collect()
}

impl SearchGrid {
    /// Grid for RGB image detectors.
    pub fn for_images() -> Self {
        SearchGrid {
            reduces: vec![ChannelReduce::Luminance],
            thresholds: steps(0.30, 0.90, 0.05),
            min_areas: vec![20.0, 40.0, 80.0, 120.0],
            max_areas: vec![400.0, 800.0],
            merge_radii: vec![8.0, 14.0],
        }
    }

    /// Grid for attention-map detectors. Thresholds stay low so component
    /// peaks spread over the whole confidence range.
    pub fn for_maps() -> Self {
        SearchGrid {
            reduces: vec![ChannelReduce::StackMean, ChannelReduce::StackMin],
            thresholds: steps(0.05, 0.25, 0.05),
            min_areas: vec![4.0, 16.0, 36.0, 64.0],
            max_areas: vec![1500.0],
            merge_radii: vec![8.0, 14.0],
        }
    }

    pub fn len(&self) -> usize {
        self.reduces.len()
            * self.thresholds.len()
            * self.min_areas.len()
            * self.max_areas.len()
            * self.merge_radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Valid models in grid order: reduce, threshold, min area, max area,
    /// merge radius.
    pub fn models(&self) -> Vec<DetectorModel> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.reduces {
            for &t in &self.thresholds {
                for &lo in &self.min_areas {
                    for &hi in &self.max_areas {
                        for &mr in &self.merge_radii {
                            if let Ok(m) = DetectorModel::new(r, t, lo, hi, mr) {
                                out.push(m);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Source of training pairs for [`fit_with`].
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, index: usize) -> Result<(Arc<Raster>, Vec<Annotation>)>;
}

impl TrainingSet for [(Raster, Vec<Annotation>)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn get(&self, index: usize) -> Result<(Arc<Raster>, Vec<Annotation>)> {
        let (r, g) = &self[index];
        Ok((Arc::new(r.clone()), g.clone()))
    }
}

/// Manifest entries paired with one of their rasters. Weak-only entries have
/// no instance labels and are excluded.
pub struct ManifestTraining<'a> {
    entries: Vec<&'a ManifestEntry>,
    kind: RasterKind,
    store: &'a dyn RasterStore,
}

impl<'a> ManifestTraining<'a> {
    pub fn new(manifest: &'a DatasetManifest, kind: RasterKind, store: &'a dyn RasterStore) -> Self {
        ManifestTraining {
            entries: manifest.entries.iter().filter(|e| !e.weak_only).collect(),
            kind,
            store,
        }
    }
}

impl TrainingSet for ManifestTraining<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<(Arc<Raster>, Vec<Annotation>)> {
        let e = self.entries[index];
        Ok((self.kind.load(e, self.store)?, e.annotations.clone()))
    }
}

pub fn fit(
    training: &[(Raster, Vec<Annotation>)],
    grid: &SearchGrid,
    match_radius: f64,
) -> Result<DetectorModel> {
    fit_with(training, grid, match_radius)
}

/// Exhaustive grid search for the model with the highest pooled F1 under
/// circle matching; the earliest grid point wins ties.
pub fn fit_with<T: TrainingSet + ?Sized>(
    training: &T,
    grid: &SearchGrid,
    match_radius: f64,
) -> Result<DetectorModel> {
    if training.is_empty() {
        return Err(Error::invalid("detector training set is empty"));
    }
    let labels = std::sync::Mutex::new(vec![Vec::new(); training.len()]);
    let cache = ComponentCache::build(training.len(), grid, |i| {
        let (r, g) = training.get(i)?;
        labels.lock().expect("label lock")[i] = g;
        Ok(r)
    })?;
    let labels = labels.into_inner().expect("label lock");
    let refs: Vec<Option<&[Annotation]>> = labels.iter().map(|g| Some(g.as_slice())).collect();
    cache.fit(grid, &refs, match_radius)
}

/// Connected components of a fixed image list for every (reduce, threshold)
/// pair of a grid. Fitting and detecting with any model of that grid then
/// only needs the cheap area filter and merge.
#[derive(Debug, Clone)]
pub struct ComponentCache {
    reduces: Vec<ChannelReduce>,
    thresholds: Vec<f64>,
    images: Vec<Vec<Vec<Component>>>,
}

impl ComponentCache {
    pub fn build<F>(n: usize, grid: &SearchGrid, load: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<Arc<Raster>> + Sync,
    {
        let images = (0..n)
            .into_par_iter()
            .map(|i| {
                let raster = load(i)?;
                let (w, h) = (raster.width() as usize, raster.height() as usize);
                let mut slots = Vec::with_capacity(grid.reduces.len() * grid.thresholds.len());
                for &r in &grid.reduces {
                    let plane = r.apply(&raster);
                    for &t in &grid.thresholds {
                        slots.push(components(&plane, w, h, t));
                    }
                }
                Ok(slots)
            })
            .collect::<Result<_>>()?;
        Ok(ComponentCache {
            reduces: grid.reduces.clone(),
            thresholds: grid.thresholds.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn slot(&self, m: &DetectorModel) -> Option<usize> {
        let ri = self.reduces.iter().position(|&r| r == m.channel_reduce)?;
        let ti = self.thresholds.iter().position(|&t| t == m.bin_threshold)?;
        Some(ri * self.thresholds.len() + ti)
    }

    /// Same output as [`detect`] on image `i`, or `None` when the model's
    /// reduce/threshold pair was not cached.
    pub fn detect(&self, m: &DetectorModel, i: usize) -> Option<Vec<Annotation>> {
        let s = self.slot(m)?;
        Some(finish_detections(&self.images[i][s], m.min_area, m.max_area, m.merge_radius))
    }

    /// Grid search against per-image labels; `None` entries are left out.
    pub fn fit(
        &self,
        grid: &SearchGrid,
        labels: &[Option<&[Annotation]>],
        match_radius: f64,
    ) -> Result<DetectorModel> {
        if labels.len() != self.images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} label sets for {} cached images",
                labels.len(),
                self.images.len()
            )));
        }
        if labels.iter().all(Option::is_none) {
            return Err(Error::invalid("detector training set is empty"));
        }
        let models = grid.models();
        if models.is_empty() {
            return Err(Error::invalid("detector search grid has no valid point"));
        }
        let mode = MatchMode::circle(match_radius);
        mode.validate()?;
        let slots: Vec<usize> = models
            .iter()
            .map(|m| {
                self.slot(m)
                    .ok_or_else(|| Error::invalid("search grid differs from the cached grid"))
            })
            .collect::<Result<_>>()?;

        let scores: Vec<f64> = models
            .par_iter()
            .zip(&slots)
            .map(|(m, &s)| {
                let mut counts = MatchCounts::default();
                for (comps, gts) in self.images.iter().zip(labels) {
                    if let Some(gts) = gts {
                        let dets = finish_detections(&comps[s], m.min_area, m.max_area, m.merge_radius);
                        counts.add(MatchCounts::from_records(&match_detections(&dets, gts, &mode)));
                    }
                }
                counts.f1()
            })
            .collect();

        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        let mut model = models[best].clone();
        model.fitted_f1 = scores[best];
        if labels.iter().flatten().all(|g| g.is_empty()) {
            log::warn!("detector fit on a training set without positives");
            model.no_positives = true;
        }
        Ok(model)
    }
}

/// Which raster of a manifest entry a detector reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterKind {
    Image,
    Map,
}

impl RasterKind {
    pub fn path(self, e: &ManifestEntry) -> Result<&str> {
        match self {
            RasterKind::Image => Ok(&e.image_path),
            RasterKind::Map => e
                .map_path
                .as_deref()
                .ok_or_else(|| Error::MissingRaster(format!("{} has no attention map", e.image_path))),
        }
    }

    pub fn load(self, e: &ManifestEntry, store: &dyn RasterStore) -> Result<Arc<Raster>> {
        store.load(self.path(e)?)
    }
}

/// Runs `m` over every entry and keeps detections with confidence at least
/// `conf_min`. Entries whose image-level flag is negative get no
/// annotations; flagged entries where nothing survives are marked weak-only.
pub fn pseudo_label(
    m: &DetectorModel,
    manifest: &DatasetManifest,
    kind: RasterKind,
    conf_min: f64,
    store: &dyn RasterStore,
) -> Result<DatasetManifest> {
    m.validate()?;
    let entries = manifest
        .entries
        .par_iter()
        .map(|e| {
            let mut out = e.clone();
            out.stage_tag = Stage::PseudoLabeled;
            if !e.has_vehicles {
                out.set_annotations(Vec::new());
                return Ok(out);
            }
            let raster = kind.load(e, store)?;
            let dets: Vec<Annotation> = detect(m, &raster)
                .into_iter()
                .filter(|a| a.confidence.unwrap_or(1.0) >= conf_min)
                .collect();
            if dets.is_empty() {
                out.annotations.clear();
                out.has_vehicles = true;
                out.weak_only = true;
            } else {
                out.set_annotations(dets);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Domain;
    use crate::store::MemoryStore;
    use proptest::prelude::*;

    fn blobs(w: u32, h: u32, centers: &[(f64, f64, f64)], sigma: f64) -> Raster {
        Raster::from_fn(w, h, 1, |_, y, x| {
            centers
                .iter()
                .map(|&(cx, cy, amp)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .fold(0.0, f64::max) as f32
        })
    }

    fn model(t: f64) -> DetectorModel {
        DetectorModel::new(ChannelReduce::SingleChannel, t, 1.0, 1e6, 10.0).unwrap()
    }

    #[test]
    fn cached_detection_matches_direct_detection() {
        use crate::scenegen::{gen_attention, gen_scene, SceneConfig};
        let rasters: Vec<Arc<Raster>> = (0..4)
            .map(|s| {
                let cfg = SceneConfig::default().with_seed(s);
                let scene = gen_scene(&cfg).unwrap();
                Arc::new(gen_attention(&scene.gts, &cfg).unwrap().stacked())
            })
            .collect();
        let grid = SearchGrid::for_maps();
        let cache = ComponentCache::build(rasters.len(), &grid, |i| Ok(rasters[i].clone())).unwrap();
        for m in grid.models() {
            for (i, r) in rasters.iter().enumerate() {
                assert_eq!(cache.detect(&m, i).unwrap(), detect(&m, r));
            }
        }
        let off_grid = DetectorModel::new(ChannelReduce::StackMean, 0.123, 4.0, 1500.0, 8.0).unwrap();
        assert!(cache.detect(&off_grid, 0).is_none());
    }

    #[test]
    fn flat_map_yields_nothing() {
        assert!(detect(&model(0.6), &Raster::filled(64, 64, 1, 0.5)).is_empty());
    }

    #[test]
    fn gaussian_centroid() {
        let r = blobs(80, 80, &[(30.0, 40.0, 1.0)], 3.0);
        let d = detect(&model(0.5), &r);
        assert_eq!(d.len(), 1);
        assert!((d[0].cx - 30.0).abs() < 1.0 && (d[0].cy - 40.0).abs() < 1.0);
        assert!((d[0].confidence.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separated_blobs_survive_merge() {
        let r = blobs(100, 60, &[(20.0, 30.0, 0.9), (60.0, 30.0, 1.0)], 3.0);
        let d = detect(&model(0.5), &r);
        assert_eq!(d.len(), 2);
        assert!(d[0].confidence > d[1].confidence && (d[0].cx - 60.0).abs() < 1e-6);
    }

    #[test]
    fn close_components_merge() {
        let mut r = Raster::zeros(30, 10, 1);
        r.set(0, 5, 5, 0.9);
        r.set(0, 5, 9, 0.8);
        let m = DetectorModel::new(ChannelReduce::SingleChannel, 0.5, 1.0, 10.0, 5.0).unwrap();
        let d = detect(&m, &r);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].confidence, Some(0.8999999761581421));
    }

    #[test]
    fn area_filter_and_diagonal_connectivity() {
        let mut r = Raster::zeros(10, 10, 1);
        for k in 0..4 {
            r.set(0, k, k, 1.0);
        }
        let comps = components(r.plane(0), 10, 10, 0.5);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area, 4);
        let m = DetectorModel::new(ChannelReduce::SingleChannel, 0.5, 5.0, 10.0, 0.0).unwrap();
        assert!(detect(&m, &r).is_empty());
    }

    #[test]
    fn reductions() {
        let px = |v: [f32; 3]| Raster::new(1, 1, 3, v.to_vec()).unwrap();
        let r = px([0.6, 0.9, 0.3]);
        assert!((ChannelReduce::StackMean.apply(&r)[0] - (0.6 + 0.9 + 0.7) / 3.0).abs() < 1e-6);
        assert!((ChannelReduce::StackMin.apply(&r)[0] - 0.6).abs() < 1e-6);
        assert_eq!(ChannelReduce::SingleChannel.apply(&r)[0], 0.6);
        let lum = 0.299 * 0.6 + 0.587 * 0.9 + 0.114 * 0.3;
        assert!((ChannelReduce::Luminance.apply(&r)[0] - lum).abs() < 1e-6);
        let one = Raster::filled(1, 1, 1, 0.4);
        for red in ChannelReduce::ALL {
            assert_eq!(red.apply(&one)[0], 0.4);
        }
    }

    #[test]
    fn invalid_models() {
        assert!(DetectorModel::new(ChannelReduce::Luminance, 0.0, 1.0, 2.0, 0.0).is_err());
        assert!(DetectorModel::new(ChannelReduce::Luminance, 0.5, 3.0, 2.0, 0.0).is_err());
        assert!(DetectorModel::new(ChannelReduce::Luminance, 0.5, 1.0, 2.0, -1.0).is_err());
    }

    fn separable_set() -> Vec<(Raster, Vec<Annotation>)> {
        // Plateaus of value >= 0.8 on a background of 0.2.
        (0..6)
            .map(|k| {
                let cx = 15.0 + 5.0 * k as f64;
                let cy = 20.0 + 3.0 * k as f64;
                let r = Raster::from_fn(64, 64, 1, |_, y, x| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if d2 <= 9.0 {
                        0.8 + 0.2 * (1.0 - d2 / 9.0) as f32
                    } else {
                        0.2
                    }
                });
                (r, vec![Annotation::new(cx, cy)])
            })
            .collect()
    }

    fn toy_grid() -> SearchGrid {
        SearchGrid {
            reduces: vec![ChannelReduce::SingleChannel],
            thresholds: vec![0.1, 0.15, 0.3, 0.5, 0.7, 0.85],
            min_areas: vec![1.0],
            max_areas: vec![100.0],
            merge_radii: vec![5.0],
        }
    }

    #[test]
    fn fit_separable_case() {
        let data = separable_set();
        let m = fit(&data, &toy_grid(), 12.0).unwrap();
        assert_eq!(m.fitted_f1, 1.0);
        assert_eq!(m.bin_threshold, 0.3);
        assert!(!m.no_positives);
        assert_eq!(fit(&data, &toy_grid(), 12.0).unwrap(), m);
    }

    #[test]
    fn fit_degenerate_inputs() {
        let negatives = vec![(Raster::filled(16, 16, 1, 0.1), vec![]); 3];
        let m = fit(&negatives, &toy_grid(), 12.0).unwrap();
        assert_eq!(m.fitted_f1, 0.0);
        assert!(m.no_positives);
        assert!(fit(&[], &toy_grid(), 12.0).is_err());
        let empty = SearchGrid { thresholds: vec![], ..toy_grid() };
        assert!(fit(&separable_set(), &empty, 12.0).is_err());
    }

    fn entry(path: &str, map: &str, has: bool) -> ManifestEntry {
        ManifestEntry {
            image_path: path.into(),
            map_path: Some(map.into()),
            width: 64,
            height: 64,
            gsd_cm_per_px: 12.5,
            has_vehicles: has,
            annotations: vec![],
            domain_tag: Domain::Target,
            stage_tag: Stage::Synthetic,
            weak_only: has,
        }
    }

    #[test]
    fn pseudo_labels_respect_weak_flags() {
        let store = MemoryStore::new();
        let img = blobs(64, 64, &[(20.0, 20.0, 0.9), (45.0, 40.0, 0.55)], 3.0);
        store.save("a.map", &img).unwrap();
        store.save("b.map", &img).unwrap();
        let man = DatasetManifest::new(vec![entry("a.img", "a.map", true), entry("b.img", "b.map", false)]).unwrap();
        let m = model(0.5);

        let all = pseudo_label(&m, &man, RasterKind::Map, 0.0, &store).unwrap();
        assert_eq!(all.entries[0].annotations.len(), 2);
        assert!(!all.entries[0].weak_only && all.entries[0].stage_tag == Stage::PseudoLabeled);
        assert!(all.entries[1].annotations.is_empty() && !all.entries[1].has_vehicles);

        let some = pseudo_label(&m, &man, RasterKind::Map, 0.6, &store).unwrap();
        assert_eq!(some.entries[0].annotations.len(), 1);

        let none = pseudo_label(&m, &man, RasterKind::Map, 1.0 + 1e-9, &store).unwrap();
        assert_eq!(none.annotation_count(), 0);
        assert!(none.entries[0].weak_only && none.entries[0].has_vehicles);

        assert!(pseudo_label(&m, &man, RasterKind::Image, 0.0, &store).is_err());
    }

    proptest! {
        #[test]
        fn detect_is_canonical(
            pts in prop::collection::vec((2u32..46, 2u32..46, 0.3f32..1.0), 0..12),
        ) {
            let mut r = Raster::zeros(48, 48, 1);
            for &(x, y, v) in &pts {
                r.set(0, y, x, v);
            }
            let m = DetectorModel::new(ChannelReduce::SingleChannel, 0.25, 1.0, 50.0, 3.0).unwrap();
            let d = detect(&m, &r);
            for w in d.windows(2) {
                prop_assert!(compare_dets(&w[0], &w[1]) != std::cmp::Ordering::Greater);
            }
            for a in &d {
                let c = a.confidence.unwrap();
                prop_assert!((0.0..=1.0).contains(&c));
            }
            // Component discovery order does not leak into the output.
            let mut comps = components(r.plane(0), 48, 48, 0.25);
            comps.reverse();
            prop_assert_eq!(finish_detections(&comps, 1.0, 50.0, 3.0), d);
        }
    }
}

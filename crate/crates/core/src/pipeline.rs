//! End-to-end orchestration of the three-stage labeling pipeline.
//!
//! 1. A source image detector F^S, fit on labeled source imagery, labels the
//!    synthetic source images.
//! 2. A map detector F^A, fit on the synthetic source attention maps against
//!    those labels, labels the synthetic target maps.
//! 3. The target labels are refined (or threshold-filtered), a target image
//!    detector F^T is fit on the synthetic target images and evaluated on
//!    held-out target imagery.
//!
//! Target imagery only contributes image-level flags until the final
//! evaluation; every read of hidden ground truth goes through [`GtAudit`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::detector::{fit_with, pseudo_label, ComponentCache, DetectorModel, ManifestTraining, RasterKind, SearchGrid};
use crate::error::{Error, Result};
use crate::eval::{best_f1, evaluate_manifests, pr_curve_svg, EvalReport, MatchMode};
use crate::manifest::{save_manifest, Annotation, DatasetManifest, Stage};
use crate::raster::Raster;
use crate::refine::{refine_manifest, threshold_manifest, RefineConfig};
use crate::scenegen::{derive_seed, write_corpus, Corpus, ProceduralStore, SceneConfig, Style};
use crate::store::{DiskStore, RasterStore};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Which attention channels the map detector sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapChannels {
    /// The category map alone.
    Single,
    /// Category, foreground and background maps.
    Stacked,
}

impl MapChannels {
    pub fn name(self) -> &'static str {
        match self {
            MapChannels::Single => "base",
            MapChannels::Stacked => "stack",
        }
    }

    pub fn apply(self, stacked: &Raster) -> Raster {
        match self {
            MapChannels::Stacked => stacked.clone(),
            MapChannels::Single => stacked.channel(0),
        }
    }
}

/// How map-detector labels are cleaned before training F^T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelFilter {
    Refine,
    Fixed { threshold: f64 },
}

impl LabelFilter {
    pub fn name(&self) -> String {
        match self {
            LabelFilter::Refine => "refined".into(),
            LabelFilter::Fixed { threshold } => format!("fixed-{threshold:.1}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub pos_fraction: f64,
}

impl CorpusSpec {
    pub fn new(n_images: usize, pos_fraction: f64) -> Self {
        CorpusSpec { n_images, pos_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub source_scene: SceneConfig,
    pub target_scene: SceneConfig,
    /// Labeled source imagery.
    pub source_real: CorpusSpec,
    /// Generated source images and maps.
    pub source_synth: CorpusSpec,
    /// Generated target images and maps; only image-level flags are used.
    pub target_synth: CorpusSpec,
    /// Held-out target imagery for the final evaluation.
    pub target_eval: CorpusSpec,
    pub image_grid: SearchGrid,
    pub map_grid: SearchGrid,
    /// Confidence floor when F^S labels synthetic source images.
    pub source_conf_min: f64,
    /// Confidence floor when F^A labels synthetic target maps.
    pub map_conf_min: f64,
    pub map_channels: MapChannels,
    pub label_filter: LabelFilter,
    pub refine: RefineConfig,
    /// When set, the refinement thresholds are placed this far either side
    /// of F^A's F1-optimal confidence on its own training data.
    pub auto_lambda_margin: Option<f64>,
    pub match_radius: f64,
    pub eval_mode: MatchMode,
    /// Fixed thresholds compared against refinement in ablation mode.
    pub ablation_thresholds: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    /// Also write every corpus raster under `output_dir/data`.
    pub write_rasters: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            source_scene: SceneConfig::default().with_style(Style::Source),
            target_scene: SceneConfig::default().with_style(Style::Target),
            source_real: CorpusSpec::new(2000, 0.75),
            source_synth: CorpusSpec::new(2000, 0.75),
            target_synth: CorpusSpec::new(2000, 0.75),
            target_eval: CorpusSpec::new(500, 0.75),
            image_grid: SearchGrid::for_images(),
            map_grid: SearchGrid::for_maps(),
            source_conf_min: 0.0,
            map_conf_min: 0.0,
            map_channels: MapChannels::Stacked,
            label_filter: LabelFilter::Refine,
            refine: RefineConfig::default(),
            auto_lambda_margin: None,
            match_radius: 12.0,
            eval_mode: MatchMode::Circle { radius: 12.0 },
            ablation_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            output_dir: None,
            write_rasters: false,
        }
    }
}

impl PipelineConfig {
    /// Same experiment with every corpus shrunk to `n` images (the held-out
    /// set to `n / 4`, at least 1).
    pub fn scaled(mut self, n: usize) -> Self {
        self.source_real.n_images = n;
        self.source_synth.n_images = n;
        self.target_synth.n_images = n;
        self.target_eval.n_images = (n / 4).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in self.corpora_specs() {
            if c.n_images == 0 {
                return Err(Error::invalid(format!("{name} corpus is empty")));
            }
            if !(0.0..=1.0).contains(&c.pos_fraction) {
                return Err(Error::invalid(format!("{name} pos_fraction {}", c.pos_fraction)));
            }
        }
        self.source_scene.validate()?;
        self.target_scene.validate()?;
        if self.image_grid.models().is_empty() || self.map_grid.models().is_empty() {
            return Err(Error::invalid("detector search grids need at least one valid point"));
        }
        for v in [self.source_conf_min, self.map_conf_min] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("confidence floor {v} outside [0, 1]")));
            }
        }
        self.refine.validate()?;
        if let LabelFilter::Fixed { threshold } = self.label_filter {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::invalid(format!("label threshold {threshold}")));
            }
        }
        if let Some(m) = self.auto_lambda_margin {
            if !(m > 0.0 && m < 0.5) {
                return Err(Error::invalid(format!("auto lambda margin {m} outside (0, 0.5)")));
            }
        }
        if !(self.match_radius > 0.0) {
            return Err(Error::invalid("match radius must be positive"));
        }
        self.eval_mode.validate()
    }

    fn corpora_specs(&self) -> [(&'static str, CorpusSpec); 4] {
        [
            (SOURCE_REAL, self.source_real),
            (SOURCE_SYNTH, self.source_synth),
            (TARGET_SYNTH, self.target_synth),
            (TARGET_EVAL, self.target_eval),
        ]
    }
}

pub const SOURCE_REAL: &str = "source-real";
pub const SOURCE_SYNTH: &str = "source-synth";
pub const TARGET_SYNTH: &str = "target-synth";
pub const TARGET_EVAL: &str = "target-eval";

/// One read of annotations the pipeline is not supposed to train on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtAccess {
    pub stage: String,
    pub corpus: String,
}

/// Stages allowed to read hidden ground truth.
pub const GT_READERS: [&str; 3] = ["final-eval", "oracle-baseline", "diagnostic"];

/// Log of hidden ground-truth reads.
#[derive(Debug, Default)]
pub struct GtAudit {
    log: Mutex<Vec<GtAccess>>,
}

impl GtAudit {
    pub fn record(&self, stage: &str, corpus: &str) {
        self.log.lock().expect("audit lock").push(GtAccess {
            stage: stage.into(),
            corpus: corpus.into(),
        });
    }

    pub fn entries(&self) -> Vec<GtAccess> {
        self.log.lock().expect("audit lock").clone()
    }

    /// Accesses by stages outside [`GT_READERS`].
    pub fn violations(&self) -> Vec<GtAccess> {
        self.entries()
            .into_iter()
            .filter(|a| !GT_READERS.contains(&a.stage.as_str()))
            .collect()
    }
}

/// Loads maps through a channel selection.
pub struct MapView<'a> {
    pub inner: &'a dyn RasterStore,
    pub channels: MapChannels,
}

impl RasterStore for MapView<'_> {
    fn load(&self, path: &str) -> Result<Arc<Raster>> {
        let r = self.inner.load(path)?;
        Ok(match self.channels {
            MapChannels::Stacked => r,
            c => Arc::new(c.apply(&r)),
        })
    }

    fn save(&self, path: &str, raster: &Raster) -> Result<()> {
        self.inner.save(path, raster)
    }
}

/// Generated corpora plus controlled access to their annotations.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub store: Box<dyn RasterStore>,
    source_real: DatasetManifest,
    hidden: [(String, DatasetManifest); 3],
    pub audit: GtAudit,
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage,
        source: Box::new(e),
    }
}

impl Workspace {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = |k: u64, prefix: &str, scene: &SceneConfig, spec: CorpusSpec, maps: bool, stage: Stage| {
            let template = scene.clone().with_seed(derive_seed(cfg.seed, k));
            Corpus::new(prefix, template, spec.n_images, spec.pos_fraction)
                .map(|c| c.with_maps(maps).with_stage(stage))
        };
        let corpora = [
            corpus(1, SOURCE_REAL, &cfg.source_scene, cfg.source_real, false, Stage::Real)?,
            corpus(2, SOURCE_SYNTH, &cfg.source_scene, cfg.source_synth, true, Stage::Synthetic)?,
            corpus(3, TARGET_SYNTH, &cfg.target_scene, cfg.target_synth, true, Stage::Synthetic)?,
            corpus(4, TARGET_EVAL, &cfg.target_scene, cfg.target_eval, false, Stage::Real)?,
        ];
        let (store, manifests): (Box<dyn RasterStore>, Vec<DatasetManifest>) =
            match (&cfg.output_dir, cfg.write_rasters) {
                (Some(dir), true) => {
                    let disk = DiskStore::new(dir.join("data"));
                    let m = corpora.iter().map(|c| write_corpus(c, &disk)).collect::<Result<_>>()?;
                    (Box::new(disk), m)
                }
                _ => {
                    let m = corpora.iter().map(Corpus::manifest).collect::<Result<_>>()?;
                    let mut store = ProceduralStore::new();
                    for c in corpora {
                        store.add(c);
                    }
                    (Box::new(store), m)
                }
            };
        let mut it = manifests.into_iter();
        let source_real = it.next().unwrap();
        let hidden = [
            (SOURCE_SYNTH.to_string(), it.next().unwrap()),
            (TARGET_SYNTH.to_string(), it.next().unwrap()),
            (TARGET_EVAL.to_string(), it.next().unwrap()),
        ];
        Ok(Workspace {
            cfg,
            store,
            source_real,
            hidden,
            audit: GtAudit::default(),
        })
    }

    pub fn source_real(&self) -> &DatasetManifest {
        &self.source_real
    }

    fn hidden(&self, corpus: &str) -> Result<&DatasetManifest> {
        self.hidden
            .iter()
            .find(|(n, _)| n == corpus)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("unknown corpus {corpus}")))
    }

    /// Image-level flags only.
    pub fn weak(&self, corpus: &str) -> Result<DatasetManifest> {
        let m = self.hidden(corpus)?;
        Ok(DatasetManifest {
            entries: m.entries.iter().map(|e| e.to_weak()).collect(),
        })
    }

    /// Instance annotations of a generated or held-out corpus; logged.
    pub fn ground_truth(&self, corpus: &str, stage: &str) -> Result<DatasetManifest> {
        let m = self.hidden(corpus)?.clone();
        self.audit.record(stage, corpus);
        Ok(m)
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.cfg.output_dir.as_ref().map(|d| d.join(name))
    }

    fn persist_manifest(&self, name: &str, m: &DatasetManifest) -> Result<()> {
        if let Some(p) = self.out_path(name) {
            ensure_dir(p.parent().unwrap())?;
            save_manifest(m, p)?;
        }
        Ok(())
    }

    fn persist_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        if let Some(p) = self.out_path(name) {
            write_json(&p, v)?;
        }
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub entries: usize,
    pub annotations: usize,
    pub weak_only: usize,
}

impl LabelStats {
    fn of(m: &DatasetManifest) -> Self {
        LabelStats {
            entries: m.len(),
            annotations: m.annotation_count(),
            weak_only: m.entries.iter().filter(|e| e.weak_only).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneReport {
    pub model: DetectorModel,
    pub labels: LabelStats,
}

/// Fits F^S on labeled source imagery and labels the synthetic source images.
pub fn run_stage_source_detector(ws: &Workspace) -> Result<(DetectorModel, DatasetManifest)> {
    let run = || -> Result<_> {
        let cfg = &ws.cfg;
        let train = ManifestTraining::new(ws.source_real(), RasterKind::Image, ws.store.as_ref());
        let f_s = fit_with(&train, &cfg.image_grid, cfg.match_radius)?;
        log::info!("F^S fit: {:?} (train F1 {:.3})", f_s.channel_reduce, f_s.fitted_f1);
        let y_gs = pseudo_label(&f_s, &ws.weak(SOURCE_SYNTH)?, RasterKind::Image, cfg.source_conf_min, ws.store.as_ref())?;
        ws.persist_json("models/f_s.json", &f_s)?;
        ws.persist_manifest("manifests/y_gs.jsonl", &y_gs)?;
        Ok((f_s, y_gs))
    };
    run().map_err(stage_err("source-detector"))
}

#[derive(Debug, Clone)]
pub struct MapStageOutput {
    pub model: DetectorModel,
    pub labels: DatasetManifest,
    /// F^A's F1-optimal confidence on its own training data.
    pub optimal_threshold: Option<f64>,
}

/// Fits F^A on synthetic source maps against `y_gs` and labels the synthetic
/// target maps.
pub fn run_stage_map_detector(ws: &Workspace, y_gs: &DatasetManifest) -> Result<MapStageOutput> {
    run_map_stage(ws, y_gs, ws.cfg.map_channels).map_err(stage_err("map-detector"))
}

fn run_map_stage(ws: &Workspace, y_gs: &DatasetManifest, channels: MapChannels) -> Result<MapStageOutput> {
    let cfg = &ws.cfg;
    let view = MapView {
        inner: ws.store.as_ref(),
        channels,
    };
    let cache = ComponentCache::build(y_gs.len(), &cfg.map_grid, |i| RasterKind::Map.load(&y_gs.entries[i], &view))?;
    let labels: Vec<Option<&[Annotation]>> = y_gs
        .entries
        .iter()
        .map(|e| (!e.weak_only).then_some(e.annotations.as_slice()))
        .collect();
    let f_a = cache.fit(&cfg.map_grid, &labels, cfg.match_radius)?;
    log::info!(
        "F^A ({}) fit: {:?} t={} (train F1 {:.3})",
        channels.name(),
        f_a.channel_reduce,
        f_a.bin_threshold,
        f_a.fitted_f1
    );

    let mut pooled = crate::eval::PooledCurve::default();
    for (i, gts) in labels.iter().enumerate() {
        if let Some(gts) = gts {
            let dets = cache.detect(&f_a, i).expect("model comes from the cached grid");
            pooled.add(&dets, gts, &MatchMode::circle(cfg.match_radius));
        }
    }
    let optimal_threshold = best_f1(&pooled.curve()).map(|b| b.threshold);

    let y_gt = pseudo_label(&f_a, &ws.weak(TARGET_SYNTH)?, RasterKind::Map, cfg.map_conf_min, &view)?;
    Ok(MapStageOutput {
        model: f_a,
        labels: y_gt,
        optimal_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub filter: LabelFilter,
    pub lambda_high: Option<f64>,
    pub lambda_low: Option<f64>,
    pub n_positive: usize,
    pub n_uncertain: usize,
    pub n_negative: usize,
    pub n_background: usize,
    pub n_kept: usize,
    pub fallback: bool,
    pub labels: LabelStats,
}

/// Applies the label filter to F^A's target labels.
pub fn filter_labels(
    ws: &Workspace,
    y_gt: &DatasetManifest,
    filter: LabelFilter,
    optimal_threshold: Option<f64>,
) -> Result<(DatasetManifest, FilterReport)> {
    match filter {
        LabelFilter::Fixed { threshold } => {
            let m = threshold_manifest(y_gt, threshold);
            let report = FilterReport {
                filter,
                lambda_high: None,
                lambda_low: None,
                n_positive: 0,
                n_uncertain: 0,
                n_negative: 0,
                n_background: 0,
                n_kept: 0,
                fallback: false,
                labels: LabelStats::of(&m),
            };
            Ok((m, report))
        }
        LabelFilter::Refine => {
            let mut rc = ws.cfg.refine.clone();
            if let (Some(margin), Some(t)) = (ws.cfg.auto_lambda_margin, optimal_threshold) {
                rc = rc.with_auto_lambdas(t, margin)?;
            }
            let out = refine_manifest(y_gt, ws.store.as_ref(), &rc)?;
            let report = FilterReport {
                filter,
                lambda_high: Some(rc.lambda_high),
                lambda_low: Some(rc.lambda_low),
                n_positive: out.n_positive,
                n_uncertain: out.n_uncertain,
                n_negative: out.n_negative,
                n_background: out.n_background,
                n_kept: out.n_kept,
                fallback: out.fallback,
                labels: LabelStats::of(&out.manifest),
            };
            Ok((out.manifest, report))
        }
    }
}

/// Component caches for the final stage: synthetic target images (training)
/// and held-out target images (evaluation), both over the image grid.
pub struct FinalCaches {
    train_entries: DatasetManifest,
    train: ComponentCache,
    eval_entries: DatasetManifest,
    eval: ComponentCache,
}

impl FinalCaches {
    pub fn build(ws: &Workspace) -> Result<Self> {
        let grid = &ws.cfg.image_grid;
        let store = ws.store.as_ref();
        let train_entries = ws.weak(TARGET_SYNTH)?;
        let train = ComponentCache::build(train_entries.len(), grid, |i| store.load(&train_entries.entries[i].image_path))?;
        let eval_entries = ws.weak(TARGET_EVAL)?;
        let eval = ComponentCache::build(eval_entries.len(), grid, |i| store.load(&eval_entries.entries[i].image_path))?;
        Ok(FinalCaches {
            train_entries,
            train,
            eval_entries,
            eval,
        })
    }

    /// Fits an image detector on the synthetic target images with `labels`
    /// (entry paths must match the synthetic target corpus).
    pub fn fit(&self, ws: &Workspace, labels: &DatasetManifest) -> Result<DetectorModel> {
        if labels.len() != self.train_entries.len()
            || labels
                .entries
                .iter()
                .zip(&self.train_entries.entries)
                .any(|(a, b)| a.image_path != b.image_path)
        {
            return Err(Error::invalid("labels do not cover the synthetic target corpus"));
        }
        let l: Vec<Option<&[Annotation]>> = labels
            .entries
            .iter()
            .map(|e| (!e.weak_only).then_some(e.annotations.as_slice()))
            .collect();
        self.train.fit(&ws.cfg.image_grid, &l, ws.cfg.match_radius)
    }

    /// Predictions of `model` on the held-out target images. Models outside
    /// the image grid fall back to direct detection.
    pub fn predict(&self, ws: &Workspace, model: &DetectorModel) -> Result<DatasetManifest> {
        let mut entries = Vec::with_capacity(self.eval_entries.len());
        for (i, e) in self.eval_entries.entries.iter().enumerate() {
            let dets = match self.eval.detect(model, i) {
                Some(d) => d,
                None => crate::detector::detect(model, &*ws.store.load(&e.image_path)?),
            };
            let mut out = e.clone();
            out.stage_tag = Stage::PseudoLabeled;
            out.set_annotations(dets);
            entries.push(out);
        }
        Ok(DatasetManifest { entries })
    }

    pub fn evaluate(&self, ws: &Workspace, model: &DetectorModel, stage: &str) -> Result<(DatasetManifest, EvalReport)> {
        let pred = self.predict(ws, model)?;
        let gt = ws.ground_truth(TARGET_EVAL, stage)?;
        let report = evaluate_manifests(&pred, &gt, &ws.cfg.eval_mode)?;
        Ok((pred, report))
    }
}

#[derive(Debug, Clone)]
pub struct FinalOutput {
    pub model: DetectorModel,
    pub labels: DatasetManifest,
    pub filter: FilterReport,
    pub predictions: DatasetManifest,
    pub report: EvalReport,
}

/// Filters `y_gt`, fits F^T on the synthetic target images and evaluates it
/// on the held-out target images.
pub fn run_stage_final(ws: &Workspace, y_gt: &DatasetManifest, optimal_threshold: Option<f64>) -> Result<FinalOutput> {
    let run = || -> Result<_> {
        let caches = FinalCaches::build(ws)?;
        final_with(ws, &caches, y_gt, ws.cfg.label_filter, optimal_threshold)
    };
    run().map_err(stage_err("final"))
}

fn final_with(
    ws: &Workspace,
    caches: &FinalCaches,
    y_gt: &DatasetManifest,
    filter: LabelFilter,
    optimal_threshold: Option<f64>,
) -> Result<FinalOutput> {
    let (labels, filter_report) = filter_labels(ws, y_gt, filter, optimal_threshold)?;
    let model = caches.fit(ws, &labels)?;
    let (predictions, report) = caches.evaluate(ws, &model, "final-eval")?;
    Ok(FinalOutput {
        model,
        labels,
        filter: filter_report,
        predictions,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ap50: f64,
    pub best_f1: f64,
    pub best_threshold: f64,
}

impl From<&EvalReport> for Score {
    fn from(r: &EvalReport) -> Self {
        Score {
            ap50: r.ap50,
            best_f1: r.best_f1,
            best_threshold: r.best_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub model: DetectorModel,
    pub train_f1: f64,
    pub labels: LabelStats,
    /// Quality of the produced labels against the hidden annotations.
    pub label_precision: f64,
    pub label_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub model: DetectorModel,
    pub train_f1: f64,
    pub filter: FilterReport,
    pub target: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub maps: String,
    pub labels: String,
    pub ap50: f64,
    pub best_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub map_channels: MapChannels,
    pub label_filter: LabelFilter,
    pub source_detector: DetectorSummary,
    pub map_detector: DetectorSummary,
    pub final_detector: FinalSummary,
    pub source_only: Score,
    pub oracle: Score,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
    pub gt_access: Vec<GtAccess>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub final_ap50: f64,
    pub source_only_ap50: f64,
    pub oracle_ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub mean: MeanScores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation_mean: Vec<AblationRow>,
}

fn label_quality(ws: &Workspace, labels: &DatasetManifest, corpus: &str) -> Result<(f64, f64)> {
    let gt = ws.ground_truth(corpus, "diagnostic")?;
    let mut counts = crate::eval::MatchCounts::default();
    let mode = MatchMode::circle(ws.cfg.match_radius);
    for (l, g) in labels.entries.iter().zip(&gt.entries) {
        if l.weak_only {
            counts.fn_ += g.annotations.len();
            continue;
        }
        counts.add(crate::eval::MatchCounts::from_records(&crate::eval::match_detections(
            &l.annotations,
            &g.annotations,
            &mode,
        )));
    }
    Ok((counts.precision(), counts.recall()))
}

/// Runs every stage once for `cfg.seed`; with `ablate`, also every
/// combination of map channels and label filters.
pub fn run_all(cfg: &PipelineConfig, ablate: bool) -> Result<RunSummary> {
    let ws = Workspace::new(cfg.clone())?;
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("config.json"), cfg)?;
        ws.persist_manifest("manifests/source_real.jsonl", ws.source_real())?;
        for c in [SOURCE_SYNTH, TARGET_SYNTH, TARGET_EVAL] {
            ws.persist_manifest(&format!("manifests/{c}.weak.jsonl"), &ws.weak(c)?)?;
        }
    }

    let (f_s, y_gs) = run_stage_source_detector(&ws)?;
    let (p, r) = label_quality(&ws, &y_gs, SOURCE_SYNTH)?;
    let source_detector = DetectorSummary {
        train_f1: f_s.fitted_f1,
        model: f_s.clone(),
        labels: LabelStats::of(&y_gs),
        label_precision: p,
        label_recall: r,
    };

    let channel_set: Vec<MapChannels> = if ablate {
        vec![MapChannels::Single, MapChannels::Stacked]
    } else {
        vec![cfg.map_channels]
    };
    let mut map_outputs = Vec::new();
    for &ch in &channel_set {
        let out = run_map_stage(&ws, &y_gs, ch).map_err(stage_err("map-detector"))?;
        map_outputs.push((ch, out));
    }
    let (_, main_map) = map_outputs
        .iter()
        .find(|(c, _)| *c == cfg.map_channels)
        .expect("configured channels are always run");
    ws.persist_json("models/f_a.json", &main_map.model)?;
    ws.persist_manifest("manifests/y_gt.jsonl", &main_map.labels)?;
    let (p, r) = label_quality(&ws, &main_map.labels, TARGET_SYNTH)?;
    let map_detector = DetectorSummary {
        model: main_map.model.clone(),
        train_f1: main_map.model.fitted_f1,
        labels: LabelStats::of(&main_map.labels),
        label_precision: p,
        label_recall: r,
    };

    let caches = FinalCaches::build(&ws).map_err(stage_err("final"))?;
    let fin = final_with(&ws, &caches, &main_map.labels, cfg.label_filter, main_map.optimal_threshold)
        .map_err(stage_err("final"))?;
    ws.persist_manifest("manifests/y_gt_filtered.jsonl", &fin.labels)?;
    ws.persist_json("models/f_t.json", &fin.model)?;
    ws.persist_manifest("manifests/target_eval_pred.jsonl", &fin.predictions)?;
    ws.persist_json("reports/final_eval.json", &fin.report)?;
    if let Some(p) = ws.out_path("reports/pr_curve.svg") {
        fs::write(&p, pr_curve_svg(&fin.report)).map_err(|e| Error::Io { path: p, source: e })?;
    }

    let baselines = || -> Result<(Score, Score)> {
        let (_, src) = caches.evaluate(&ws, &f_s, "final-eval")?;
        let oracle_labels = ws.ground_truth(TARGET_SYNTH, "oracle-baseline")?;
        let oracle = caches.fit(&ws, &oracle_labels)?;
        let (_, orc) = caches.evaluate(&ws, &oracle, "final-eval")?;
        Ok(((&src).into(), (&orc).into()))
    };
    let (source_only, oracle) = baselines().map_err(stage_err("baselines"))?;

    let mut ablation = Vec::new();
    if ablate {
        let mut filters = vec![LabelFilter::Refine];
        filters.extend(cfg.ablation_thresholds.iter().map(|&t| LabelFilter::Fixed { threshold: t }));
        for (ch, out) in &map_outputs {
            for &f in &filters {
                let res = final_with(&ws, &caches, &out.labels, f, out.optimal_threshold).map_err(stage_err("ablation"))?;
                ablation.push(AblationRow {
                    maps: ch.name().into(),
                    labels: f.name(),
                    ap50: res.report.ap50,
                    best_f1: res.report.best_f1,
                });
            }
        }
    }

    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        seed: cfg.seed,
        map_channels: cfg.map_channels,
        label_filter: cfg.label_filter,
        source_detector,
        map_detector,
        final_detector: FinalSummary {
            train_f1: fin.model.fitted_f1,
            model: fin.model,
            filter: fin.filter,
            target: (&fin.report).into(),
        },
        source_only,
        oracle,
        ablation,
        gt_access: ws.audit.entries(),
    };
    let violations = ws.audit.violations();
    if !violations.is_empty() {
        return Err(Error::invalid(format!("hidden annotations read by {violations:?}")));
    }
    ws.persist_json("summary.json", &summary)?;
    Ok(summary)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs `n_seeds` consecutive seeds starting at `cfg.seed` and averages.
/// Per-seed artifacts go to `output_dir/seed-<seed>`.
pub fn run_batch(cfg: &PipelineConfig, n_seeds: usize, ablate: bool) -> Result<BatchSummary> {
    if n_seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut runs = Vec::with_capacity(n_seeds);
    for &s in &seeds {
        let mut c = cfg.clone();
        c.seed = s;
        if n_seeds > 1 {
            c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("seed-{s}")));
        }
        log::info!("pipeline seed {s}");
        runs.push(run_all(&c, ablate)?);
    }
    let mean_scores = MeanScores {
        final_ap50: mean(runs.iter().map(|r| r.final_detector.target.ap50)),
        source_only_ap50: mean(runs.iter().map(|r| r.source_only.ap50)),
        oracle_ap50: mean(runs.iter().map(|r| r.oracle.ap50)),
    };
    let ablation_mean = runs[0]
        .ablation
        .iter()
        .enumerate()
        .map(|(i, row)| AblationRow {
            maps: row.maps.clone(),
            labels: row.labels.clone(),
            ap50: mean(runs.iter().map(|r| r.ablation[i].ap50)),
            best_f1: mean(runs.iter().map(|r| r.ablation[i].best_f1)),
        })
        .collect();
    let batch = BatchSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        seeds,
        runs,
        mean: mean_scores,
        ablation_mean,
    };
    if n_seeds > 1 {
        if let Some(dir) = &cfg.output_dir {
            write_json(&dir.join("batch_summary.json"), &batch)?;
        }
    }
    Ok(batch)
}

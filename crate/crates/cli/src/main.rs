use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use attnlabel::attn::{bg_loss, obj_loss, reg_loss, to_distribution, tv_distance, AttentionStack};
use attnlabel::detector::{fit_with, pseudo_label, ChannelReduce, DetectorModel, ManifestTraining, RasterKind, SearchGrid};
use attnlabel::eval::{evaluate_manifests, pr_curve_svg, MatchMode};
use attnlabel::geometry::{isocontour_area_quadrant, region_disagreement, solve_box_size};
use attnlabel::manifest::{load_manifest, save_manifest};
use attnlabel::pipeline::{run_batch, PipelineConfig};
use attnlabel::raster::{export_preview, read_raster};
use attnlabel::refine::{refine_manifest, RefineConfig};
use attnlabel::sampler::{build_split, SplitConfig, Tile, DEFAULT_WINDOW};
use attnlabel::scenegen::{gen_dataset, SceneConfig, Style, DEFAULT_GSD_CM};
use attnlabel::store::DiskStore;
use attnlabel::{Annotation, Domain};

/// Attention-map pseudo-labeling for aerial vehicle detection.
#[derive(Parser)]
#[command(name = "attnlabel", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pseudo-box geometry for a decision radius.
    Geom(GeomArgs),
    /// Distances and losses between attention rasters.
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Generate a procedural corpus.
    Scenegen(ScenegenArgs),
    /// Cut rotated windows out of a labeled tile.
    Sample(SampleArgs),
    /// Pseudo-label a manifest with a fitted detector.
    Detect(DetectArgs),
    /// Grid-search a detector against a labeled manifest.
    Fit(FitArgs),
    /// Filter pseudo-labels with the patch classifier.
    Refine(RefineArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// End-to-end experiment.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Write an 8-bit PNG preview of a raster.
    Preview(PreviewArgs),
}

#[derive(Args)]
struct GeomArgs {
    #[arg(long, default_value_t = 12.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Subcommand)]
enum AttnCmd {
    /// Total-variation distance between two maps treated as distributions.
    Tv {
        a: PathBuf,
        b: PathBuf,
        /// Channel to compare when the inputs are stacks.
        #[arg(long)]
        channel: Option<u32>,
    },
    /// Regularization loss of a 3-channel stack.
    Reg { stack: PathBuf },
    /// Foreground-token loss against the category map.
    Obj { foreground: PathBuf, category: PathBuf },
    /// Background-token loss against the category map.
    Bg { background: PathBuf, category: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Source,
    Target,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Source => Style::Source,
            StyleArg::Target => Style::Target,
        }
    }
}

#[derive(Args)]
struct ScenegenArgs {
    #[arg(long, value_enum, default_value = "source")]
    style: StyleArg,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.75)]
    pos_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; rasters go under it and `manifest.jsonl` at its root.
    #[arg(long)]
    out: PathBuf,
    /// Scene parameters as JSON; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Images only, no attention stacks.
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Tile raster.
    #[arg(long)]
    tile: PathBuf,
    /// JSON array of `{"cx": .., "cy": ..}` vehicle centers in tile pixels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: u32,
    #[arg(long, default_value_t = DEFAULT_GSD_CM)]
    gsd_in: f64,
    #[arg(long, default_value_t = DEFAULT_GSD_CM)]
    gsd_out: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "source")]
    domain: StyleArg,
    /// Output directory; windows and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnArg {
    Image,
    Map,
}

impl From<OnArg> for RasterKind {
    fn from(o: OnArg) -> Self {
        match o {
            OnArg::Image => RasterKind::Image,
            OnArg::Map => RasterKind::Map,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Detector model JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "image")]
    on: OnArg,
    #[arg(long, default_value_t = 0.0)]
    conf_min: f64,
    /// Directory manifest paths are relative to (default: the manifest's).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Output manifest (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Luminance,
    SingleChannel,
    StackMean,
    StackMin,
}

impl From<ReduceArg> for ChannelReduce {
    fn from(r: ReduceArg) -> Self {
        match r {
            ReduceArg::Luminance => ChannelReduce::Luminance,
            ReduceArg::SingleChannel => ChannelReduce::SingleChannel,
            ReduceArg::StackMean => ChannelReduce::StackMean,
            ReduceArg::StackMin => ChannelReduce::StackMin,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Manifest with ground-truth annotations.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "image")]
    on: OnArg,
    #[arg(long, default_value_t = 12.0)]
    match_radius: f64,
    /// Full grid as JSON; the bound flags below override its fields.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    reduce: Vec<ReduceArg>,
    #[arg(long)]
    threshold_min: Option<f64>,
    #[arg(long)]
    threshold_max: Option<f64>,
    #[arg(long)]
    threshold_step: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    min_area: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    max_area: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    merge_radius: Vec<f64>,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Output model JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    /// Pseudo-labeled manifest with confidences.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the image paths are relative to (default: the manifest's).
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    lambda_high: f64,
    #[arg(long, default_value_t = 0.3)]
    lambda_low: f64,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    keep_threshold: f64,
    /// Never add background patches from vehicle-free entries.
    #[arg(long)]
    no_background_negatives: bool,
    /// Output manifest (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Circle,
    Iou,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "circle")]
    mode: ModeArg,
    #[arg(long, default_value_t = 12.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the PR curve as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage, optionally over several seeds and with the ablation table.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config JSON; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablate: bool,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shrinks every corpus to this many images.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreviewArgs {
    input: PathBuf,
    out: PathBuf,
    /// Preview a single channel of a multi-channel raster.
    #[arg(long)]
    channel: Option<u32>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Geom(a) => geom(a),
        Cmd::Attn(a) => attn(a),
        Cmd::Scenegen(a) => scenegen(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Detect(a) => detect(a),
        Cmd::Fit(a) => fit(a),
        Cmd::Refine(a) => refine(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Pipeline(PipelineCmd::Run(a)) => pipeline_run(a),
        Cmd::Preview(a) => preview(a),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_or_print_json<T: Serialize>(v: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => print_json(v),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

fn manifest_root(manifest: &Path, root: Option<PathBuf>) -> PathBuf {
    root.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn write_or_print_manifest(m: &attnlabel::DatasetManifest, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            Ok(save_manifest(m, p)?)
        }
        None => {
            print!("{}", m.to_jsonl()?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct GeomReport {
    radius: f64,
    alpha: f64,
    box_side: f64,
    quadrant_area: f64,
    disagreement_fraction: f64,
    disagreement_std_error: f64,
}

fn geom(a: GeomArgs) -> Result<()> {
    let side = solve_box_size(a.radius, a.alpha)?;
    let d = region_disagreement(a.radius, side, a.alpha)?;
    print_json(&GeomReport {
        radius: a.radius,
        alpha: a.alpha,
        box_side: side,
        quadrant_area: isocontour_area_quadrant(side, a.alpha)?,
        disagreement_fraction: d.fraction,
        disagreement_std_error: d.std_error,
    })
}

fn attn(cmd: AttnCmd) -> Result<()> {
    let load = |p: &Path| read_raster(p).with_context(|| format!("reading {}", p.display()));
    let (metric, value) = match cmd {
        AttnCmd::Tv { a, b, channel } => {
            let pick = |r: attnlabel::Raster| match channel {
                Some(c) if c < r.channels() => Ok(r.channel(c)),
                Some(c) => bail!("channel {c} out of range"),
                None => Ok(r),
            };
            let p = to_distribution(&pick(load(&a)?)?)?;
            let q = to_distribution(&pick(load(&b)?)?)?;
            ("tv_distance", tv_distance(&p, &q)?)
        }
        AttnCmd::Reg { stack } => ("reg_loss", reg_loss(&AttentionStack::from_stacked(&load(&stack)?)?)?),
        AttnCmd::Obj { foreground, category } => ("obj_loss", obj_loss(&load(&foreground)?, &load(&category)?)?),
        AttnCmd::Bg { background, category } => ("bg_loss", bg_loss(&load(&background)?, &load(&category)?)?),
    };
    print_json(&serde_json::json!({ "metric": metric, "value": value }))
}

fn scenegen(a: ScenegenArgs) -> Result<()> {
    let base: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    let style: Style = a.style.into();
    let cfg = base.with_style(style).with_seed(a.seed);
    let store = DiskStore::new(&a.out);
    let prefix = match style {
        Style::Source => "source",
        Style::Target => "target",
    };
    let manifest = if a.no_maps {
        let corpus = attnlabel::scenegen::Corpus::new(prefix, cfg, a.n, a.pos_fraction)?.with_maps(false);
        attnlabel::scenegen::write_corpus(&corpus, &store)?
    } else {
        gen_dataset(&cfg, a.n, a.pos_fraction, prefix, &store)?
    };
    save_manifest(&manifest, a.out.join("manifest.jsonl"))?;
    eprintln!(
        "wrote {} images ({} positive, {} vehicles) to {}",
        manifest.len(),
        manifest.positives(),
        manifest.annotation_count(),
        a.out.display()
    );
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let raster = read_raster(&a.tile).with_context(|| format!("reading {}", a.tile.display()))?;
    let gts: Vec<Annotation> = match &a.labels {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let name = a
        .tile
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n).to_string())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "tile".into());
    let tile = Tile {
        name,
        raster,
        gts,
        gsd_cm_per_px: a.gsd_in,
    };
    let domain = match a.domain {
        StyleArg::Source => Domain::Source,
        StyleArg::Target => Domain::Target,
    };
    let cfg = SplitConfig {
        n_windows: a.n,
        w: a.window,
        seed: a.seed,
        to_gsd: a.gsd_out,
        domain,
    };
    let store = DiskStore::new(&a.out);
    let report = build_split(std::slice::from_ref(&tile), &cfg, "windows", &store)?;
    save_manifest(&report.manifest, a.out.join("manifest.jsonl"))?;
    eprintln!(
        "wrote {} windows ({} positive, {} negative) to {}",
        report.manifest.len(),
        report.positives,
        report.negatives,
        a.out.display()
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let model: DetectorModel = read_json(&a.model)?;
    model.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let store = DiskStore::new(manifest_root(&a.manifest, a.root));
    let out = pseudo_label(&model, &manifest, a.on.into(), a.conf_min, &store)?;
    write_or_print_manifest(&out, a.out.as_deref())
}

fn fit_grid(a: &FitArgs) -> Result<SearchGrid> {
    let mut grid = match (&a.grid, a.on) {
        (Some(p), _) => read_json(p)?,
        (None, OnArg::Image) => SearchGrid::for_images(),
        (None, OnArg::Map) => SearchGrid::for_maps(),
    };
    if !a.reduce.is_empty() {
        grid.reduces = a.reduce.iter().map(|&r| r.into()).collect();
    }
    if a.threshold_min.is_some() || a.threshold_max.is_some() || a.threshold_step.is_some() {
        let lo = a.threshold_min.unwrap_or(grid.thresholds.first().copied().unwrap_or(0.0));
        let hi = a.threshold_max.unwrap_or(grid.thresholds.last().copied().unwrap_or(1.0));
        let step = a.threshold_step.unwrap_or(0.05);
        if !(step > 0.0) || hi < lo {
            bail!("threshold range needs min <= max and a positive step");
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        grid.thresholds = (0..=n).map(|k| ((lo + k as f64 * step) * 1e6).round() / 1e6).collect();
    }
    if !a.min_area.is_empty() {
        grid.min_areas = a.min_area.clone();
    }
    if !a.max_area.is_empty() {
        grid.max_areas = a.max_area.clone();
    }
    if !a.merge_radius.is_empty() {
        grid.merge_radii = a.merge_radius.clone();
    }
    if grid.models().is_empty() {
        bail!("the search grid has no valid point");
    }
    Ok(grid)
}

fn fit(a: FitArgs) -> Result<()> {
    let grid = fit_grid(&a)?;
    let manifest = load_manifest(&a.manifest)?;
    let store = DiskStore::new(manifest_root(&a.manifest, a.root.clone()));
    let training = ManifestTraining::new(&manifest, a.on.into(), &store);
    let model = fit_with(&training, &grid, a.match_radius)?;
    eprintln!("fitted {} grid points, training F1 {:.4}", grid.len(), model.fitted_f1);
    write_or_print_json(&model, a.out.as_deref())
}

fn refine(a: RefineArgs) -> Result<()> {
    let cfg = RefineConfig {
        lambda_high: a.lambda_high,
        lambda_low: a.lambda_low,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        patch_size: a.patch_size,
        keep_threshold: a.keep_threshold,
        background_negatives: !a.no_background_negatives,
        ..RefineConfig::default()
    };
    let manifest = load_manifest(&a.manifest)?;
    let store = DiskStore::new(manifest_root(&a.manifest, a.images));
    let out = refine_manifest(&manifest, &store, &cfg)?;
    eprintln!(
        "{} positive, {} uncertain ({} kept), {} negative, {} background{}",
        out.n_positive,
        out.n_uncertain,
        out.n_kept,
        out.n_negative,
        out.n_background,
        if out.fallback { "; classifier skipped" } else { "" }
    );
    write_or_print_manifest(&out.manifest, a.out.as_deref())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Circle => MatchMode::circle(a.radius),
        ModeArg::Iou => MatchMode::box_for_radius(a.radius, a.alpha)?,
    };
    mode.validate()?;
    let pred = load_manifest(&a.pred)?;
    let gt = load_manifest(&a.gt)?;
    let report = evaluate_manifests(&pred, &gt, &mode)?;
    if let Some(p) = &a.svg {
        ensure_parent(p)?;
        fs::write(p, pr_curve_svg(&report)).with_context(|| format!("writing {}", p.display()))?;
    }
    write_or_print_json(&report, a.out.as_deref())
}

fn pipeline_run(a: RunArgs) -> Result<()> {
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = a.scale {
        cfg = cfg.scaled(n);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out.clone();
    }
    cfg.validate()?;
    let batch = run_batch(&cfg, a.seeds, a.ablate)?;
    if a.seeds == 1 {
        print_json(&batch.runs[0])
    } else {
        print_json(&batch)
    }
}

fn preview(a: PreviewArgs) -> Result<()> {
    let r = read_raster(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let r = match a.channel {
        Some(c) if c < r.channels() => r.channel(c),
        Some(c) => bail!("channel {c} out of range for a {}-channel raster", r.channels()),
        None => r,
    };
    ensure_parent(&a.out)?;
    Ok(export_preview(&r, &a.out)?)
}

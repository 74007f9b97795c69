//! Procedural aerial scenes with planted vehicles and matching attention maps.
//!
//! Stands in for the fine-tuned generator: each scene is a textured
//! background with non-overlapping rotated rectangles ("cars"); the attention
//! stack is built from Gaussian blobs at the car centers, degraded by jitter,
//! lattice noise and spurious blobs. Two styles give a controllable domain gap.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::AttentionStack;
use crate::error::{Error, Result};
use crate::manifest::{Annotation, DatasetManifest, Domain, ManifestEntry, Stage};
use crate::raster::Raster;
use crate::store::RasterStore;

pub const DEFAULT_GSD_CM: f64 = 12.5;
const PLACEMENT_ATTEMPTS: usize = 2000;
const LAYOUT_RESTARTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Dark vegetated terrain, low-frequency texture, larger and varied cars.
    Source,
    /// Bright arid terrain, high-frequency texture, smaller light-colored cars.
    Target,
}

impl Style {
    pub fn domain(self) -> Domain {
        match self {
            Style::Source => Domain::Source,
            Style::Target => Domain::Target,
        }
    }

    fn palette(self) -> StylePalette {
        match self {
            Style::Source => StylePalette {
                ground: [0.22, 0.30, 0.18],
                texture_amp: 0.08,
                texture_cell: 28.0,
                pixel_noise: 0.02,
                cars: &[
                    [0.92, 0.92, 0.90],
                    [0.75, 0.76, 0.78],
                    [0.60, 0.75, 0.90],
                    [0.90, 0.80, 0.30],
                    [0.95, 0.45, 0.40],
                    [0.14, 0.14, 0.16],
                ],
                car_shade: (0.85, 1.0),
                size_quantiles: (0.3, 1.0),
                clutter: &[[0.62, 0.62, 0.58], [0.80, 0.78, 0.70]],
            },
            Style::Target => StylePalette {
                ground: [0.66, 0.58, 0.45],
                texture_amp: 0.10,
                texture_cell: 10.0,
                pixel_noise: 0.03,
                cars: &[
                    [0.97, 0.97, 0.95],
                    [0.88, 0.89, 0.91],
                    [0.93, 0.90, 0.84],
                    [0.20, 0.20, 0.22],
                ],
                car_shade: (0.90, 1.0),
                size_quantiles: (0.0, 0.7),
                clutter: &[[0.90, 0.86, 0.78], [0.82, 0.82, 0.82]],
            },
        }
    }
}

struct StylePalette {
    ground: [f64; 3],
    texture_amp: f64,
    texture_cell: f64,
    pixel_noise: f64,
    /// Car colors; the last one is the dark paint.
    cars: &'static [[f64; 3]],
    car_shade: (f64, f64),
    /// Colors of non-vehicle objects (sheds, slabs, containers).
    clutter: &'static [[f64; 3]],
    /// Sub-range of the configured car-size range this style draws from.
    size_quantiles: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: u32,
    /// Inclusive range of cars per image.
    pub n_cars: (u32, u32),
    pub car_length: (f64, f64),
    pub car_width: (f64, f64),
    pub style: Style,
    /// Gaussian blob width of the attention maps, in pixels.
    pub attn_sigma: f64,
    /// Amplitude of the lattice noise added to every map, in `[0, 0.5)`.
    pub attn_noise: f64,
    /// Per-map blob displacement bound for the foreground and background maps.
    pub attn_offset_jitter: f64,
    /// Expected number of spurious blobs per map.
    pub attn_spurious: f64,
    /// Lower bound of the per-car attention strength (upper bound 1).
    pub attn_gain_min: f64,
    /// Inclusive range of non-vehicle objects per image.
    pub n_clutter: (u32, u32),
    /// Typical category/foreground attention on a non-vehicle object,
    /// relative to a vehicle.
    pub attn_clutter: f64,
    /// Whether dark paint is among the car colors.
    pub dark_cars: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 112,
            n_cars: (1, 4),
            car_length: (24.0, 34.0),
            car_width: (11.0, 15.0),
            style: Style::Source,
            attn_sigma: 6.0,
            attn_noise: 0.2,
            attn_offset_jitter: 3.0,
            attn_spurious: 1.0,
            attn_gain_min: 0.5,
            n_clutter: (0, 3),
            attn_clutter: 0.5,
            dark_cars: true,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_style(mut self, style: Style) -> Self {
        self.style = style;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Noise-free attention (no lattice noise, jitter or spurious blobs).
    pub fn clean_attention(mut self) -> Self {
        self.attn_noise = 0.0;
        self.attn_offset_jitter = 0.0;
        self.attn_spurious = 0.0;
        self.attn_clutter = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.image_size as f64 / 2.0;
        let bad = |m: String| Err(Error::invalid(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.n_cars.0 > self.n_cars.1 {
            return bad(format!("n_cars range {:?} is empty", self.n_cars));
        }
        for (name, (lo, hi)) in [("car_length", self.car_length), ("car_width", self.car_width)] {
            if !(lo > 0.0 && lo <= hi && hi < half) {
                return bad(format!("{name} range ({lo}, {hi}) must be positive and below image_size/2"));
            }
        }
        if !(0.0..0.5).contains(&self.attn_noise) {
            return bad(format!("attn_noise {} outside [0, 0.5)", self.attn_noise));
        }
        if !(self.attn_sigma > 0.0) || self.attn_offset_jitter < 0.0 || self.attn_spurious < 0.0 {
            return bad("attention sigma must be positive; jitter and spurious non-negative".into());
        }
        if self.n_clutter.0 > self.n_clutter.1 {
            return bad(format!("n_clutter range {:?} is empty", self.n_clutter));
        }
        if !(0.0..=1.0).contains(&self.attn_clutter) {
            return bad(format!("attn_clutter {} outside [0, 1]", self.attn_clutter));
        }
        if !(0.0..=1.0).contains(&self.attn_gain_min) {
            return bad(format!("attn_gain_min {} outside [0, 1]", self.attn_gain_min));
        }
        Ok(())
    }

    /// Minimum distance between car centers: the diagonal of the largest car
    /// plus one pixel, so rotated rectangles never touch.
    pub fn min_separation(&self) -> f64 {
        self.car_length.1.hypot(self.car_width.1) + 1.0
    }

    /// Distance every car center keeps from the image border.
    pub fn border_margin(&self) -> f64 {
        0.5 * self.car_length.1.hypot(self.car_width.1)
    }
}

/// Car placement, independent of style.
#[derive(Debug, Clone, PartialEq)]
pub struct Car {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub gts: Vec<Annotation>,
    pub cars: Vec<Car>,
    pub clutter: Vec<Car>,
    pub has_vehicles: bool,
}

// Independent random streams per image.
const STREAM_LAYOUT: u64 = 0x4c41_594f_5554;
const STREAM_STYLE: u64 = 0x5354_594c_45;
const STREAM_ATTN: u64 = 0x4154_544e;
const STREAM_CLUTTER: u64 = 0x434c_5554;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5eed)))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ id))
}

/// Car centers, angles and sizes. The same seed yields the same centers for
/// every style; only the size mapping differs.
pub fn gen_layout(cfg: &SceneConfig) -> Result<Vec<Car>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_LAYOUT);
    let n = rng.gen_range(cfg.n_cars.0..=cfg.n_cars.1) as usize;
    let size = cfg.image_size as f64;
    let margin = cfg.border_margin().ceil();
    let sep = cfg.min_separation();
    let (q0, q1) = cfg.style.palette().size_quantiles;
    let lo = margin as i64;
    let hi = (size - 1.0 - margin) as i64;
    if hi < lo {
        return Err(Error::Placement(format!(
            "cars of diagonal {:.1} px do not fit in {} px",
            2.0 * margin,
            cfg.image_size
        )));
    }

    // Greedy placement can leave no room for the last car; start over a few
    // times before giving up.
    let mut cars: Vec<Car> = Vec::with_capacity(n);
    let mut stuck = 0;
    for _ in 0..LAYOUT_RESTARTS {
        cars.clear();
        stuck = 0;
        for k in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cx = rng.gen_range(lo..=hi) as f64;
                let cy = rng.gen_range(lo..=hi) as f64;
                if cars.iter().all(|c| (c.cx - cx).hypot(c.cy - cy) > sep) {
                    let angle = rng.gen_range(0.0..std::f64::consts::PI);
                    let ul: f64 = rng.gen();
                    let uw: f64 = rng.gen();
                    let pick = |(a, b): (f64, f64), u: f64| a + (b - a) * (q0 + (q1 - q0) * u);
                    cars.push(Car {
                        cx,
                        cy,
                        angle,
                        length: pick(cfg.car_length, ul),
                        width: pick(cfg.car_width, uw),
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                stuck = k + 1;
                break;
            }
        }
        if stuck == 0 {
            return Ok(cars);
        }
    }
    Err(Error::Placement(format!(
        "could not place car {stuck} of {n} after {LAYOUT_RESTARTS} layouts of {PLACEMENT_ATTEMPTS} attempts each"
    )))
}

/// Smooth value noise in `[-1, 1]` on a square lattice with the given cell size.
struct LatticeNoise {
    cells: usize,
    cell: f64,
    values: Vec<f64>,
}

impl LatticeNoise {
    fn new(rng: &mut impl Rng, size: u32, cell: f64) -> Self {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        let values = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            cells,
            cell,
            values,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
        let v = |i: usize, j: usize| self.values[j.min(self.cells - 1) * self.cells + i.min(self.cells - 1)];
        let top = v(x0, y0) + (v(x0 + 1, y0) - v(x0, y0)) * tx;
        let bottom = v(x0, y0 + 1) + (v(x0 + 1, y0 + 1) - v(x0, y0 + 1)) * tx;
        top + (bottom - top) * ty
    }
}

/// Non-vehicle objects, kept clear of every vehicle footprint. Placement is
/// best effort: an object that finds no free spot is dropped.
pub fn gen_clutter(cfg: &SceneConfig, gts: &[Annotation]) -> Vec<Car> {
    let mut rng = stream(cfg.seed, STREAM_CLUTTER);
    let n = rng.gen_range(cfg.n_clutter.0..=cfg.n_clutter.1);
    let size = cfg.image_size as f64;
    let car_reach = cfg.border_margin();
    let mut out = Vec::new();
    for _ in 0..n {
        let length = rng.gen_range(8.0..36.0);
        let width = rng.gen_range(6.0..24.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let clear = car_reach + 0.5 * f64::hypot(length, width) + 1.0;
        for _ in 0..200 {
            let cx = rng.gen_range(0.0..size);
            let cy = rng.gen_range(0.0..size);
            if gts.iter().all(|g| (g.cx - cx).hypot(g.cy - cy) > clear) {
                out.push(Car { cx, cy, angle, length, width });
                break;
            }
        }
    }
    out
}

/// Paints a rotated rectangle; `shade(u, ch)` gives the value at
/// along-axis offset `u` for channel `ch`.
fn paint_rect(planes: &mut [Vec<f32>], size: usize, r: &Car, mut shade: impl FnMut(f64, usize) -> f64) {
    let (s, c) = r.angle.sin_cos();
    let reach = 0.5 * r.length.hypot(r.width) + 1.0;
    let x0 = (r.cx - reach).floor().max(0.0) as usize;
    let x1 = ((r.cx + reach).ceil().max(0.0) as usize).min(size - 1);
    let y0 = (r.cy - reach).floor().max(0.0) as usize;
    let y1 = ((r.cy + reach).ceil().max(0.0) as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - r.cx, y as f64 - r.cy);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if u.abs() <= 0.5 * r.length && v.abs() <= 0.5 * r.width {
                for (ch, plane) in planes.iter_mut().enumerate() {
                    plane[y * size + x] = shade(u, ch) as f32;
                }
            }
        }
    }
}

fn render_image(cfg: &SceneConfig, cars: &[Car], clutter: &[Car]) -> Raster {
    let pal = cfg.style.palette();
    let mut rng = stream(cfg.seed, STREAM_STYLE ^ (cfg.style as u64 + 1));
    let size = cfg.image_size;
    let texture = LatticeNoise::new(&mut rng, size, pal.texture_cell);
    let tint = LatticeNoise::new(&mut rng, size, pal.texture_cell * 2.0);

    let n = size as usize * size as usize;
    let mut planes = vec![vec![0f32; n]; 3];
    for y in 0..size as usize {
        for x in 0..size as usize {
            let t = texture.at(x as f64, y as f64) * pal.texture_amp;
            let h = tint.at(x as f64, y as f64) * pal.texture_amp * 0.3;
            for (c, plane) in planes.iter_mut().enumerate() {
                let jitter = rng.gen_range(-1.0..1.0) * pal.pixel_noise;
                let tinted = if c == 1 { h } else { -h };
                plane[y * size as usize + x] = (pal.ground[c] + t + tinted + jitter) as f32;
            }
        }
    }

    for obj in clutter {
        let color = pal.clutter[rng.gen_range(0..pal.clutter.len())];
        let shade = rng.gen_range(0.85..=1.0);
        paint_rect(&mut planes, size as usize, obj, |_, ch| {
            color[ch] * shade + rng.gen_range(-1.0..1.0) * 0.02
        });
    }

    for car in cars {
        let n_colors = if cfg.dark_cars { pal.cars.len() } else { pal.cars.len() - 1 };
        let color = pal.cars[rng.gen_range(0..n_colors)];
        let shade = rng.gen_range(pal.car_shade.0..=pal.car_shade.1);
        paint_rect(&mut planes, size as usize, car, |u, ch| {
            // Darker windshield band across the front third.
            let glass = if u > 0.12 * car.length && u < 0.3 * car.length { 0.8 } else { 1.0 };
            color[ch] * shade * glass + rng.gen_range(-1.0..1.0) * 0.015
        });
    }

    let data: Vec<f32> = planes
        .into_iter()
        .flatten()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Raster::new(size, size, 3, data).expect("rendered image is well-formed")
}

/// Renders one scene. Deterministic in `cfg`.
pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    let cars = gen_layout(cfg)?;
    let gts: Vec<Annotation> = cars.iter().map(|c| Annotation::new(c.cx, c.cy)).collect();
    let clutter = gen_clutter(cfg, &gts);
    let image = render_image(cfg, &cars, &clutter);
    Ok(Scene {
        image,
        has_vehicles: !gts.is_empty(),
        gts,
        cars,
        clutter,
    })
}

struct Blob {
    x: f64,
    y: f64,
    amp: f64,
    sigma: f64,
}

fn blob_field(size: u32, blobs: &[Blob]) -> Vec<f64> {
    let s = size as usize;
    let mut field = vec![0.0f64; s * s];
    for b in blobs {
        let reach = 4.0 * b.sigma;
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        let x0 = (b.x - reach).floor().max(0.0) as usize;
        let x1 = ((b.x + reach).ceil().max(0.0) as usize).min(s - 1);
        let y0 = (b.y - reach).floor().max(0.0) as usize;
        let y1 = ((b.y + reach).ceil().max(0.0) as usize).min(s - 1);
        for y in y0..=y1 {
            let dy = y as f64 - b.y;
            for x in x0..=x1 {
                let dx = x as f64 - b.x;
                field[y * s + x] += b.amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    field
}

fn jittered(rng: &mut impl Rng, x: f64, y: f64, jitter: f64) -> (f64, f64) {
    if jitter <= 0.0 {
        return (x, y);
    }
    let r = jitter * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    (x + r * t.cos(), y + r * t.sin())
}

fn spurious_blobs(rng: &mut impl Rng, cfg: &SceneConfig) -> Vec<Blob> {
    let whole = cfg.attn_spurious.floor();
    let extra = if rng.gen::<f64>() < cfg.attn_spurious - whole { 1 } else { 0 };
    let count = whole as usize + extra;
    let size = cfg.image_size as f64;
    (0..count)
        .map(|_| Blob {
            x: rng.gen_range(0.0..size),
            y: rng.gen_range(0.0..size),
            amp: rng.gen_range(0.25..0.75),
            sigma: cfg.attn_sigma * rng.gen_range(0.8..1.2),
        })
        .collect()
}

/// One map's objectness field: per-car blobs (optionally jittered) plus
/// spurious blobs and lattice noise.
fn objectness_map(
    rng: &mut impl Rng,
    cfg: &SceneConfig,
    gts: &[Annotation],
    gains: &[f64],
    jitter: f64,
    clutter: &[Car],
) -> Vec<f64> {
    let mut blobs: Vec<Blob> = gts
        .iter()
        .zip(gains)
        .map(|(g, &gain)| {
            let (x, y) = jittered(rng, g.cx, g.cy, jitter);
            let amp = if jitter > 0.0 || cfg.attn_noise > 0.0 {
                gain * rng.gen_range(0.85..=1.0)
            } else {
                gain
            };
            Blob {
                x,
                y,
                amp,
                sigma: cfg.attn_sigma,
            }
        })
        .collect();
    for obj in clutter {
        let (x, y) = jittered(rng, obj.cx, obj.cy, jitter);
        blobs.push(Blob {
            x,
            y,
            amp: (cfg.attn_clutter * rng.gen_range(0.6..1.4)).min(1.0),
            sigma: cfg.attn_sigma,
        });
    }
    blobs.extend(spurious_blobs(rng, cfg));
    let mut field = blob_field(cfg.image_size, &blobs);
    if cfg.attn_noise > 0.0 {
        let lattice = LatticeNoise::new(rng, cfg.image_size, (cfg.attn_sigma * 1.5).max(2.0));
        let s = cfg.image_size as usize;
        for y in 0..s {
            for x in 0..s {
                let u = 0.5 * (lattice.at(x as f64, y as f64) + 1.0);
                field[y * s + x] += cfg.attn_noise * u;
            }
        }
    }
    field
}

fn to_raster(size: u32, v: Vec<f64>) -> Raster {
    Raster::new(size, size, 1, v.into_iter().map(|x| x as f32).collect())
        .expect("attention field is finite")
}

/// Builds the (category, foreground, background) attention stack for a scene.
///
/// Category: blobs at the exact centers. Foreground: the same cars with
/// independently jittered centers. Background: the inverse of an independently
/// jittered objectness field. Each map gets its own spurious blobs and noise.
/// Non-vehicle objects draw partial category and foreground attention but
/// stay background.
pub fn gen_attention(gts: &[Annotation], cfg: &SceneConfig) -> Result<AttentionStack> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_ATTN);
    let gains: Vec<f64> = gts
        .iter()
        .map(|_| rng.gen_range(cfg.attn_gain_min..=1.0))
        .collect();
    let size = cfg.image_size;
    let clutter = if cfg.attn_clutter > 0.0 { gen_clutter(cfg, gts) } else { Vec::new() };
    let category = objectness_map(&mut rng, cfg, gts, &gains, 0.0, &clutter);
    let foreground = objectness_map(&mut rng, cfg, gts, &gains, cfg.attn_offset_jitter, &clutter);
    let background: Vec<f64> = objectness_map(&mut rng, cfg, gts, &gains, cfg.attn_offset_jitter, &[])
        .into_iter()
        .map(|v| 1.0 - v)
        .collect();
    AttentionStack::new(
        &to_raster(size, category),
        &to_raster(size, foreground),
        &to_raster(size, background),
    )
}

/// A procedurally defined image collection: item `i` is a pure function of
/// the template, `i`, and whether `i` is one of the positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub prefix: String,
    pub template: SceneConfig,
    pub n_images: usize,
    pub pos_fraction: f64,
    pub with_maps: bool,
    pub stage: Stage,
}

impl Corpus {
    pub fn new(
        prefix: impl Into<String>,
        template: SceneConfig,
        n_images: usize,
        pos_fraction: f64,
    ) -> Result<Self> {
        if n_images == 0 {
            return Err(Error::invalid("corpus needs at least one image"));
        }
        if !(0.0..=1.0).contains(&pos_fraction) {
            return Err(Error::invalid(format!("pos_fraction {pos_fraction} outside [0, 1]")));
        }
        template.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            template,
            n_images,
            pos_fraction,
            with_maps: true,
            stage: Stage::Synthetic,
        })
    }

    pub fn with_maps(mut self, with_maps: bool) -> Self {
        self.with_maps = with_maps;
        self
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn n_positive(&self) -> usize {
        (self.pos_fraction * self.n_images as f64).floor() as usize
    }

    /// Positive flags per index, from a seeded shuffle.
    pub fn positive_flags(&self) -> Vec<bool> {
        let mut flags: Vec<bool> = (0..self.n_images).map(|i| i < self.n_positive()).collect();
        let mut rng = stream(self.template.seed, 0x504f_5321);
        flags.shuffle(&mut rng);
        flags
    }

    pub fn scene_config(&self, index: usize, positive: bool) -> SceneConfig {
        let mut cfg = self.template.clone();
        cfg.seed = derive_seed(self.template.seed, index as u64);
        cfg.n_cars = if positive {
            (self.template.n_cars.0.max(1), self.template.n_cars.1.max(1))
        } else {
            (0, 0)
        };
        cfg
    }

    pub fn image_path(&self, index: usize) -> String {
        format!("{}/{index:06}.img.amap", self.prefix)
    }

    pub fn map_path(&self, index: usize) -> String {
        format!("{}/{index:06}.map.amap", self.prefix)
    }

    fn parse_path(&self, path: &str) -> Option<(usize, bool)> {
        let rest = path.strip_prefix(&self.prefix)?.strip_prefix('/')?;
        let (idx, kind) = rest.split_once('.')?;
        let index: usize = idx.parse().ok()?;
        if index >= self.n_images {
            return None;
        }
        match kind {
            "img.amap" => Some((index, false)),
            "map.amap" if self.with_maps => Some((index, true)),
            _ => None,
        }
    }

    fn entry(&self, index: usize, gts: Vec<Annotation>) -> ManifestEntry {
        ManifestEntry {
            image_path: self.image_path(index),
            map_path: self.with_maps.then(|| self.map_path(index)),
            width: self.template.image_size,
            height: self.template.image_size,
            gsd_cm_per_px: DEFAULT_GSD_CM,
            has_vehicles: !gts.is_empty(),
            annotations: gts,
            domain_tag: self.template.style.domain(),
            stage_tag: self.stage,
            weak_only: false,
        }
    }

    /// Ground-truth manifest, computed from layouts alone.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let flags = self.positive_flags();
        let entries = (0..self.n_images)
            .into_par_iter()
            .map(|i| {
                let cars = gen_layout(&self.scene_config(i, flags[i]))?;
                Ok(self.entry(i, cars.iter().map(|c| Annotation::new(c.cx, c.cy)).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetManifest::new(entries)
    }

    pub fn render(&self, index: usize, positive: bool) -> Result<(Scene, Option<AttentionStack>)> {
        let cfg = self.scene_config(index, positive);
        let scene = gen_scene(&cfg)?;
        let stack = if self.with_maps {
            Some(gen_attention(&scene.gts, &cfg)?)
        } else {
            None
        };
        Ok((scene, stack))
    }
}

/// Generates a corpus into `store` and returns its ground-truth manifest.
pub fn gen_dataset(
    template: &SceneConfig,
    n_images: usize,
    pos_fraction: f64,
    prefix: &str,
    store: &dyn RasterStore,
) -> Result<DatasetManifest> {
    let corpus = Corpus::new(prefix, template.clone(), n_images, pos_fraction)?;
    write_corpus(&corpus, store)
}

pub fn write_corpus(corpus: &Corpus, store: &dyn RasterStore) -> Result<DatasetManifest> {
    let flags = corpus.positive_flags();
    let entries = (0..corpus.n_images)
        .into_par_iter()
        .map(|i| {
            let (scene, stack) = corpus.render(i, flags[i])?;
            store.save(&corpus.image_path(i), &scene.image)?;
            if let Some(stack) = stack {
                store.save(&corpus.map_path(i), &stack.stacked())?;
            }
            Ok(corpus.entry(i, scene.gts))
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(entries)
}

/// Read-only store that re-renders corpus rasters on demand instead of
/// holding them in memory.
#[derive(Debug, Default, Clone)]
pub struct ProceduralStore {
    corpora: HashMap<String, (Arc<Corpus>, Arc<Vec<bool>>)>,
}

impl ProceduralStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, corpus: Corpus) {
        let flags = corpus.positive_flags();
        self.corpora
            .insert(corpus.prefix.clone(), (Arc::new(corpus), Arc::new(flags)));
    }
}

impl RasterStore for ProceduralStore {
    fn load(&self, path: &str) -> Result<Arc<Raster>> {
        let prefix = path.split('/').next().unwrap_or_default();
        let (corpus, flags) = self
            .corpora
            .get(prefix)
            .ok_or_else(|| Error::MissingRaster(path.to_string()))?;
        let (index, is_map) = corpus
            .parse_path(path)
            .ok_or_else(|| Error::MissingRaster(path.to_string()))?;
        let cfg = corpus.scene_config(index, flags[index]);
        if is_map {
            let gts: Vec<Annotation> = gen_layout(&cfg)?
                .iter()
                .map(|c| Annotation::new(c.cx, c.cy))
                .collect();
            Ok(Arc::new(gen_attention(&gts, &cfg)?.stacked()))
        } else {
            Ok(Arc::new(gen_scene(&cfg)?.image))
        }
    }

    fn save(&self, path: &str, _raster: &Raster) -> Result<()> {
        Err(Error::invalid(format!("procedural store is read-only ({path})")))
    }
}

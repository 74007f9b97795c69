//! Tile-to-window dataset construction: GSD rescaling, uniformly placed
//! randomly rotated square windows, and label transfer into window frames.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Annotation, DatasetManifest, Domain, ManifestEntry, Stage};
use crate::raster::{bilinear, Raster};
use crate::scenegen::derive_seed;
use crate::store::RasterStore;

pub const DEFAULT_WINDOW: u32 = 112;
const POSE_TOL: f64 = 1e-9;

/// A rotated square window inside a tile. Window pixel `(i, j)` samples the
/// tile at `c + R(theta) (i - w/2, j - w/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPose {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub w: u32,
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

impl WindowPose {
    pub fn new(cx: f64, cy: f64, theta: f64, w: u32) -> Self {
        WindowPose { cx, cy, theta, w }
    }

    /// `(cos, sin)` with values below 1e-12 snapped to zero, so quarter
    /// turns land exactly on the pixel grid.
    pub fn rotation(&self) -> (f64, f64) {
        (snap(self.theta.cos()), snap(self.theta.sin()))
    }

    /// Half-extent of the rotated square along either tile axis.
    pub fn margin(&self) -> f64 {
        let (c, s) = self.rotation();
        0.5 * self.w as f64 * (c.abs() + s.abs())
    }

    pub fn fits(&self, tile_w: u32, tile_h: u32) -> bool {
        let m = self.margin();
        self.w > 0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.theta.is_finite()
            && self.cx >= m - POSE_TOL
            && self.cx <= tile_w as f64 - m + POSE_TOL
            && self.cy >= m - POSE_TOL
            && self.cy <= tile_h as f64 - m + POSE_TOL
    }

    pub fn validate(&self, tile_w: u32, tile_h: u32) -> Result<()> {
        if self.fits(tile_w, tile_h) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "window {self:?} leaves the {tile_w}x{tile_h} tile"
            )))
        }
    }

    /// Tile-frame point to window-frame point.
    pub fn to_window(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = self.rotation();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let half = 0.5 * self.w as f64;
        (c * dx + s * dy + half, -s * dx + c * dy + half)
    }

    /// Window-frame point to tile-frame point.
    pub fn to_tile(&self, u: f64, v: f64) -> (f64, f64) {
        let (c, s) = self.rotation();
        let half = 0.5 * self.w as f64;
        let (du, dv) = (u - half, v - half);
        (self.cx + c * du - s * dv, self.cy + s * du + c * dv)
    }
}

fn gsd_factor(from_gsd: f64, to_gsd: f64) -> Result<f64> {
    if !(from_gsd > 0.0 && to_gsd > 0.0 && from_gsd.is_finite() && to_gsd.is_finite()) {
        return Err(Error::invalid(format!(
            "GSDs must be positive, got {from_gsd} -> {to_gsd}"
        )));
    }
    Ok(from_gsd / to_gsd)
}

/// Resamples a tile from `from_gsd` to `to_gsd` cm/px. Output dimensions are
/// the input dimensions times `from_gsd / to_gsd`, rounded; pixel centers are
/// aligned so the tile's physical extent is preserved.
pub fn rescale_gsd(tile: &Raster, from_gsd: f64, to_gsd: f64) -> Result<Raster> {
    let f = gsd_factor(from_gsd, to_gsd)?;
    if from_gsd == to_gsd {
        return Ok(tile.clone());
    }
    let ow = (tile.width() as f64 * f).round();
    let oh = (tile.height() as f64 * f).round();
    if ow < 1.0 || oh < 1.0 || ow > u32::MAX as f64 || oh > u32::MAX as f64 {
        return Err(Error::invalid(format!(
            "rescaling {}x{} by {f} gives a degenerate {ow}x{oh} raster",
            tile.width(),
            tile.height()
        )));
    }
    let (ow, oh) = (ow as u32, oh as u32);
    let sx = tile.width() as f64 / ow as f64;
    let sy = tile.height() as f64 / oh as f64;
    let (w, h) = (tile.width() as usize, tile.height() as usize);
    let mut data = Vec::with_capacity(ow as usize * oh as usize * tile.channels() as usize);
    for c in 0..tile.channels() {
        let plane = tile.plane(c);
        for j in 0..oh {
            let y = (j as f64 + 0.5) * sy - 0.5;
            for i in 0..ow {
                let x = (i as f64 + 0.5) * sx - 0.5;
                data.push(bilinear(plane, w, h, x, y) as f32);
            }
        }
    }
    Raster::new(ow, oh, tile.channels(), data)
}

/// Maps tile-frame annotations through the same rescaling as [`rescale_gsd`].
pub fn rescale_annotations(gts: &[Annotation], from_gsd: f64, to_gsd: f64) -> Result<Vec<Annotation>> {
    let f = gsd_factor(from_gsd, to_gsd)?;
    Ok(gts
        .iter()
        .map(|a| Annotation {
            cx: (a.cx + 0.5) * f - 0.5,
            cy: (a.cy + 0.5) * f - 0.5,
            confidence: a.confidence,
        })
        .collect())
}

/// `n` window poses with uniform rotation and, given the rotation, a center
/// uniform over the positions where the window stays inside the tile.
pub fn sample_windows(tile_w: u32, tile_h: u32, n: usize, w: u32, seed: u64) -> Result<Vec<WindowPose>> {
    if w == 0 {
        return Err(Error::invalid("window side must be positive"));
    }
    let need = w as f64 * SQRT_2;
    if (tile_w.min(tile_h) as f64) < need {
        return Err(Error::invalid(format!(
            "{tile_w}x{tile_h} tile cannot hold a rotated {w}px window (needs {need:.1}px)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let probe = WindowPose::new(0.0, 0.0, theta, w);
        let m = probe.margin();
        let cx = m + rng.gen::<f64>() * (tile_w as f64 - 2.0 * m);
        let cy = m + rng.gen::<f64>() * (tile_h as f64 - 2.0 * m);
        poses.push(WindowPose { cx, cy, ..probe });
    }
    Ok(poses)
}

/// Bilinear extraction of a rotated window. At `theta = 0` and integer
/// centers this is an exact sub-raster copy.
pub fn extract_window(tile: &Raster, pose: &WindowPose) -> Result<Raster> {
    PackedTile::new(tile).extract(pose)
}

/// Extracts many windows in parallel; output order follows `poses`.
pub fn extract_windows(tile: &Raster, poses: &[WindowPose]) -> Result<Vec<Raster>> {
    PackedTile::new(tile).extract_many(poses)
}

const FRAC_BITS: u32 = 32;
const FIX_ONE: f64 = (1u64 << FRAC_BITS) as f64;
const FRAC_MASK: i64 = (1 << FRAC_BITS) - 1;
const FRAC_SCALE: f64 = 1.0 / FIX_ONE;

/// The top 24 fraction bits as an exact f32 in `[0, 1)`.
#[inline(always)]
fn lerp_weight(v: i64) -> f32 {
    (v & FRAC_MASK) as f32 * FRAC_SCALE as f32
}

const PREFETCH_ROWS: usize = 2;
const MIN_JOB_WINDOWS: usize = 32;

#[inline(always)]
fn prefetch(p: *const f32) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        // A hint only: prefetching any address is sound.
        #[allow(unused_unsafe)]
        unsafe {
            _mm_prefetch::<_MM_HINT_T0>(p as *const i8)
        };
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}

fn to_fixed(v: f64) -> i64 {
    (v * FIX_ONE).round() as i64
}

/// A tile with its channels interleaved per pixel, built once and shared by
/// every window cut from it. Sample positions use 32.32 fixed point.
#[derive(Debug, Clone)]
pub struct PackedTile {
    width: usize,
    height: usize,
    channels: usize,
    px: Vec<f32>,
    /// Interpolating values this small in f32 can never overflow.
    bounded: bool,
}

impl PackedTile {
    pub fn new(tile: &Raster) -> Self {
        let channels = tile.channels() as usize;
        let n = tile.plane_len();
        let mut px = vec![0f32; n * channels];
        for ch in 0..channels {
            for (dst, &v) in px.chunks_exact_mut(channels).zip(tile.plane(ch as u32)) {
                dst[ch] = v;
            }
        }
        let bounded = tile.data().iter().all(|v| v.abs() <= f32::MAX / 4.0);
        PackedTile {
            width: tile.width() as usize,
            height: tile.height() as usize,
            channels,
            px,
            bounded,
        }
    }

    pub fn width(&self) -> u32 {
        self.width as u32
    }

    pub fn height(&self) -> u32 {
        self.height as u32
    }

    pub fn extract(&self, pose: &WindowPose) -> Result<Raster> {
        let mut out = Raster::zeros(pose.w, pose.w, self.channels as u32);
        self.extract_into(pose, &mut out)?;
        Ok(out)
    }

    /// Extracts into `out`, reusing its buffer when the shape already fits.
    pub fn extract_into(&self, pose: &WindowPose, out: &mut Raster) -> Result<()> {
        pose.validate(self.width as u32, self.height as u32)?;
        if (out.width(), out.height(), out.channels()) != (pose.w, pose.w, self.channels as u32) {
            *out = Raster::zeros(pose.w, pose.w, self.channels as u32);
        }
        self.fill(pose, out.data_mut());
        if !self.bounded {
            if let Err(e) = out.check_finite() {
                out.data_mut().fill(0.0);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Parallel extraction; output order follows `poses`.
    pub fn extract_many(&self, poses: &[WindowPose]) -> Result<Vec<Raster>> {
        self.map_windows(poses, |_, _, win| Ok(win.clone()))
    }

    /// Streams every window through `f` without keeping it. Each worker
    /// reuses one buffer; results follow the order of `poses`.
    pub fn map_windows<T, F>(&self, poses: &[WindowPose], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &WindowPose, &Raster) -> Result<T> + Sync,
    {
        for p in poses {
            p.validate(self.width as u32, self.height as u32)?;
        }
        let shape = |p: &WindowPose| Raster::zeros(p.w, p.w, self.channels as u32);
        let first = poses.first().map(shape).unwrap_or_else(|| Raster::zeros(1, 1, 1));
        // Buffers are made per rayon job, so keep jobs long enough to reuse them.
        poses
            .par_iter()
            .with_min_len(MIN_JOB_WINDOWS)
            .enumerate()
            .map_init(
                || first.clone(),
                |buf, (k, p)| {
                    self.extract_into(p, buf)?;
                    f(k, p, buf)
                },
            )
            .collect()
    }

    fn fill(&self, pose: &WindowPose, out: &mut [f32]) {
        let w = pose.w as usize;
        let (c, s) = pose.rotation();
        let half = 0.5 * pose.w as f64;
        let step = (to_fixed(c), to_fixed(s));
        // Fixed-point tile position of window pixel (0, j).
        let row_start = |j: usize| {
            let dv = j as f64 - half;
            (to_fixed(pose.cx - c * half - s * dv), to_fixed(pose.cy - s * half + c * dv))
        };
        // The fast path needs every sample and its right and lower neighbours
        // inside the tile. Positions are affine in (i, j), so checking the
        // corners suffices; the one-unit margin covers per-row rounding.
        let last = w.saturating_sub(1) as i64;
        let hi_x = ((self.width as i64 - 1) << FRAC_BITS) - 1;
        let hi_y = ((self.height as i64 - 1) << FRAC_BITS) - 1;
        let interior = [0, w.saturating_sub(1)].iter().all(|&j| {
            let (x, y) = row_start(j);
            [(x, y), (x + last * step.0, y + last * step.1)]
                .iter()
                .all(|&(x, y)| (1..hi_x).contains(&x) && (1..hi_y).contains(&y))
        });
        match (interior && self.bounded, self.channels) {
            (true, 1) => self.rows_interior::<1>(out, w, step, row_start),
            (true, 2) => self.rows_interior::<2>(out, w, step, row_start),
            (true, 3) => self.rows_interior::<3>(out, w, step, row_start),
            (true, 4) => self.rows_interior::<4>(out, w, step, row_start),
            _ => self.rows_clamped(out, w, step, row_start),
        }
    }

    /// Fast path for samples known to lie inside the tile, with the channel
    /// count fixed at compile time.
    fn rows_interior<const L: usize>(
        &self,
        out: &mut [f32],
        w: usize,
        step: (i64, i64),
        row_start: impl Fn(usize) -> (i64, i64),
    ) {
        let tw = self.width;
        let (px, _) = self.px.as_chunks::<L>();
        // Pixel offset of the same column PREFETCH_ROWS output rows ahead.
        let ahead = |d: i64| ((d * PREFETCH_ROWS as i64) >> FRAC_BITS) as isize;
        let ahead = ahead(step.0) * tw as isize - ahead(step.1);
        let base = self.px.as_ptr();
        let mut planes: Vec<&mut [f32]> = out.chunks_exact_mut(w * w).collect();
        let planes: &mut [&mut [f32]; L] = planes.as_mut_slice().try_into().expect("one plane per channel");
        for j in 0..w {
            let (mut x, mut y) = row_start(j);
            let fetch = j + PREFETCH_ROWS < w;
            let row = j * w..(j + 1) * w;
            let rows = planes.each_mut().map(|p| &mut p[row.clone()]);
            for i in 0..w {
                let k = (y >> FRAC_BITS) as usize * tw + (x >> FRAC_BITS) as usize;
                let fx = lerp_weight(x);
                let fy = lerp_weight(y);
                x += step.0;
                y += step.1;
                if fetch {
                    let p = base.wrapping_offset((k as isize + ahead) * L as isize);
                    prefetch(p);
                    prefetch(p.wrapping_add(tw * L));
                }
                let (top, bot) = (&px[k..k + 2], &px[k + tw..k + tw + 2]);
                for ch in 0..L {
                    let t = top[0][ch] + (top[1][ch] - top[0][ch]) * fx;
                    let b = bot[0][ch] + (bot[1][ch] - bot[0][ch]) * fx;
                    rows[ch][i] = t + (b - t) * fy;
                }
            }
        }
    }

    /// General path: clamps to the tile and interpolates in f64.
    fn rows_clamped(&self, out: &mut [f32], w: usize, step: (i64, i64), row_start: impl Fn(usize) -> (i64, i64)) {
        let plane = w * w;
        let (tw, th, st) = (self.width, self.height, self.channels);
        let x_max = (tw as i64 - 1) << FRAC_BITS;
        let y_max = (th as i64 - 1) << FRAC_BITS;
        let p = &self.px;
        for j in 0..w {
            let (mut x, mut y) = row_start(j);
            for i in 0..w {
                let (xc, yc) = (x.clamp(0, x_max), y.clamp(0, y_max));
                x += step.0;
                y += step.1;
                let (x0, y0) = ((xc >> FRAC_BITS) as usize, (yc >> FRAC_BITS) as usize);
                let fx = (xc & FRAC_MASK) as f64 * FRAC_SCALE;
                let fy = (yc & FRAC_MASK) as f64 * FRAC_SCALE;
                let x1 = (x0 + 1).min(tw - 1);
                let y1 = (y0 + 1).min(th - 1);
                let at = |yy: usize, xx: usize| (yy * tw + xx) * st;
                let (a, b, d, e) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let o = j * w + i;
                for ch in 0..st {
                    out[ch * plane + o] = if fx == 0.0 && fy == 0.0 {
                        p[a + ch]
                    } else {
                        let v = |k: usize| p[k + ch] as f64;
                        let top = v(a) + (v(b) - v(a)) * fx;
                        let bot = v(d) + (v(e) - v(d)) * fx;
                        (top + (bot - top) * fy) as f32
                    };
                }
            }
        }
    }
}

/// Tile-frame labels inside the window, in window coordinates, plus the
/// resulting image-level flag.
pub fn transform_labels(gts: &[Annotation], pose: &WindowPose) -> (Vec<Annotation>, bool) {
    let w = pose.w as f64;
    let kept: Vec<Annotation> = gts
        .iter()
        .filter_map(|a| {
            let (u, v) = pose.to_window(a.cx, a.cy);
            ((0.0..w).contains(&u) && (0.0..w).contains(&v)).then_some(Annotation {
                cx: u,
                cy: v,
                confidence: a.confidence,
            })
        })
        .collect();
    let has = !kept.is_empty();
    (kept, has)
}

/// A large labeled tile at its native resolution.
#[derive(Debug, Clone)]
pub struct Tile {
    pub name: String,
    pub raster: Raster,
    pub gts: Vec<Annotation>,
    pub gsd_cm_per_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Windows per tile.
    pub n_windows: usize,
    pub w: u32,
    pub seed: u64,
    pub to_gsd: f64,
    pub domain: Domain,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_windows: 100,
            w: DEFAULT_WINDOW,
            seed: 0,
            to_gsd: crate::scenegen::DEFAULT_GSD_CM,
            domain: Domain::Source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitReport {
    pub manifest: DatasetManifest,
    pub positives: usize,
    pub negatives: usize,
}

pub fn window_path(prefix: &str, tile: &str, k: usize) -> String {
    format!("{prefix}/{tile}_{k:06}.img.amap")
}

/// Rescales each tile, samples and extracts its windows, transfers labels,
/// writes window rasters to `store` and returns the real-stage manifest.
pub fn build_split(
    tiles: &[Tile],
    cfg: &SplitConfig,
    prefix: &str,
    store: &dyn RasterStore,
) -> Result<SplitReport> {
    let mut entries = Vec::new();
    for (ti, tile) in tiles.iter().enumerate() {
        let raster = rescale_gsd(&tile.raster, tile.gsd_cm_per_px, cfg.to_gsd)?;
        let gts = rescale_annotations(&tile.gts, tile.gsd_cm_per_px, cfg.to_gsd)?;
        let packed = PackedTile::new(&raster);
        let poses = sample_windows(
            raster.width(),
            raster.height(),
            cfg.n_windows,
            cfg.w,
            derive_seed(cfg.seed, ti as u64),
        )?;
        let built = packed.map_windows(&poses, |k, pose, window| {
            let path = window_path(prefix, &tile.name, k);
            store.save(&path, window)?;
            let (annotations, has_vehicles) = transform_labels(&gts, pose);
            Ok(ManifestEntry {
                image_path: path,
                map_path: None,
                width: cfg.w,
                height: cfg.w,
                gsd_cm_per_px: cfg.to_gsd,
                has_vehicles,
                annotations,
                domain_tag: cfg.domain,
                stage_tag: Stage::Real,
                weak_only: false,
            })
        })?;
        entries.extend(built);
    }
    let manifest = DatasetManifest::new(entries)?;
    let positives = manifest.positives();
    let negatives = manifest.len() - positives;
    log::info!("split {prefix}: {positives} positive, {negatives} negative windows");
    Ok(SplitReport {
        manifest,
        positives,
        negatives,
    })
}

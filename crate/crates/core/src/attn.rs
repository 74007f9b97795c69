//! Attention-map arithmetic: normalization, total-variation regularizers,
//! multi-resolution averaging, and the diffusion forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{bilinear, Raster};

/// A single-channel map whose values sum to one.
///
/// Held in `f64`: the regularizers compare distributions to 1e-9, which `f32`
/// raster storage cannot represent.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    width: u32,
    height: u32,
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps probabilities that already sum to one (within 1e-9).
    pub fn from_probs(width: u32, height: u32, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for {width}x{height}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self {
            width,
            height,
            probs,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Rescales a map to `[0, 1]`. The flag reports a constant input, which maps
/// to 0.5 everywhere.
pub fn minmax_normalize_flagged(m: &Raster) -> Result<(Raster, bool)> {
    m.ensure_single_channel()?;
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Ok((m.map(|_| 0.5), true));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    Ok((m.map(|v| ((v as f64 - lo) / span) as f32), false))
}

pub fn minmax_normalize(m: &Raster) -> Result<Raster> {
    minmax_normalize_flagged(m).map(|(r, _)| r)
}

/// `v / sum(v)` over a non-negative map.
pub fn to_distribution(m: &Raster) -> Result<Distribution> {
    m.ensure_single_channel()?;
    if m.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("attention map has negative values"));
    }
    let sum: f64 = m.data().iter().map(|&v| v as f64).sum();
    if sum <= 0.0 {
        return Err(Error::EmptyDistribution);
    }
    Ok(Distribution {
        width: m.width(),
        height: m.height(),
        probs: m.data().iter().map(|&v| v as f64 / sum).collect(),
    })
}

/// Total variation distance: half the L1 distance.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.width != q.width || p.height != q.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            p.width, p.height, q.width, q.height
        )));
    }
    Ok(0.5
        * p.probs
            .iter()
            .zip(&q.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Object regularizer: TV distance between the foreground-token map and the
/// category map, each min-max normalized and then turned into a distribution.
pub fn obj_loss(a_fg: &Raster, a_c: &Raster) -> Result<f64> {
    a_fg.ensure_same_shape(a_c)?;
    let p = to_distribution(&minmax_normalize(a_fg)?)?;
    let q = to_distribution(&minmax_normalize(a_c)?)?;
    tv_distance(&p, &q)
}

/// Background regularizer: TV distance between the background-token map and
/// the inverted category map `1 - A_c`.
pub fn bg_loss(a_bg: &Raster, a_c: &Raster) -> Result<f64> {
    a_bg.ensure_same_shape(a_c)?;
    let p = to_distribution(&minmax_normalize(a_bg)?)?;
    let q = to_distribution(&invert(&minmax_normalize(a_c)?))?;
    tv_distance(&p, &q)
}

/// `1 - v` elementwise.
pub fn invert(m: &Raster) -> Raster {
    m.map(|v| 1.0 - v)
}

/// The three normalized maps that make up an attention stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub category: Raster,
    pub foreground: Raster,
    pub background: Raster,
    /// Which of (category, foreground, background) were constant before normalization.
    pub constant: [bool; 3],
}

impl AttentionStack {
    /// Normalizes each map and checks that the shapes agree.
    pub fn new(category: &Raster, foreground: &Raster, background: &Raster) -> Result<Self> {
        category.ensure_same_shape(foreground)?;
        category.ensure_same_shape(background)?;
        let (c, kc) = minmax_normalize_flagged(category)?;
        let (f, kf) = minmax_normalize_flagged(foreground)?;
        let (b, kb) = minmax_normalize_flagged(background)?;
        Ok(Self {
            category: c,
            foreground: f,
            background: b,
            constant: [kc, kf, kb],
        })
    }

    /// Channel order: category, foreground, background.
    pub fn stacked(&self) -> Raster {
        Raster::stack(&[&self.category, &self.foreground, &self.background])
            .expect("stack members share a shape")
    }

    pub fn from_stacked(stacked: &Raster) -> Result<Self> {
        if stacked.channels() != 3 {
            return Err(Error::UnsupportedChannels(stacked.channels()));
        }
        Self::new(&stacked.channel(0), &stacked.channel(1), &stacked.channel(2))
    }
}

/// `L_obj + L_bg` for one background token. The denoising loss is not part of it.
pub fn reg_loss(stack: &AttentionStack) -> Result<f64> {
    Ok(obj_loss(&stack.foreground, &stack.category)? + bg_loss(&stack.background, &stack.category)?)
}

/// `L_obj` plus one `L_bg` term per supplied background token map.
pub fn reg_loss_multi(category: &Raster, foreground: &Raster, backgrounds: &[Raster]) -> Result<f64> {
    let mut total = obj_loss(foreground, category)?;
    for bg in backgrounds {
        total += bg_loss(bg, category)?;
    }
    Ok(total)
}

/// Corner-aligned bilinear resize of a single-channel map.
pub fn resize_bilinear(m: &Raster, out_w: u32, out_h: u32) -> Result<Raster> {
    m.ensure_single_channel()?;
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let (w, h) = (m.width() as usize, m.height() as usize);
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let plane = m.plane(0);
    Ok(Raster::from_fn(out_w, out_h, 1, |_, y, x| {
        bilinear(plane, w, h, x as f64 * sx, y as f64 * sy) as f32
    }))
}

/// Resamples every map to `out_size x out_size`, averages them pixelwise and
/// min-max normalizes the mean.
pub fn average_resolutions(maps: &[Raster], out_size: u32) -> Result<Raster> {
    if maps.is_empty() {
        return Err(Error::invalid("no attention maps to average"));
    }
    let n = out_size as usize * out_size as usize;
    let mut acc = vec![0.0f64; n];
    for m in maps {
        let r = resize_bilinear(m, out_size, out_size)?;
        for (a, &v) in acc.iter_mut().zip(r.data()) {
            *a += v as f64;
        }
    }
    let k = maps.len() as f64;
    let mean = Raster::new(
        out_size,
        out_size,
        1,
        acc.into_iter().map(|v| (v / k) as f32).collect(),
    )?;
    minmax_normalize(&mean)
}

/// Variance schedule of the forward diffusion process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_BETA_START: f64 = 0.00085;
    pub const DEFAULT_BETA_END: f64 = 0.012;
    pub const DEFAULT_STEPS: usize = 1000;

    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar(t)` for `t` in `0..=T`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::invalid(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            ))),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
            Self::DEFAULT_STEPS,
        )
        .expect("default schedule is valid")
    }
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps`.
pub fn forward_noise_with(z0: &Raster, alpha_bar: f64, eps: &Raster) -> Result<Raster> {
    z0.ensure_same_shape(eps)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (s * z as f64 + n * e as f64) as f32)
        .collect();
    Raster::new(z0.width(), z0.height(), z0.channels(), data)
}

/// Samples `z_t` given `z0` and the noise draw `eps`.
pub fn forward_noise(z0: &Raster, t: usize, schedule: &NoiseSchedule, eps: &Raster) -> Result<Raster> {
    forward_noise_with(z0, schedule.alpha_bar(t)?, eps)
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss(eps_true: &Raster, eps_pred: &Raster) -> Result<f64> {
    eps_true.ensure_same_shape(eps_pred)?;
    let n = eps_true.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sse / n as f64)
}

//! The raster data model and its on-disk encoding.
//!
//! A [`Raster`] is a `width x height x channels` grid of `f32` values stored
//! channel-major: `data[(c * height + y) * width + x]`. Images, attention maps
//! and attention stacks all use it.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "AMAP0001"
//! 8       4     width    (u32)
//! 12      4     height   (u32)
//! 16      4     channels (u32)
//! 20      4*n   payload  (f32, channel-major, n = width*height*channels)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 8] = b"AMAP0001";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f32>,
}

fn checked_len(width: u32, height: u32, channels: u32) -> Result<usize> {
    (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels as usize))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or(Error::SizeOverflow {
            width,
            height,
            channels,
        })
}

impl Raster {
    /// Builds a raster, rejecting wrong payload lengths and non-finite values.
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(width, height, channels)?;
        if data.len() != len {
            return Err(Error::DataLength {
                width,
                height,
                channels,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32, channels: u32) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: f32) -> Self {
        let len = width as usize * height as usize * channels as usize;
        Self {
            width,
            height,
            channels,
            data: vec![value; len],
        }
    }

    /// Builds a raster from `f(channel, y, x)`. Non-finite results are replaced by 0.
    pub fn from_fn(
        width: u32,
        height: u32,
        channels: u32,
        mut f: impl FnMut(u32, u32, u32) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    data.push(if v.is_finite() { v } else { 0.0 });
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Stacks single-channel rasters of equal size into one multi-channel raster.
    pub fn stack(planes: &[&Raster]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero planes"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(w as usize * h as usize * planes.len());
        let mut channels = 0u32;
        for p in planes {
            if p.width != w || p.height != h {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {}x{} with {}x{}",
                    w, h, p.width, p.height
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Self {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Callers must keep every value finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn plane(&self, channel: u32) -> &[f32] {
        let n = self.plane_len();
        let start = channel as usize * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, channel: u32) -> &mut [f32] {
        let n = self.plane_len();
        let start = channel as usize * n;
        &mut self.data[start..start + n]
    }

    /// Copies one channel out as a single-channel raster.
    pub fn channel(&self, channel: u32) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(channel).to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, channel: u32, y: u32, x: u32) -> f32 {
        self.data[(channel as usize * self.height as usize + y as usize) * self.width as usize
            + x as usize]
    }

    #[inline]
    pub fn set(&mut self, channel: u32, y: u32, x: u32, v: f32) {
        let idx = (channel as usize * self.height as usize + y as usize) * self.width as usize
            + x as usize;
        self.data[idx] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub(crate) fn ensure_single_channel(&self) -> Result<()> {
        if self.channels == 1 {
            Ok(())
        } else {
            Err(Error::UnsupportedChannels(self.channels))
        }
    }

    /// Applies `f` elementwise, keeping the shape.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Bilinear sample of one channel at continuous pixel coordinates, where
    /// pixel `(x, y)` has its center at integer coordinates. Out-of-range
    /// coordinates clamp to the border.
    #[inline]
    pub fn sample_bilinear(&self, channel: u32, x: f64, y: f64) -> f64 {
        let plane = self.plane(channel);
        bilinear(plane, self.width as usize, self.height as usize, x, y)
    }

    /// Serializes to the binary format described in the module docs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_finite()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            let mut found = [0u8; 8];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(Error::BadMagic { found });
        }
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&bytes[..8]);
        if &magic != RASTER_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: (HEADER_LEN - 8) as u64,
                found: (bytes.len() - 8) as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height, channels) = (word(8), word(12), word(16));
        let len = checked_len(width, height, channels)?;
        let payload = &bytes[HEADER_LEN..];
        let expected = len as u64 * 4;
        if (payload.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len() as u64,
            });
        }
        let data = payload[..len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Raster::new(width, height, channels, data)
    }
}

/// Bilinear interpolation over a row-major plane with border clamping.
#[inline]
pub(crate) fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = plane[y0 * w + x0] as f64;
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    let v10 = plane[y0 * w + x1] as f64;
    let v01 = plane[y1 * w + x0] as f64;
    let v11 = plane[y1 * w + x1] as f64;
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = raster.to_bytes()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Raster::from_bytes(&bytes)
}

/// Writes an 8-bit PNG with independent min-max scaling per channel.
/// Constant channels render as mid-gray.
pub fn export_preview(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match raster.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let pixels = preview_pixels(raster)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width(), raster.height());
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Interleaved 8-bit pixels as written by [`export_preview`].
pub fn preview_pixels(raster: &Raster) -> Result<Vec<u8>> {
    let c = raster.channels();
    if c != 1 && c != 3 {
        return Err(Error::UnsupportedChannels(c));
    }
    let n = raster.plane_len();
    let mut out = vec![0u8; n * c as usize];
    for ch in 0..c {
        let plane = raster.plane(ch);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        for (i, &v) in plane.iter().enumerate() {
            let scaled = if hi > lo {
                (v - lo) as f64 / (hi - lo) as f64
            } else {
                0.5
            };
            out[i * c as usize + ch as usize] = (scaled * 255.0).round() as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_raster_layout() {
        // 8-byte magic + three u32 dimensions + one f32.
        let r = Raster::new(1, 1, 1, vec![0.0]).unwrap();
        let bytes = r.to_bytes().unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[20..], &[0, 0, 0, 0]);
        assert_eq!(&bytes[..8], b"AMAP0001");
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(Raster::from_bytes(&bytes).unwrap(), r);
    }

    #[test]
    fn payload_bytes_match_hand_encoding() {
        // 0.25 = 0x3E800000, 0.75 = 0x3F400000
        let r = Raster::new(2, 1, 1, vec![0.25, 0.75]).unwrap();
        let bytes = r.to_bytes().unwrap();
        assert_eq!(&bytes[20..], &[0x00, 0x00, 0x80, 0x3E, 0x00, 0x00, 0x40, 0x3F]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Raster::zeros(1, 1, 1).to_bytes().unwrap();
        bytes[..8].copy_from_slice(b"XXXX0000");
        assert!(matches!(
            Raster::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RASTER_MAGIC);
        for v in [10u32, 10, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for _ in 0..50 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        match Raster::from_bytes(&bytes) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 400);
                assert_eq!(found, 200);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_size_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RASTER_MAGIC);
        for v in [u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            Raster::from_bytes(&bytes),
            Err(Error::SizeOverflow { .. })
        ));
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let mut r = Raster::zeros(2, 2, 1);
        r.plane_mut(0)[3] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.amap");
        assert!(matches!(
            write_raster(&r, &path),
            Err(Error::NonFinite { index: 3 })
        ));
        assert!(!path.exists());
        assert!(Raster::new(1, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.amap");
        let r = Raster::from_fn(5, 3, 2, |c, y, x| (c * 100 + y * 10 + x) as f32 * 0.1);
        write_raster(&r, &path).unwrap();
        assert_eq!(read_raster(&path).unwrap(), r);
    }

    #[test]
    fn bilinear_is_exact_on_grid_and_linear_between() {
        let r = Raster::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.sample_bilinear(0, 1.0, 1.0), 3.0);
        assert!((r.sample_bilinear(0, 0.5, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(r.sample_bilinear(0, -4.0, 0.0), 0.0);
    }

    #[test]
    fn preview_scaling() {
        let constant = Raster::filled(3, 1, 1, 7.0);
        assert_eq!(preview_pixels(&constant).unwrap(), vec![128, 128, 128]);

        let ramp = Raster::new(4, 1, 1, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let px = preview_pixels(&ramp).unwrap();
        assert!(px.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((px[0], px[3]), (0, 255));

        let rgb = Raster::new(1, 2, 3, vec![0.0, 1.0, 5.0, 5.0, 1.0, 0.0]).unwrap();
        assert_eq!(preview_pixels(&rgb).unwrap(), vec![0, 128, 255, 255, 128, 0]);

        assert!(matches!(
            preview_pixels(&Raster::zeros(1, 1, 2)),
            Err(Error::UnsupportedChannels(2))
        ));
    }

    #[test]
    fn preview_png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        export_preview(&Raster::from_fn(8, 8, 3, |c, y, x| (c + y + x) as f32), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}

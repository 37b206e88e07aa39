//! Scanpath image encoding.
//!
//! Saccades are drawn first as straight segments coloured along a blue to
//! green ramp in temporal order. Fixation markers go on top: the marker's
//! shape, colour and size encode its duration level.

pub mod raster;

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Scanpath, MIN_FIXATION_MS};
use raster::Point;

pub type Rgb = [u8; 3];

pub const RED: Rgb = [255, 0, 0];
pub const PINK: Rgb = [255, 105, 180];
pub const YELLOW: Rgb = [255, 255, 0];
pub const WHITE: Rgb = [255, 255, 255];

/// Height at which `saccade_width` is specified.
pub const SACCADE_REFERENCE_HEIGHT: f64 = 1050.0;
/// Height at which `marker_radius_base` is specified.
pub const MARKER_REFERENCE_HEIGHT: f64 = 224.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("fixation duration {0} ms is below the 110 ms floor")]
    BelowFloor(f64),
    #[error("saccade index {index} out of range for {count} saccades")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("scanpath has no fixations")]
    EmptyScanpath,
    #[error("invalid render configuration: {0}")]
    InvalidConfig(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fixation duration bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1 = 1,
    L2 = 2,
    L3 = 3,
    L4 = 4,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1, Level::L2, Level::L3, Level::L4];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn color(self) -> Rgb {
        match self {
            Level::L1 => RED,
            Level::L2 => PINK,
            Level::L3 => YELLOW,
            Level::L4 => WHITE,
        }
    }
}

/// `[110,250) -> 1`, `[250,400) -> 2`, `[400,550) -> 3`, `>= 550 -> 4`.
pub fn level_of(duration_ms: f64) -> Result<Level, RenderError> {
    if !(duration_ms >= MIN_FIXATION_MS) {
        return Err(RenderError::BelowFloor(duration_ms));
    }
    Ok(if duration_ms < 250.0 {
        Level::L1
    } else if duration_ms < 400.0 {
        Level::L2
    } else if duration_ms < 550.0 {
        Level::L3
    } else {
        Level::L4
    })
}

/// Colour of saccade `index` out of `count`, linear from (0,0,255) to (0,255,128).
pub fn saccade_color(index: usize, count: usize) -> Result<Rgb, RenderError> {
    if index >= count {
        return Err(RenderError::IndexOutOfRange { index, count });
    }
    let t = if count > 1 {
        index as f64 / (count - 1) as f64
    } else {
        0.0
    };
    Ok([0, (255.0 * t).round() as u8, (255.0 * (1.0 - t / 2.0)).round() as u8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Rasterize straight into the output size.
    Direct,
    /// Rasterize at screen resolution, then area-resample to the output size.
    ScreenThenDownsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub out_w: usize,
    pub out_h: usize,
    pub background: Rgb,
    /// Line width in px at a 1050 px tall canvas.
    pub saccade_width: f64,
    /// Marker radii for levels 1-4 in px at a 224 px tall canvas.
    pub marker_radius_base: [f64; 4],
    /// 4x4 supersampling with a box filter.
    pub antialias: bool,
    pub mode: RenderMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            out_w: 224,
            out_h: 224,
            background: [0, 0, 0],
            saccade_width: 2.0,
            marker_radius_base: [3.0, 4.0, 5.0, 6.0],
            antialias: false,
            mode: RenderMode::Direct,
        }
    }
}

impl RenderConfig {
    pub fn square(size: usize) -> Self {
        Self {
            out_w: size,
            out_h: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.out_w < 32 || self.out_h < 32 {
            return Err(RenderError::InvalidConfig(format!(
                "output must be at least 32x32, got {}x{}",
                self.out_w, self.out_h
            )));
        }
        if !(self.saccade_width >= 1.0) {
            return Err(RenderError::InvalidConfig("saccade_width must be >= 1".into()));
        }
        let r = self.marker_radius_base;
        if !(r[0] > 0.0 && r.windows(2).all(|w| w[1] > w[0])) {
            return Err(RenderError::InvalidConfig(
                "marker radii must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major RGB8 raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanpathImage {
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<u8>,
}

impl ScanpathImage {
    pub fn new(w: usize, h: usize, fill: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            pixels.extend_from_slice(&fill);
        }
        Self { w, h, pixels }
    }

    pub fn from_pixels(w: usize, h: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == w * h * 3).then_some(Self { w, h, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let o = (y * self.w + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let o = (y * self.w + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// Box filter over `k x k` blocks; dimensions must be multiples of `k`.
    pub fn box_downsample(&self, k: usize) -> Self {
        assert!(k >= 1 && self.w % k == 0 && self.h % k == 0);
        let (w, h) = (self.w / k, self.h / k);
        let n = (k * k) as u32;
        let mut out = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                for dy in 0..k {
                    for dx in 0..k {
                        let p = self.get(x * k + dx, y * k + dy);
                        for c in 0..3 {
                            acc[c] += u32::from(p[c]);
                        }
                    }
                }
                out.extend(acc.iter().map(|&a| ((a + n / 2) / n) as u8));
            }
        }
        Self { w, h, pixels: out }
    }

    /// Area-weighted resampling to an arbitrary size.
    pub fn area_resample(&self, w: usize, h: usize) -> Self {
        let wx = area_weights(self.w, w);
        let wy = area_weights(self.h, h);
        let mut rows = vec![0.0f64; self.h * w * 3];
        for y in 0..self.h {
            for (ox, taps) in wx.iter().enumerate() {
                for c in 0..3 {
                    rows[(y * w + ox) * 3 + c] = taps
                        .iter()
                        .map(|&(sx, wt)| wt * f64::from(self.pixels[(y * self.w + sx) * 3 + c]))
                        .sum();
                }
            }
        }
        let mut out = Vec::with_capacity(w * h * 3);
        for taps in &wy {
            for ox in 0..w {
                for c in 0..3 {
                    let v: f64 = taps.iter().map(|&(sy, wt)| wt * rows[(sy * w + ox) * 3 + c]).sum();
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Self { w, h, pixels: out }
    }
}

/// For each output cell, the overlapping source cells and their normalized weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (a, b) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let mut taps = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / ratio));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Rasterizes `sp` into a `canvas_w x canvas_h` image, sizing strokes and
/// markers from the canvas height.
fn rasterize(sp: &Scanpath, cfg: &RenderConfig, canvas_w: usize, canvas_h: usize) -> Result<ScanpathImage, RenderError> {
    let mut img = ScanpathImage::new(canvas_w, canvas_h, cfg.background);
    let sx = canvas_w as f64 / sp.screen_w;
    let sy = canvas_h as f64 / sp.screen_h;
    let at = |cx: f64, cy: f64| Point::new(cx * sx, cy * sy);

    // Thinner strokes would leave gaps under pixel-center sampling.
    let width = (cfg.saccade_width * canvas_h as f64 / SACCADE_REFERENCE_HEIGHT).max(1.0);
    let count = sp.fixations.len().saturating_sub(1);
    for (i, pair) in sp.fixations.windows(2).enumerate() {
        let color = saccade_color(i, count)?;
        raster::stroke_segment(&mut img, at(pair[0].cx, pair[0].cy), at(pair[1].cx, pair[1].cy), width, color);
    }

    let size_scale = canvas_h as f64 / MARKER_REFERENCE_HEIGHT;
    for f in &sp.fixations {
        let level = level_of(f.duration())?;
        let r = cfg.marker_radius_base[level.index()] * size_scale;
        let c = at(f.cx, f.cy);
        match level {
            Level::L1 => raster::fill_disk(&mut img, c, r, RED),
            Level::L2 => raster::fill_polygon(&mut img, &raster::star(c, r), PINK),
            Level::L3 => raster::fill_polygon(&mut img, &raster::pentagon(c, r), YELLOW),
            Level::L4 => raster::fill_cross(&mut img, c, r, (r / 2.0).max(2.0), WHITE),
        }
    }
    Ok(img)
}

/// Encodes a scanpath as an RGB image.
pub fn render_scanpath(sp: &Scanpath, cfg: &RenderConfig) -> Result<ScanpathImage, RenderError> {
    cfg.validate()?;
    if sp.fixations.is_empty() {
        return Err(RenderError::EmptyScanpath);
    }
    let ss = if cfg.antialias { 4 } else { 1 };
    match cfg.mode {
        RenderMode::Direct => {
            let img = rasterize(sp, cfg, cfg.out_w * ss, cfg.out_h * ss)?;
            Ok(if ss > 1 { img.box_downsample(ss) } else { img })
        }
        RenderMode::ScreenThenDownsample => {
            let (w, h) = (sp.screen_w.round() as usize * ss, sp.screen_h.round() as usize * ss);
            Ok(rasterize(sp, cfg, w, h)?.area_resample(cfg.out_w, cfg.out_h))
        }
    }
}

/// Writes an 8-bit RGB PNG without alpha.
pub fn write_png(img: &ScanpathImage, path: &Path) -> Result<(), RenderError> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.w as u32, img.h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ScanpathImage, RenderError> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RenderError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let pixels = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(RenderError::Png("unexpanded palette".into())),
    };
    ScanpathImage::from_pixels(w, h, pixels).ok_or_else(|| RenderError::Png("unexpected buffer size".into()))
}

fn png_err(e: impl std::fmt::Display) -> RenderError {
    RenderError::Png(e.to_string())
}

//! Gradient-weighted class activation maps.

use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{images_to_tensor, ForwardCtx, MiniVgg, NnError, Scalar, Tensor};
use crate::render::{write_png, RenderError, ScanpathImage};
use crate::types::RelevanceLabel;

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("no heatmaps to average")]
    EmptySet,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("block {block} does not exist (model has {count})")]
    InvalidBlock { block: usize, count: usize },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Row-major map of non-negative values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub w: usize,
    pub h: usize,
    pub values: Vec<f64>,
    pub trial_id: Option<String>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Scales so the maximum is 1; an all-zero map stays all zero.
    pub fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
        self
    }

    /// Bilinear resampling with pixel-centre alignment and clamped edges.
    pub fn upsample(&self, w: usize, h: usize) -> Self {
        let sx = self.w as f64 / w as f64;
        let sy = self.h as f64 / h as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut values = Vec::with_capacity(w * h);
        for y in 0..h {
            let (y0, y1, fy) = axis(y, sy, self.h);
            for x in 0..w {
                let (x0, x1, fx) = axis(x, sx, self.w);
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Self {
            w,
            h,
            values,
            trial_id: self.trial_id.clone(),
        }
    }
}

/// Grad-CAM at the resolution of the chosen block's output, normalized.
///
/// The target score is the pre-sigmoid logit for the relevant class and its
/// negation for the irrelevant class. `block` defaults to the last block.
pub fn gradcam_raw<S: Scalar>(
    model: &MiniVgg<S>,
    image: &ScanpathImage,
    target: RelevanceLabel,
    block: Option<usize>,
) -> Result<Heatmap, GradcamError> {
    if model.epochs_trained == 0 {
        return Err(GradcamError::UntrainedModel);
    }
    let count = model.block_ends.len();
    let block = block.unwrap_or(count - 1);
    let split = *model.block_ends.get(block).ok_or(GradcamError::InvalidBlock { block, count })?;
    let x = images_to_tensor::<S>(&[image])?;
    model.check_input(&x)?;
    let mut ctx = ForwardCtx::eval();
    let (acts, _) = model.net.forward_range(0..split + 1, &x, &mut ctx)?;
    let (_, caches) = model.net.forward_range(split + 1..model.logit_layer_end(), &acts, &mut ctx)?;
    let sign = if target.is_relevant() { S::ONE } else { -S::ONE };
    let seed = Tensor::from_vec(&[1, 1], vec![sign])?;
    let (grad, _) = model.net.backward_range(split + 1, &caches, &seed, true)?;
    let grad = grad.expect("input gradient requested");

    let (_, c, h, w) = acts.dims4()?;
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for k in 0..c {
        let g = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        let a = &acts.data()[k * plane..(k + 1) * plane];
        for (m, v) in cam.iter_mut().zip(a) {
            *m += alpha * v.to_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Heatmap {
        w,
        h,
        values: cam,
        trial_id: None,
    }
    .normalized())
}

/// Grad-CAM upsampled to the image size and renormalized to [0, 1].
pub fn gradcam<S: Scalar>(
    model: &MiniVgg<S>,
    image: &ScanpathImage,
    target: RelevanceLabel,
    block: Option<usize>,
) -> Result<Heatmap, GradcamError> {
    let raw = gradcam_raw(model, image, target, block)?;
    Ok(raw.upsample(image.w, image.h).normalized())
}

/// Maps for many images in parallel, returned in input order.
pub fn gradcam_batch<S: Scalar>(
    model: &MiniVgg<S>,
    images: &[(&str, &ScanpathImage)],
    target: RelevanceLabel,
    block: Option<usize>,
) -> Result<Vec<Heatmap>, GradcamError> {
    images
        .par_iter()
        .map(|(id, img)| {
            let mut hm = gradcam(model, img, target, block)?;
            hm.trial_id = Some(id.to_string());
            Ok(hm)
        })
        .collect()
}

/// Pixelwise mean of normalized maps, renormalized.
///
/// Each pixel's values are summed in sorted order, so the result does not
/// depend on the order of `maps`.
pub fn average_heatmap(maps: &[Heatmap]) -> Result<Heatmap, GradcamError> {
    let first = maps.first().ok_or(GradcamError::EmptySet)?;
    for m in maps {
        if (m.w, m.h) != (first.w, first.h) {
            return Err(GradcamError::DimMismatch(first.w, first.h, m.w, m.h));
        }
    }
    let n = maps.len() as f64;
    let normalized: Vec<Heatmap> = maps.iter().cloned().map(Heatmap::normalized).collect();
    let mut column = Vec::with_capacity(maps.len());
    let values = (0..first.values.len())
        .map(|i| {
            column.clear();
            column.extend(normalized.iter().map(|m| m.values[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect();
    Ok(Heatmap {
        w: first.w,
        h: first.h,
        values,
        trial_id: None,
    }
    .normalized())
}

/// Blue (0) to red (1) colour ramp.
pub fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// `(1 - alpha) * image + alpha * ramp(heatmap)`, per channel, rounded.
pub fn overlay(img: &ScanpathImage, hm: &Heatmap, alpha: f64) -> Result<ScanpathImage, GradcamError> {
    if (img.w, img.h) != (hm.w, hm.h) {
        return Err(GradcamError::DimMismatch(img.w, img.h, hm.w, hm.h));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradcamError::InvalidAlpha(alpha));
    }
    let mut out = img.clone();
    for (px, &v) in out.pixels.chunks_exact_mut(3).zip(&hm.values) {
        for (c, r) in px.iter_mut().zip(ramp(v)) {
            *c = ((1.0 - alpha) * f64::from(*c) + alpha * f64::from(r)).round() as u8;
        }
    }
    Ok(out)
}

pub fn write_heatmap_png(hm: &Heatmap, path: &Path) -> Result<(), GradcamError> {
    let mut img = ScanpathImage::new(hm.w, hm.h, [0, 0, 0]);
    for (px, &v) in img.pixels.chunks_exact_mut(3).zip(&hm.values) {
        px.copy_from_slice(&ramp(v));
    }
    Ok(write_png(&img, path)?)
}

/// Share of total heatmap mass in each horizontal and vertical third.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMass {
    pub left: f64,
    pub center: f64,
    pub right: f64,
    pub top: f64,
    pub middle: f64,
    pub bottom: f64,
}

/// Third containing the centre of pixel `i` on an axis of length `len`.
fn third(i: usize, len: usize) -> usize {
    ((3 * (2 * i + 1)) / (2 * len)).min(2)
}

pub fn region_mass(hm: &Heatmap) -> RegionMass {
    let mut cols = [0.0; 3];
    let mut rows = [0.0; 3];
    for y in 0..hm.h {
        for x in 0..hm.w {
            let v = hm.get(x, y);
            cols[third(x, hm.w)] += v;
            rows[third(y, hm.h)] += v;
        }
    }
    let total: f64 = cols.iter().sum();
    let frac = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    RegionMass {
        left: frac(cols[0]),
        center: frac(cols[1]),
        right: frac(cols[2]),
        top: frac(rows[0]),
        middle: frac(rows[1]),
        bottom: frac(rows[2]),
    }
}

/// CSV `name,left,center,right,top,middle,bottom`.
pub fn write_region_csv<W: Write>(mut w: W, rows: &[(String, RegionMass)]) -> io::Result<()> {
    writeln!(w, "name,left,center,right,top,middle,bottom")?;
    for (name, m) in rows {
        writeln!(w, "{name},{},{},{},{},{},{}", m.left, m.center, m.right, m.top, m.middle, m.bottom)?;
    }
    Ok(())
}

//! Velocity-threshold (I-VT) fixation detection.
//!
//! Each sample is classified by the point-to-point velocity of the step that
//! reaches it. Maximal runs of sub-threshold samples become fixations; runs
//! shorter than the duration floor are dropped. Nearby fixations are never
//! merged.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Fixation, GazeSample, MIN_FIXATION_MS};

#[derive(Debug, Error, PartialEq)]
pub enum FixdetError {
    #[error("samples are not separated in time (t = {0} ms)")]
    ZeroTimeDelta(f64),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid I-VT configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvtConfig {
    /// Pixels per second.
    pub velocity_threshold: f64,
    /// Milliseconds.
    pub min_fixation_duration: f64,
    pub drop_invalid_samples: bool,
}

impl Default for IvtConfig {
    fn default() -> Self {
        Self {
            velocity_threshold: 1000.0,
            min_fixation_duration: MIN_FIXATION_MS,
            drop_invalid_samples: true,
        }
    }
}

impl IvtConfig {
    pub fn validate(&self) -> Result<(), FixdetError> {
        if !(self.velocity_threshold > 0.0) {
            return Err(FixdetError::InvalidConfig("velocity_threshold must be > 0"));
        }
        if !(self.min_fixation_duration >= 0.0) {
            return Err(FixdetError::InvalidConfig("min_fixation_duration must be >= 0"));
        }
        Ok(())
    }
}

/// Euclidean speed between two samples in px/s.
pub fn point_velocity(prev: &GazeSample, next: &GazeSample) -> Result<f64, FixdetError> {
    let dt = next.t - prev.t;
    if !(dt > 0.0) {
        return Err(FixdetError::ZeroTimeDelta(next.t));
    }
    let dist = (next.x - prev.x).hypot(next.y - prev.y);
    Ok(dist / (dt / 1000.0))
}

fn usable_samples(samples: &[GazeSample], cfg: &IvtConfig) -> Vec<GazeSample> {
    if cfg.drop_invalid_samples {
        samples.iter().copied().filter(|s| s.valid).collect()
    } else {
        samples.to_vec()
    }
}

/// Per-sample fixation flags. The first sample inherits the class of the second.
pub fn classify_samples(samples: &[GazeSample], cfg: &IvtConfig) -> Result<Vec<bool>, FixdetError> {
    cfg.validate()?;
    let samples = usable_samples(samples, cfg);
    classify_filtered(&samples, cfg.velocity_threshold)
}

fn classify_filtered(samples: &[GazeSample], threshold: f64) -> Result<Vec<bool>, FixdetError> {
    if samples.len() < 2 {
        return Err(FixdetError::TooFewSamples(samples.len()));
    }
    let mut flags = Vec::with_capacity(samples.len());
    flags.push(false);
    for pair in samples.windows(2) {
        flags.push(point_velocity(&pair[0], &pair[1])? < threshold);
    }
    flags[0] = flags[1];
    Ok(flags)
}

/// Drops fixations shorter than `min_duration` ms.
pub fn filter_by_duration(fixations: &[Fixation], min_duration: f64) -> Vec<Fixation> {
    fixations
        .iter()
        .copied()
        .filter(|f| f.duration() >= min_duration)
        .collect()
}

/// Runs I-VT over time-ordered samples.
pub fn detect_fixations(samples: &[GazeSample], cfg: &IvtConfig) -> Result<Vec<Fixation>, FixdetError> {
    cfg.validate()?;
    let samples = usable_samples(samples, cfg);
    let flags = classify_filtered(&samples, cfg.velocity_threshold)?;

    let mut candidates = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < samples.len() && flags[i] {
            i += 1;
        }
        let run = &samples[start..i];
        let n = run.len() as f64;
        let cx = run.iter().map(|s| s.x).sum::<f64>() / n;
        let cy = run.iter().map(|s| s.y).sum::<f64>() / n;
        candidates.push(Fixation::new(cx, cy, run[0].t, run[run.len() - 1].t));
    }
    Ok(filter_by_duration(&candidates, cfg.min_fixation_duration))
}

/// Writes fixations as CSV: `trial_id,index,cx,cy,t_start,t_end,duration`.
pub fn write_fixation_csv<W: Write>(mut w: W, trial_id: &str, fixations: &[Fixation]) -> io::Result<()> {
    writeln!(w, "trial_id,index,cx,cy,t_start,t_end,duration")?;
    for (i, f) in fixations.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            trial_id,
            i,
            f.cx,
            f.cy,
            f.t_start,
            f.t_end,
            f.duration()
        )?;
    }
    Ok(())
}

/// Reads the CSV written by [`write_fixation_csv`].
pub fn read_fixation_csv(text: &str) -> io::Result<Vec<Fixation>> {
    let bad = |line: usize| io::Error::new(io::ErrorKind::InvalidData, format!("fixation csv line {line}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad(i + 1));
        }
        let num = |k: usize| cols[k].trim().parse::<f64>().map_err(|_| bad(i + 1));
        out.push(Fixation::new(num(2)?, num(3)?, num(4)?, num(5)?));
    }
    Ok(out)
}

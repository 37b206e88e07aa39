//! Behavioural scanpath simulator.
//!
//! Reading trials sweep every body line left to right; skimming trials jump
//! down the page in multi-line sweeps and glance at the last lines. Both open
//! with a pass over the headline and (by default) end with a long dwell in the
//! lower-right corner, so neither class owns a region of the screen outright.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{build_manifest, DatasetManifest, ManifestError, TrialMeta};
use crate::types::{Fixation, GazeSample, RelevanceLabel, Scanpath, Screen, MIN_FIXATION_MS};

/// Sampling interval of emitted gaze logs (250 Hz).
pub const SAMPLE_INTERVAL_MS: f64 = 4.0;

/// Centroids are snapped to this grid so that averaging identical gaze
/// samples reproduces them exactly.
const COORD_QUANTUM: f64 = 0.125;

/// Consecutive fixations closer than this would merge under I-VT.
const MIN_FIXATION_SEPARATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub median_ms: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub screen: Screen,
    pub margin_x: f64,
    pub margin_y: f64,
    pub line_height: f64,
    pub n_lines: usize,
    pub n_lines_spread: usize,
    pub reading_duration: DurationDist,
    pub skimming_duration: DurationDist,
    pub saccade_min: f64,
    pub saccade_max: f64,
    pub sweep_min_lines: usize,
    pub sweep_max_lines: usize,
    pub jitter_sigma: f64,
    pub terminal_dwell: bool,
    pub dwell_fixations: usize,
    pub dwell_min_ms: f64,
    /// Dwell anchor as fractions of screen width and height.
    pub dwell_anchor: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            screen: Screen::default(),
            margin_x: 0.15,
            margin_y: 0.12,
            line_height: 32.0,
            n_lines: 14,
            n_lines_spread: 2,
            reading_duration: DurationDist {
                median_ms: 220.0,
                sigma: 0.35,
            },
            skimming_duration: DurationDist {
                median_ms: 160.0,
                sigma: 0.35,
            },
            saccade_min: 60.0,
            saccade_max: 110.0,
            sweep_min_lines: 2,
            sweep_max_lines: 5,
            jitter_sigma: 6.0,
            terminal_dwell: true,
            dwell_fixations: 2,
            dwell_min_ms: 550.0,
            dwell_anchor: (0.93, 0.93),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid synth configuration: {0}")]
pub struct SynthConfigError(pub String);

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthConfigError> {
        let bad = |m: &str| Err(SynthConfigError(m.into()));
        if !(self.line_height > 0.0) {
            return bad("line_height must be > 0");
        }
        if !(self.screen.w > 0.0 && self.screen.h > 0.0) {
            return bad("screen must have positive size");
        }
        if !(0.0..0.5).contains(&self.margin_x) || !(0.0..0.5).contains(&self.margin_y) {
            return bad("margins must lie in [0, 0.5)");
        }
        if self.n_lines < self.n_lines_spread + 4 {
            return bad("n_lines - n_lines_spread must be at least 4");
        }
        let max_lines = self.n_lines + self.n_lines_spread;
        if self.screen.h * self.margin_y + self.line_height * max_lines as f64 > self.screen.h * (1.0 - self.margin_y) {
            return bad("text does not fit inside the vertical margins");
        }
        if !(self.saccade_min > MIN_FIXATION_SEPARATION && self.saccade_max >= self.saccade_min) {
            return bad("saccade range must satisfy 10 < min <= max");
        }
        if self.sweep_min_lines < 1 || self.sweep_max_lines < self.sweep_min_lines {
            return bad("sweep range must satisfy 1 <= min <= max");
        }
        for d in [self.reading_duration, self.skimming_duration] {
            if !(d.median_ms > 0.0 && d.sigma >= 0.0 && d.sigma.is_finite()) {
                return bad("duration medians must be > 0 and sigmas >= 0");
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be finite and >= 0");
        }
        if !(self.dwell_min_ms >= MIN_FIXATION_MS) {
            return bad("dwell_min_ms must be at least the fixation floor");
        }
        Ok(())
    }

    pub fn text_left(&self) -> f64 {
        self.screen.w * self.margin_x
    }

    pub fn text_width(&self) -> f64 {
        self.screen.w * (1.0 - 2.0 * self.margin_x)
    }

    /// Vertical centre of text line `line` (0 is the headline).
    pub fn line_y(&self, line: usize) -> f64 {
        self.screen.h * self.margin_y + self.line_height * (line as f64 + 0.5)
    }
}

/// Builds fixations with realistic timing, jitter and screen clamping.
struct Builder<'a> {
    cfg: &'a SynthConfig,
    rng: &'a mut ChaCha8Rng,
    jitter: Normal<f64>,
    points: Vec<(f64, f64, f64)>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a SynthConfig, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            cfg,
            rng,
            jitter: Normal::new(0.0, cfg.jitter_sigma).expect("sigma validated"),
            points: Vec::new(),
        }
    }

    fn duration(&mut self, dist: DurationDist) -> f64 {
        let d = LogNormal::new(dist.median_ms.ln(), dist.sigma).expect("sigma validated");
        // Resample until the draw clears the fixation floor.
        loop {
            let v = d.sample(self.rng);
            if v >= MIN_FIXATION_MS {
                return v;
            }
        }
    }

    /// Adds a jittered fixation at `(x, y)`.
    fn push(&mut self, x: f64, y: f64, duration: f64) {
        let (w, h) = (self.cfg.screen.w, self.cfg.screen.h);
        let mut attempt = 0;
        loop {
            let jx = x + self.jitter.sample(self.rng);
            let jy = y + self.jitter.sample(self.rng);
            let p = (quantize(jx.clamp(0.0, w - 1.0)), quantize(jy.clamp(0.0, h - 1.0)));
            let far_enough = self
                .points
                .last()
                .is_none_or(|&(px, py, _)| (p.0 - px).hypot(p.1 - py) >= MIN_FIXATION_SEPARATION);
            if far_enough {
                self.points.push((p.0, p.1, duration));
                return;
            }
            attempt += 1;
            if attempt >= 64 {
                // Deterministic fallback: step away from the previous point.
                let &(px, py, _) = self.points.last().expect("checked above");
                let nx = if px + MIN_FIXATION_SEPARATION <= w - 1.0 { px + MIN_FIXATION_SEPARATION } else { px - MIN_FIXATION_SEPARATION };
                self.points.push((quantize(nx), py, duration));
                return;
            }
        }
    }

    fn saccade_step(&mut self) -> f64 {
        self.rng.random_range(self.cfg.saccade_min..=self.cfg.saccade_max)
    }

    /// Left-to-right pass over one line until `x_stop` is reached.
    /// Returns the number of fixations placed.
    fn line_pass(&mut self, line: usize, x_stop: f64, min_fixations: usize, dist: DurationDist) -> usize {
        let y = self.cfg.line_y(line);
        let left = self.cfg.text_left();
        let right = left + self.cfg.text_width();
        let mut x = left + self.rng.random_range(0.0..=self.cfg.saccade_min * 0.5);
        let mut placed = 0;
        loop {
            let d = self.duration(dist);
            self.push(x.min(right), y, d);
            placed += 1;
            if x >= x_stop && placed >= min_fixations {
                return placed;
            }
            x += self.saccade_step();
        }
    }

    fn headline(&mut self, dist: DurationDist) {
        let frac = self.rng.random_range(0.4..=0.7);
        let stop = self.cfg.text_left() + frac * self.cfg.text_width();
        self.line_pass(0, stop, 3, dist);
    }

    fn terminal_dwell(&mut self) {
        if !self.cfg.terminal_dwell {
            return;
        }
        let (ax, ay) = (self.cfg.dwell_anchor.0 * self.cfg.screen.w, self.cfg.dwell_anchor.1 * self.cfg.screen.h);
        for _ in 0..self.cfg.dwell_fixations {
            let d = self.rng.random_range(self.cfg.dwell_min_ms..=2.0 * self.cfg.dwell_min_ms);
            self.push(ax, ay, d);
        }
    }

    /// Lays the fixations on a timeline with I-VT-compatible saccade gaps.
    fn finish(self, trial_id: String) -> Scanpath {
        let mut t = 0.0;
        let mut fixations = Vec::with_capacity(self.points.len());
        let mut prev: Option<(f64, f64)> = None;
        for (x, y, dur) in self.points {
            if let Some((px, py)) = prev {
                t += saccade_gap((x - px).hypot(y - py));
            }
            let d = snap_duration(dur);
            fixations.push(Fixation::new(x, y, t, t + d));
            t += d;
            prev = Some((x, y));
        }
        Scanpath::new(trial_id, fixations, self.cfg.screen)
    }
}

fn quantize(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// Rounds up to the sample grid, never below the fixation floor.
fn snap_duration(d: f64) -> f64 {
    (d.max(MIN_FIXATION_MS) / SAMPLE_INTERVAL_MS).ceil() * SAMPLE_INTERVAL_MS
}

/// Number of in-flight samples for a saccade of `dist` px. Nominal duration
/// follows the main-sequence rule of thumb `20 + 0.05 * dist` ms, capped so
/// every step stays well above the 1000 px/s detection threshold.
fn saccade_steps(dist: f64) -> usize {
    let nominal = ((20.0 + 0.05 * dist) / SAMPLE_INTERVAL_MS).round() as usize;
    let fastest = (dist / (1.5 * SAMPLE_INTERVAL_MS)).floor() as usize;
    nominal.min(fastest).max(1)
}

/// Time from the end of one fixation to the start of the next.
fn saccade_gap(dist: f64) -> f64 {
    (saccade_steps(dist) + 1) as f64 * SAMPLE_INTERVAL_MS
}

fn lines_for(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(cfg.n_lines - cfg.n_lines_spread..=cfg.n_lines + cfg.n_lines_spread)
}

/// A relevant-document trial: every body line is read, most to the end.
pub fn generate_reading(cfg: &SynthConfig, rng: &mut ChaCha8Rng, trial_id: &str) -> Scanpath {
    let n_lines = lines_for(cfg, rng);
    let dist = cfg.reading_duration;
    let mut b = Builder::new(cfg, rng);
    b.headline(dist);
    let body: Vec<usize> = (1..n_lines).collect();
    // At most a fifth of the body lines stop short of the line end.
    let max_short = body.len() / 5;
    let n_short = b.rng.random_range(0..=max_short);
    let short: Vec<usize> = rand::seq::index::sample(b.rng, body.len(), n_short).into_vec();
    let (left, width) = (cfg.text_left(), cfg.text_width());
    for (k, &line) in body.iter().enumerate() {
        let frac = if short.contains(&k) { b.rng.random_range(0.5..0.9) } else { b.rng.random_range(0.9..=1.0) };
        b.line_pass(line, left + frac * width, 5, dist);
    }
    b.terminal_dwell();
    b.finish(trial_id.to_string())
}

/// An irrelevant-document trial: sparse fixations reached by vertical sweeps.
pub fn generate_skimming(cfg: &SynthConfig, rng: &mut ChaCha8Rng, trial_id: &str) -> Scanpath {
    let n_lines = lines_for(cfg, rng);
    let dist = cfg.skimming_duration;
    let mut b = Builder::new(cfg, rng);
    b.headline(dist);
    let (left, width) = (cfg.text_left(), cfg.text_width());
    // Mid-body lines exclude the headline and the last two lines.
    let (lo, hi) = (1, n_lines - 3);
    let mut line = 0usize;
    for _ in 0..b.rng.random_range(3..=6) {
        let step = b.rng.random_range(cfg.sweep_min_lines..=cfg.sweep_max_lines);
        let down = b.rng.random_bool(0.75);
        line = if (down && line + step <= hi) || line < lo + step {
            (line + step).min(hi)
        } else {
            line - step
        };
        let x = left + b.rng.random_range(0.0..=width);
        let d = b.duration(dist);
        b.push(x, cfg.line_y(line), d);
    }
    let tail = b.rng.random_range(2..=4);
    let mut x = left + b.rng.random_range(0.0..=0.3 * width);
    for i in 0..tail {
        let l = n_lines - 2 + usize::from(i >= tail / 2);
        let d = b.duration(dist);
        b.push(x.min(left + width), cfg.line_y(l), d);
        x += 2.0 * b.saccade_step();
    }
    b.terminal_dwell();
    b.finish(trial_id.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub label: RelevanceLabel,
    pub scanpath: Scanpath,
}

pub fn trial_id(label: RelevanceLabel, index: usize) -> String {
    format!("synth-{}-{index}", label.as_str())
}

/// Per-trial generator: one stream per (label, index) under the dataset seed.
pub fn trial_rng(seed: u64, label: RelevanceLabel, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = u64::from(!label.is_relevant());
    rng.set_stream((class << 32) | index as u64);
    rng
}

/// `n_per_class` trials of each label, relevant first, in index order.
pub fn generate_dataset(n_per_class: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthTrial>, SynthConfigError> {
    cfg.validate()?;
    if n_per_class == 0 {
        return Err(SynthConfigError("n_per_class must be >= 1".into()));
    }
    let jobs: Vec<(RelevanceLabel, usize)> = RelevanceLabel::ALL
        .iter()
        .flat_map(|&l| (0..n_per_class).map(move |i| (l, i)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(label, i)| {
            let mut rng = trial_rng(seed, label, i);
            let id = trial_id(label, i);
            let scanpath = match label {
                RelevanceLabel::Relevant => generate_reading(cfg, &mut rng, &id),
                RelevanceLabel::Irrelevant => generate_skimming(cfg, &mut rng, &id),
            };
            SynthTrial { label, scanpath }
        })
        .collect())
}

/// Manifest for generated trials; gaze-log paths are filled in by the caller.
pub fn manifest_for(trials: &[SynthTrial]) -> Result<DatasetManifest, ManifestError> {
    build_manifest(trials.iter().map(|t| {
        (
            TrialMeta {
                trial_id: t.scanpath.trial_id.clone(),
                participant_id: "synthetic".into(),
                document_id: t.scanpath.trial_id.clone(),
                label: t.label,
                gaze_log: None,
                image: None,
            },
            t.scanpath.fixations.clone(),
        )
    }))
}

/// Inverse of I-VT: 4 ms samples that sit exactly on each fixation and
/// move linearly between them fast enough to register as saccades.
///
/// Running [`crate::fixdet::detect_fixations`] with default settings on the
/// result recovers the generator's fixations exactly.
pub fn fixations_to_samples(fixations: &[Fixation]) -> Vec<GazeSample> {
    let mut out = Vec::new();
    let mut prev: Option<&Fixation> = None;
    for f in fixations {
        if let Some(p) = prev {
            let steps = saccade_steps((f.cx - p.cx).hypot(f.cy - p.cy));
            for k in 1..=steps {
                let a = k as f64 / steps as f64;
                let t = p.t_end + k as f64 * SAMPLE_INTERVAL_MS;
                out.push(GazeSample::new(t, p.cx + a * (f.cx - p.cx), p.cy + a * (f.cy - p.cy)));
            }
        }
        let n = ((f.t_end - f.t_start) / SAMPLE_INTERVAL_MS).round() as usize;
        for k in 0..=n {
            out.push(GazeSample::new(f.t_start + k as f64 * SAMPLE_INTERVAL_MS, f.cx, f.cy));
        }
        prev = Some(f);
    }
    out
}

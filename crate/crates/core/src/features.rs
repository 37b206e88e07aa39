//! Twenty aggregate eye-movement features per scanpath, the input of the
//! traditional classifiers.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::level_of;
use crate::types::{RelevanceLabel, Scanpath};

pub const FEATURE_COUNT: usize = 20;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "fixation_count",
    "mean_fix_dur",
    "sd_fix_dur",
    "total_fix_dur",
    "task_duration",
    "fixation_rate",
    "level1_count",
    "level2_count",
    "level3_count",
    "level4_count",
    "saccade_count",
    "mean_sacc_len",
    "sd_sacc_len",
    "total_path_len",
    "mean_sacc_velocity",
    "mean_sacc_dur",
    "total_h_move",
    "total_v_move",
    "hv_ratio",
    "vertical_scan_speed",
];

/// Saccades shorter than one 250 Hz sample period are timed as one period
/// when computing velocity.
pub const MIN_SACCADE_MS: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least two fixations, got {0}")]
    TooFewFixations(usize),
    #[error("fixation {index}: {source}")]
    Level {
        index: usize,
        #[source]
        source: LevelError,
    },
}

#[derive(Debug, Error, PartialEq)]
#[error("duration {0} ms is below the level floor")]
pub struct LevelError(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Reported `hv_ratio` when the scanpath has no vertical movement.
    pub hv_ratio_cap: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { hv_ratio_cap: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub fixation_count: f64,
    pub mean_fix_dur: f64,
    pub sd_fix_dur: f64,
    pub total_fix_dur: f64,
    pub task_duration: f64,
    pub fixation_rate: f64,
    pub level1_count: f64,
    pub level2_count: f64,
    pub level3_count: f64,
    pub level4_count: f64,
    pub saccade_count: f64,
    pub mean_sacc_len: f64,
    pub sd_sacc_len: f64,
    pub total_path_len: f64,
    pub mean_sacc_velocity: f64,
    pub mean_sacc_dur: f64,
    pub total_h_move: f64,
    pub total_v_move: f64,
    pub hv_ratio: f64,
    pub vertical_scan_speed: f64,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.fixation_count,
            self.mean_fix_dur,
            self.sd_fix_dur,
            self.total_fix_dur,
            self.task_duration,
            self.fixation_rate,
            self.level1_count,
            self.level2_count,
            self.level3_count,
            self.level4_count,
            self.saccade_count,
            self.mean_sacc_len,
            self.sd_sacc_len,
            self.total_path_len,
            self.mean_sacc_velocity,
            self.mean_sacc_dur,
            self.total_h_move,
            self.total_v_move,
            self.hv_ratio,
            self.vertical_scan_speed,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            fixation_count: v[0],
            mean_fix_dur: v[1],
            sd_fix_dur: v[2],
            total_fix_dur: v[3],
            task_duration: v[4],
            fixation_rate: v[5],
            level1_count: v[6],
            level2_count: v[7],
            level3_count: v[8],
            level4_count: v[9],
            saccade_count: v[10],
            mean_sacc_len: v[11],
            sd_sacc_len: v[12],
            total_path_len: v[13],
            mean_sacc_velocity: v[14],
            mean_sacc_dur: v[15],
            total_h_move: v[16],
            total_v_move: v[17],
            hv_ratio: v[18],
            vertical_scan_speed: v[19],
        }
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn extract_features(sp: &Scanpath, cfg: &FeatureConfig) -> Result<FeatureVector, FeatureError> {
    let fx = &sp.fixations;
    if fx.len() < 2 {
        return Err(FeatureError::TooFewFixations(fx.len()));
    }
    let n = fx.len() as f64;

    let mut levels = [0.0; 4];
    for (index, f) in fx.iter().enumerate() {
        let level = level_of(f.duration()).map_err(|_| FeatureError::Level {
            index,
            source: LevelError(f.duration()),
        })?;
        levels[level.index()] += 1.0;
    }

    let (mean_fix_dur, sd_fix_dur) = mean_sd(fx.iter().map(|f| f.duration()));
    let total_fix_dur: f64 = fx.iter().map(|f| f.duration()).sum();
    let task_duration = fx[fx.len() - 1].t_end - fx[0].t_start;
    let per_second = |v: f64| if task_duration > 0.0 { v / (task_duration / 1000.0) } else { 0.0 };

    let saccades = || fx.windows(2).map(|w| (&w[0], &w[1]));
    let lengths = saccades().map(|(a, b)| (b.cx - a.cx).hypot(b.cy - a.cy));
    let durations = saccades().map(|(a, b)| b.t_start - a.t_end);
    let (mean_sacc_len, sd_sacc_len) = mean_sd(lengths.clone());
    let total_path_len: f64 = lengths.clone().sum();
    let (mean_sacc_dur, _) = mean_sd(durations.clone());
    let (mean_sacc_velocity, _) = mean_sd(
        lengths
            .zip(durations)
            .map(|(len, dur)| len / (dur.max(MIN_SACCADE_MS) / 1000.0)),
    );

    let total_h_move = saccades().map(|(a, b)| (b.cx - a.cx).abs()).sum::<f64>() / sp.screen_w;
    let total_v_move = saccades().map(|(a, b)| (b.cy - a.cy).abs()).sum::<f64>() / sp.screen_h;
    let hv_ratio = if total_v_move > 0.0 {
        total_h_move / total_v_move
    } else {
        cfg.hv_ratio_cap
    };

    Ok(FeatureVector {
        fixation_count: n,
        mean_fix_dur,
        sd_fix_dur,
        total_fix_dur,
        task_duration,
        fixation_rate: per_second(n),
        level1_count: levels[0],
        level2_count: levels[1],
        level3_count: levels[2],
        level4_count: levels[3],
        saccade_count: n - 1.0,
        mean_sacc_len,
        sd_sacc_len,
        total_path_len,
        mean_sacc_velocity,
        mean_sacc_dur,
        total_h_move,
        total_v_move,
        hv_ratio,
        vertical_scan_speed: per_second(total_v_move),
    })
}

/// Feature table: the 20 feature columns, then `trial_id` and `label`.
pub fn write_feature_csv<W: Write>(
    mut w: W,
    rows: &[(String, RelevanceLabel, FeatureVector)],
) -> io::Result<()> {
    writeln!(w, "{},trial_id,label", FEATURE_NAMES.join(","))?;
    for (id, label, fv) in rows {
        for v in fv.to_array() {
            write!(w, "{v},")?;
        }
        writeln!(w, "{id},{label}")?;
    }
    Ok(())
}

pub fn read_feature_csv(text: &str) -> io::Result<Vec<(String, RelevanceLabel, FeatureVector)>> {
    let bad = |line: usize, msg: &str| io::Error::new(io::ErrorKind::InvalidData, format!("feature csv line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty"))?;
    let expected = format!("{},trial_id,label", FEATURE_NAMES.join(","));
    if header.trim() != expected {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != FEATURE_COUNT + 2 {
            return Err(bad(i + 2, "wrong column count"));
        }
        let mut v = [0.0; FEATURE_COUNT];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = cols[k].parse().map_err(|_| bad(i + 2, "bad number"))?;
        }
        let label = cols[FEATURE_COUNT + 1].parse().map_err(|_| bad(i + 2, "bad label"))?;
        out.push((cols[FEATURE_COUNT].to_owned(), label, FeatureVector::from_array(v)));
    }
    Ok(out)
}

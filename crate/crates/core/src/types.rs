//! Domain types shared by every stage of the pipeline.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Fixations shorter than this are discarded before encoding.
pub const MIN_FIXATION_MS: f64 = 110.0;

/// Trials with fewer fixations than this are excluded from the dataset.
pub const MIN_TRIAL_FIXATIONS: usize = 10;

pub const DEFAULT_SCREEN_W: f64 = 1680.0;
pub const DEFAULT_SCREEN_H: f64 = 1050.0;

/// One raw tracker sample. `t` is milliseconds from trial onset, `y` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl GazeSample {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Self {
            t,
            x,
            y,
            valid: true,
        }
    }
}

/// A detected fixation. The duration level is derived on demand, see
/// [`crate::render::level_of`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub cx: f64,
    pub cy: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl Fixation {
    pub fn new(cx: f64, cy: f64, t_start: f64, t_end: f64) -> Self {
        Self {
            cx,
            cy,
            t_start,
            t_end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Screen rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub w: f64,
    pub h: f64,
}

impl Default for Screen {
    fn default() -> Self {
        Self {
            w: DEFAULT_SCREEN_W,
            h: DEFAULT_SCREEN_H,
        }
    }
}

/// The time-ordered fixation sequence recorded for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub trial_id: String,
    pub fixations: Vec<Fixation>,
    pub screen_w: f64,
    pub screen_h: f64,
    /// Centroids moved onto the screen rectangle during construction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamp_notes: Vec<Violation>,
}

impl Scanpath {
    /// Builds a scanpath, clamping off-screen centroids into `[0, w) x [0, h)`.
    /// Every clamp is recorded in `clamp_notes`.
    pub fn new(trial_id: impl Into<String>, fixations: Vec<Fixation>, screen: Screen) -> Self {
        let mut clamp_notes = Vec::new();
        let fixations = fixations
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                let (cx, cy) = (clamp_half_open(f.cx, screen.w), clamp_half_open(f.cy, screen.h));
                if cx != f.cx || cy != f.cy {
                    clamp_notes.push(Violation::new(
                        "fixations.centroid",
                        Some(i),
                        ViolationKind::ClampedToScreen,
                    ));
                    f.cx = cx;
                    f.cy = cy;
                }
                f
            })
            .collect();
        Self {
            trial_id: trial_id.into(),
            fixations,
            screen_w: screen.w,
            screen_h: screen.h,
            clamp_notes,
        }
    }

    pub fn screen(&self) -> Screen {
        Screen {
            w: self.screen_w,
            h: self.screen_h,
        }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }
}

fn clamp_half_open(v: f64, upper: f64) -> f64 {
    if v.is_nan() {
        return 0.0;
    }
    if v < 0.0 {
        0.0
    } else if v >= upper {
        upper.next_down()
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TemporalOverlap,
    OutOfOrder,
    BelowDurationFloor,
    NonPositiveDuration,
    NonFinite,
    OutsideScreen,
    ClampedToScreen,
    InvalidScreen,
}

impl ViolationKind {
    fn describe(self) -> &'static str {
        match self {
            Self::TemporalOverlap => "temporal overlap",
            Self::OutOfOrder => "out of temporal order",
            Self::BelowDurationFloor => "below 110 ms floor",
            Self::NonPositiveDuration => "t_end not after t_start",
            Self::NonFinite => "non-finite value",
            Self::OutsideScreen => "outside screen rectangle",
            Self::ClampedToScreen => "clamped to screen rectangle",
            Self::InvalidScreen => "screen dimensions must be positive",
        }
    }
}

/// A single broken invariant, naming the offending field and fixation index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl Violation {
    pub fn new(field: &str, index: Option<usize>, kind: ViolationKind) -> Self {
        Self {
            field: field.to_owned(),
            index,
            kind,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.kind.describe()),
            None => write!(f, "{}: {}", self.field, self.kind.describe()),
        }
    }
}

/// Checks every scanpath invariant and reports each violation. Never fails.
pub fn validate_scanpath(sp: &Scanpath) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(sp.screen_w > 0.0 && sp.screen_h > 0.0) || !sp.screen_w.is_finite() || !sp.screen_h.is_finite()
    {
        out.push(Violation::new("screen", None, ViolationKind::InvalidScreen));
    }
    for (i, f) in sp.fixations.iter().enumerate() {
        if ![f.cx, f.cy, f.t_start, f.t_end].iter().all(|v| v.is_finite()) {
            out.push(Violation::new("fixations", Some(i), ViolationKind::NonFinite));
            continue;
        }
        if f.t_end <= f.t_start {
            out.push(Violation::new(
                "fixations.t_end",
                Some(i),
                ViolationKind::NonPositiveDuration,
            ));
        } else if f.duration() < MIN_FIXATION_MS {
            out.push(Violation::new(
                "fixations.duration",
                Some(i),
                ViolationKind::BelowDurationFloor,
            ));
        }
        if f.cx < 0.0 || f.cx >= sp.screen_w || f.cy < 0.0 || f.cy >= sp.screen_h {
            out.push(Violation::new(
                "fixations.centroid",
                Some(i),
                ViolationKind::OutsideScreen,
            ));
        }
        if i > 0 {
            let prev = &sp.fixations[i - 1];
            if f.t_start < prev.t_start {
                out.push(Violation::new(
                    "fixations.t_start",
                    Some(i),
                    ViolationKind::OutOfOrder,
                ));
            } else if f.t_start < prev.t_end {
                out.push(Violation::new(
                    "fixations.t_start",
                    Some(i),
                    ViolationKind::TemporalOverlap,
                ));
            }
        }
    }
    out
}

/// Perceived relevance as reported by the participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceLabel {
    Relevant,
    Irrelevant,
}

impl RelevanceLabel {
    pub const ALL: [RelevanceLabel; 2] = [RelevanceLabel::Relevant, RelevanceLabel::Irrelevant];

    pub fn is_relevant(self) -> bool {
        self == RelevanceLabel::Relevant
    }

    /// Binary target: relevant = 1, irrelevant = 0.
    pub fn target(self) -> f64 {
        if self.is_relevant() {
            1.0
        } else {
            0.0
        }
    }

    pub fn from_bool(relevant: bool) -> Self {
        if relevant {
            Self::Relevant
        } else {
            Self::Irrelevant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Relevant => "relevant",
            Self::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for RelevanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RelevanceLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relevant" | "1" | "r" => Ok(Self::Relevant),
            "irrelevant" | "0" | "i" => Ok(Self::Irrelevant),
            other => Err(format!("unknown relevance label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Excluded,
}

impl Split {
    pub const USABLE: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Excluded => "excluded",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One trial of the dataset manifest. `split` is `None` until splits are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub participant_id: String,
    pub document_id: String,
    pub label: RelevanceLabel,
    pub fixation_count: usize,
    pub gaze_log: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub split: Option<Split>,
}

impl TrialRecord {
    pub fn is_excluded(&self) -> bool {
        self.split == Some(Split::Excluded)
    }

    /// `split = excluded` iff the trial has too few fixations.
    pub fn exclusion_consistent(&self) -> bool {
        self.is_excluded() == (self.fixation_count < MIN_TRIAL_FIXATIONS)
    }
}

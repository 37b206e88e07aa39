//! Gaze-log parsing and the JSON-lines dataset manifest.
//!
//! The default log format is a UTF-8 CSV with a header row and the columns
//! `t,x,y,valid` (milliseconds from trial onset, screen pixels, 0/1 validity).

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Fixation, GazeSample, RelevanceLabel, Split, TrialRecord, MIN_TRIAL_FIXATIONS};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("input is not valid UTF-8 (byte offset {0})")]
    InvalidUtf8(usize),
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("timestamp does not increase at line {0}")]
    NonMonotonicTime(usize),
    #[error("column map must use four distinct indices")]
    InvalidColumnMap,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("duplicate trial id {0:?}")]
    DuplicateTrialId(String),
    #[error("manifest schema version {found} does not match supported version {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeLogFormat {
    pub delimiter: char,
    pub columns: ColumnMap,
    pub header: bool,
}

impl Default for GazeLogFormat {
    fn default() -> Self {
        Self {
            delimiter: ',',
            columns: ColumnMap {
                t: 0,
                x: 1,
                y: 2,
                valid: 3,
            },
            header: true,
        }
    }
}

impl GazeLogFormat {
    pub fn headerless() -> Self {
        Self {
            header: false,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), ParseError> {
        let c = self.columns;
        let idx = [c.t, c.x, c.y, c.valid];
        let distinct: HashSet<_> = idx.iter().collect();
        if distinct.len() == 4 {
            Ok(())
        } else {
            Err(ParseError::InvalidColumnMap)
        }
    }

    fn arity(&self) -> usize {
        let c = self.columns;
        c.t.max(c.x).max(c.y).max(c.valid) + 1
    }
}

/// Parses a gaze log into samples in file order. Invalid samples are kept
/// with `valid = false`. Line numbers in errors are 1-based physical lines.
pub fn parse_gaze_log(bytes: &[u8], fmt: &GazeLogFormat) -> Result<Vec<GazeSample>, ParseError> {
    fmt.check()?;
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError::InvalidUtf8(e.valid_up_to()))?;
    let arity = fmt.arity();
    let mut samples: Vec<GazeSample> = Vec::new();
    let mut fields: Vec<&str> = Vec::with_capacity(arity);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if fmt.header && i == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        fields.clear();
        fields.extend(line.split(fmt.delimiter).map(str::trim));
        if fields.len() != arity {
            return Err(ParseError::MalformedRow(line_no));
        }
        let c = fmt.columns;
        let num = |idx: usize| -> Result<f64, ParseError> {
            fields[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or(ParseError::MalformedRow(line_no))
        };
        let t = num(c.t)?;
        let x = num(c.x)?;
        let y = num(c.y)?;
        let valid = parse_flag(fields[c.valid]).ok_or(ParseError::MalformedRow(line_no))?;
        if t < 0.0 {
            return Err(ParseError::MalformedRow(line_no));
        }
        if let Some(prev) = samples.last() {
            if t <= prev.t {
                return Err(ParseError::NonMonotonicTime(line_no));
            }
        }
        samples.push(GazeSample { t, x, y, valid });
    }
    Ok(samples)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Writes samples in the default log format.
pub fn write_gaze_log<W: Write>(mut w: W, samples: &[GazeSample]) -> io::Result<()> {
    writeln!(w, "t,x,y,valid")?;
    for s in samples {
        writeln!(w, "{},{},{},{}", s.t, s.x, s.y, u8::from(s.valid))?;
    }
    Ok(())
}

/// Metadata for one trial before fixation counts are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub trial_id: String,
    pub participant_id: String,
    pub document_id: String,
    pub label: RelevanceLabel,
    pub gaze_log: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub trials: Vec<TrialRecord>,
}

impl DatasetManifest {
    pub fn usable(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| !t.is_excluded())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(move |t| t.split == Some(split))
    }

    pub fn get(&self, trial_id: &str) -> Option<&TrialRecord> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }

    pub fn has_splits(&self) -> bool {
        self.trials
            .iter()
            .any(|t| matches!(t.split, Some(Split::Train | Split::Val | Split::Test)))
    }

    /// Updates a trial's fixation count, re-applying the exclusion rule.
    /// Clears any previous split assignment of that trial.
    pub fn set_fixation_count(&mut self, trial_id: &str, count: usize) -> bool {
        match self.trials.iter_mut().find(|t| t.trial_id == trial_id) {
            Some(t) => {
                t.fixation_count = count;
                t.split = exclusion_split(count);
                true
            }
            None => false,
        }
    }
}

fn exclusion_split(fixation_count: usize) -> Option<Split> {
    (fixation_count < MIN_TRIAL_FIXATIONS).then_some(Split::Excluded)
}

/// Builds the manifest, excluding trials with fewer than ten fixations.
/// Usable trials are left unassigned until splitting.
pub fn build_manifest<I>(trials: I) -> Result<DatasetManifest, ManifestError>
where
    I: IntoIterator<Item = (TrialMeta, Vec<Fixation>)>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (meta, fixations) in trials {
        if !seen.insert(meta.trial_id.clone()) {
            return Err(ManifestError::DuplicateTrialId(meta.trial_id));
        }
        let fixation_count = fixations.len();
        out.push(TrialRecord {
            trial_id: meta.trial_id,
            participant_id: meta.participant_id,
            document_id: meta.document_id,
            label: meta.label,
            fixation_count,
            gaze_log: meta.gaze_log,
            image: meta.image,
            split: exclusion_split(fixation_count),
        });
    }
    Ok(DatasetManifest { trials: out })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    version: u32,
    #[serde(flatten)]
    record: TrialRecord,
}

const MANIFEST_FORMAT: &str = "gazelens-manifest";

fn invalid(line_no: usize, err: impl std::fmt::Display) -> io::Error {
    io::Error::new(
        io::ErrorKind::InvalidData,
        format!("manifest line {line_no}: {err}"),
    )
}

fn check_version(found: u32) -> Result<(), ManifestError> {
    if found == MANIFEST_VERSION {
        Ok(())
    } else {
        Err(ManifestError::SchemaVersionMismatch {
            found,
            expected: MANIFEST_VERSION,
        })
    }
}

/// Writes the manifest: a header line followed by one JSON object per trial.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_owned(),
        version: MANIFEST_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    for record in &manifest.trials {
        let line = ManifestLine {
            version: MANIFEST_VERSION,
            record: record.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| invalid(1, "missing header"))??;
    let header: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| invalid(1, e))?;
    let version = header
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| invalid(1, "header has no version"))?;
    check_version(u32::try_from(version).unwrap_or(u32::MAX))?;
    if header.get("format").and_then(|f| f.as_str()) != Some(MANIFEST_FORMAT) {
        return Err(invalid(1, "not a gazelens manifest").into());
    }

    let mut trials = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| invalid(line_no, e))?;
        if let Some(v) = value.get("version").and_then(serde_json::Value::as_u64) {
            check_version(u32::try_from(v).unwrap_or(u32::MAX))?;
        }
        let parsed: ManifestLine = serde_json::from_value(value).map_err(|e| invalid(line_no, e))?;
        if !seen.insert(parsed.record.trial_id.clone()) {
            return Err(ManifestError::DuplicateTrialId(parsed.record.trial_id));
        }
        trials.push(parsed.record);
    }
    Ok(DatasetManifest { trials })
}

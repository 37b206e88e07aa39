//! On-disk layout shared by the subcommands.
//!
//! Paths inside a manifest are stored relative to the manifest's directory
//! when they live under it, so an output directory can be moved as a whole.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use gazelens_core::eval::PreparedTrial;
use gazelens_core::features::{read_feature_csv, FeatureVector, FEATURE_COUNT};
use gazelens_core::fixdet::read_fixation_csv;
use gazelens_core::ingest::{load_manifest, save_manifest, DatasetManifest};
use gazelens_core::render::{read_png, ScanpathImage};
use gazelens_core::{Scanpath, Screen, Split, TrialRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FIXATIONS_DIR: &str = "fixations";
pub const GAZE_DIR: &str = "gaze";
pub const IMAGES_DIR: &str = "images";
pub const MODELS_DIR: &str = "models";
pub const FEATURES_FILE: &str = "features.csv";
pub const REPORT_JSON: &str = "report.json";

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::domain(format!("cannot create {}: {e}", dir.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::domain(format!("cannot read {}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::domain(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::domain(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text)
}

fn base_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Loads a manifest with every stored path made usable from the current directory.
pub fn load(path: &Path) -> Result<(DatasetManifest, PathBuf), CliError> {
    let mut m = load_manifest(path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
    let base = base_dir(path);
    for t in &mut m.trials {
        for p in [&mut t.gaze_log, &mut t.image].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok((m, base))
}

/// Saves `manifest` as `dir/manifest.jsonl`.
pub fn save(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf, CliError> {
    let mut m = manifest.clone();
    let abs_dir = absolute(dir);
    for t in &mut m.trials {
        for p in [&mut t.gaze_log, &mut t.image].into_iter().flatten() {
            if let Ok(rel) = absolute(p).strip_prefix(&abs_dir) {
                *p = rel.to_path_buf();
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    save_manifest(&m, &path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn fixation_file(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("{trial_id}.csv"))
}

/// Scanpaths of the given trials, read from `dir/<trial_id>.csv`.
pub fn load_scanpaths(
    trials: &[&TrialRecord],
    dir: &Path,
    screen: Screen,
) -> Result<HashMap<String, Scanpath>, CliError> {
    trials
        .par_iter()
        .map(|t| {
            let path = fixation_file(dir, &t.trial_id);
            let fixations = read_fixation_csv(&read_text(&path)?)
                .map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
            Ok((t.trial_id.clone(), Scanpath::new(t.trial_id.clone(), fixations, screen)))
        })
        .collect()
}

pub fn load_features(path: &Path) -> Result<HashMap<String, FeatureVector>, CliError> {
    let rows = read_feature_csv(&read_text(path)?).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
    Ok(rows.into_iter().map(|(id, _, fv)| (id, fv)).collect())
}

fn split_assigned(manifest: &DatasetManifest) -> Result<Vec<(&TrialRecord, Split)>, CliError> {
    if !manifest.has_splits() {
        return Err(CliError::domain(
            "manifest has no split assignments; run `gazelens split` first",
        ));
    }
    Ok(manifest
        .trials
        .iter()
        .filter_map(|t| match t.split {
            Some(s) if s != Split::Excluded => Some((t, s)),
            _ => None,
        })
        .collect())
}

fn placeholder_image() -> ScanpathImage {
    ScanpathImage::new(1, 1, [0, 0, 0])
}

/// Split-assigned trials with their images (when `images`) and feature
/// vectors (when `features` is given). Views that are not requested hold
/// placeholders that no model reads.
pub fn prepared_trials(
    manifest: &DatasetManifest,
    images: bool,
    features: Option<&HashMap<String, FeatureVector>>,
) -> Result<Vec<PreparedTrial>, CliError> {
    split_assigned(manifest)?
        .into_par_iter()
        .map(|(t, split)| {
            let image = if images {
                let path = t.image.as_ref().ok_or_else(|| {
                    CliError::domain(format!("trial {} has no image; run `gazelens render` first", t.trial_id))
                })?;
                read_png(path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?
            } else {
                placeholder_image()
            };
            let features = match features {
                Some(map) => *map
                    .get(&t.trial_id)
                    .ok_or_else(|| CliError::domain(format!("no feature row for trial {}", t.trial_id)))?,
                None => FeatureVector::from_array([0.0; FEATURE_COUNT]),
            };
            Ok(PreparedTrial {
                trial_id: t.trial_id.clone(),
                label: t.label,
                split,
                image,
                features,
            })
        })
        .collect()
}

//! Balancing, splitting, metrics and the CNN-versus-baselines experiment.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, ClassifierRegistry, ClassifierSettings, Labeled, ModelInput, RelevanceClassifier};
use crate::features::{extract_features, FeatureConfig, FeatureError, FeatureVector, FEATURE_NAMES};
use crate::ingest::DatasetManifest;
use crate::nn::EpochMetrics;
use crate::render::{render_scanpath, RenderConfig, RenderError, ScanpathImage};
use crate::types::{RelevanceLabel, Scanpath, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has fewer than two usable trials")]
    EmptyClass(&'static str),
    #[error("invalid split configuration: {0}")]
    InvalidConfig(String),
    #[error("scores and labels must be non-empty and equally long ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs both classes")]
    SingleClassInput,
    #[error("score {0} is not a finite value in [0, 1]")]
    InvalidScore(f64),
    #[error("no scanpath for trial {0}")]
    MissingScanpath(String),
    #[error("manifest has no split assignments")]
    NotSplit,
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("trial {trial}: {source}")]
    Render { trial: String, source: RenderError },
    #[error("trial {trial}: {source}")]
    Feature { trial: String, source: FeatureError },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub balance: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
            balance: true,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidConfig(format!(
                "fractions {:?} must be non-negative and sum to 1",
                self.fractions
            )));
        }
        Ok(())
    }
}

/// `(train, val, test)` sizes for one class of `n` trials.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let train = ((fractions[0] * n as f64).round() as usize).min(n);
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Downsamples the majority class (when balancing) and assigns stratified
/// train/val/test splits. Excluded trials are untouched; trials dropped by
/// balancing end up unassigned.
pub fn balance_and_split(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<DatasetManifest, EvalError> {
    cfg.validate()?;
    let mut out = manifest.clone();
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, t) in out.trials.iter_mut().enumerate() {
        if t.is_excluded() {
            continue;
        }
        t.split = None;
        by_class[usize::from(!t.label.is_relevant())].push(i);
    }
    for (members, label) in by_class.iter().zip(RelevanceLabel::ALL) {
        if members.len() < 2 {
            return Err(EvalError::EmptyClass(label.as_str()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.balance {
        let keep = by_class[0].len().min(by_class[1].len());
        for members in &mut by_class {
            if members.len() > keep {
                let mut picked = rand::seq::index::sample(&mut rng, members.len(), keep).into_vec();
                picked.sort_unstable();
                *members = picked.into_iter().map(|k| members[k]).collect();
            }
        }
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(members.len(), cfg.fractions);
        for (k, &i) in members.iter().enumerate() {
            out.trials[i].split = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

/// Label metrics at threshold 0.5 plus ROC AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Rates with an empty denominator are reported as 0.
    pub fn from_confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self {
            tpr: ratio(tp, tp + fn_),
            tnr: ratio(tn, tn + fp),
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            roc_auc: None,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Mann-Whitney AUC with average ranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum stays an integer even with averaged ranks.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average (i + j + 2) / 2.
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos as u128) * (n_pos as u128 + 1);
    Ok((twice_u as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::InvalidScore(s));
    }
    Ok(())
}

pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    check_scores(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= DECISION_THRESHOLD, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut report = MetricsReport::from_confusion(tp, fp, fn_, tn);
    report.roc_auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClassInput) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

// ---------------------------------------------------------------------------

/// A split-assigned trial with both model views materialized.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub trial_id: String,
    pub label: RelevanceLabel,
    pub split: Split,
    pub image: ScanpathImage,
    pub features: FeatureVector,
}

/// Renders and featurizes every split-assigned trial, in manifest order.
pub fn prepare_trials(
    manifest: &DatasetManifest,
    scanpaths: &HashMap<String, Scanpath>,
    render: &RenderConfig,
    features: &FeatureConfig,
) -> Result<Vec<PreparedTrial>, EvalError> {
    let assigned: Vec<_> = manifest
        .trials
        .iter()
        .filter_map(|t| match t.split {
            Some(s) if s != Split::Excluded => Some((t, s)),
            _ => None,
        })
        .collect();
    if assigned.is_empty() {
        return Err(EvalError::NotSplit);
    }
    assigned
        .into_par_iter()
        .map(|(t, split)| {
            let sp = scanpaths
                .get(&t.trial_id)
                .ok_or_else(|| EvalError::MissingScanpath(t.trial_id.clone()))?;
            let image = render_scanpath(sp, render).map_err(|source| EvalError::Render {
                trial: t.trial_id.clone(),
                source,
            })?;
            let features = extract_features(sp, features).map_err(|source| EvalError::Feature {
                trial: t.trial_id.clone(),
                source,
            })?;
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub split: Split,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub results: Vec<MethodResult>,
    /// `(feature, importance)` in decreasing order, from the first method
    /// that reports importances.
    pub feature_ranking: Vec<(String, f64)>,
    pub training_logs: Vec<(String, Vec<EpochMetrics>)>,
}

impl ExperimentReport {
    pub fn get(&self, method: &str, split: Split) -> Option<&MetricsReport> {
        self.results
            .iter()
            .find(|r| r.method == method && r.split == split)
            .map(|r| &r.metrics)
    }

    /// Table with columns `method,split,tpr_pct,tnr_pct,acc_pct,roc_auc,f1,tp,fp,fn,tn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "method,split,tpr_pct,tnr_pct,acc_pct,roc_auc,f1,tp,fp,fn,tn")?;
        for r in &self.results {
            let m = &r.metrics;
            writeln!(
                w,
                "{},{},{:.2},{:.2},{:.2},{},{:.4},{},{},{},{}",
                r.method,
                r.split.as_str(),
                100.0 * m.tpr,
                100.0 * m.tnr,
                100.0 * m.accuracy,
                m.roc_auc.map(|a| format!("{a:.4}")).unwrap_or_default(),
                m.f1,
                m.tp,
                m.fp,
                m.fn_,
                m.tn
            )?;
        }
        Ok(())
    }
}

/// Everything produced by one experiment, including the fitted models.
pub struct Experiment {
    pub report: ExperimentReport,
    pub models: Vec<Box<dyn RelevanceClassifier>>,
}

fn labeled(trials: &[PreparedTrial], split: Split) -> Vec<Labeled<'_>> {
    trials
        .iter()
        .filter(|t| t.split == split)
        .map(|t| {
            (
                ModelInput {
                    image: &t.image,
                    features: &t.features,
                },
                t.label.is_relevant(),
            )
        })
        .collect()
}

fn split_sets(trials: &[PreparedTrial]) -> Result<Vec<(Split, Vec<Labeled<'_>>)>, EvalError> {
    let sets: Vec<(Split, Vec<Labeled<'_>>)> = Split::USABLE.iter().map(|&s| (s, labeled(trials, s))).collect();
    for (s, set) in &sets {
        if set.is_empty() {
            return Err(EvalError::EmptySplit(s.as_str()));
        }
    }
    Ok(sets)
}

fn append_results(
    report: &mut ExperimentReport,
    model: &dyn RelevanceClassifier,
    sets: &[(Split, Vec<Labeled<'_>>)],
) -> Result<(), EvalError> {
    let name = model.name();
    for (split, set) in sets {
        let inputs: Vec<ModelInput<'_>> = set.iter().map(|s| s.0).collect();
        let labels: Vec<bool> = set.iter().map(|s| s.1).collect();
        let scores = model.score(&inputs)?;
        report.results.push(MethodResult {
            method: name.to_string(),
            split: *split,
            metrics: compute_metrics(&scores, &labels)?,
        });
    }
    if report.feature_ranking.is_empty() {
        if let Some(imp) = model.feature_importances() {
            report.feature_ranking = crate::baselines::importance_ranking(&imp)
                .into_iter()
                .map(|i| (FEATURE_NAMES[i].to_string(), imp[i]))
                .collect();
        }
    }
    if !model.training_log().is_empty() {
        report.training_logs.push((name.to_string(), model.training_log().to_vec()));
    }
    Ok(())
}

/// Scores already-fitted models on every split.
pub fn evaluate_models(trials: &[PreparedTrial], models: &[&dyn RelevanceClassifier]) -> Result<ExperimentReport, EvalError> {
    let sets = split_sets(trials)?;
    let mut report = ExperimentReport::default();
    for model in models {
        append_results(&mut report, *model, &sets)?;
    }
    Ok(report)
}

/// Fits each named method on the train split (validation split passed along)
/// and scores every split with it.
pub fn run_experiment(
    trials: &[PreparedTrial],
    methods: &[&str],
    registry: &ClassifierRegistry,
    settings: &ClassifierSettings,
) -> Result<Experiment, EvalError> {
    let sets = split_sets(trials)?;
    let mut report = ExperimentReport::default();
    let mut models = Vec::new();
    for &name in methods {
        let mut model = registry.create(name, settings)?;
        model.fit(&sets[0].1, &sets[1].1)?;
        append_results(&mut report, model.as_ref(), &sets)?;
        models.push(model);
    }
    Ok(Experiment { report, models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_manifest, TrialMeta};
    use crate::types::Fixation;

    fn manifest(n_rel: usize, n_irr: usize, n_short: usize) -> DatasetManifest {
        let fix = |n: usize| (0..n).map(|i| Fixation::new(i as f64, 0.0, i as f64 * 200.0, i as f64 * 200.0 + 150.0)).collect::<Vec<_>>();
        let mut rows = Vec::new();
        for (label, n) in [(RelevanceLabel::Relevant, n_rel), (RelevanceLabel::Irrelevant, n_irr)] {
            for i in 0..n {
                rows.push((
                    TrialMeta {
                        trial_id: format!("{}-{i}", label.as_str()),
                        participant_id: "p".into(),
                        document_id: "d".into(),
                        label,
                        gaze_log: None,
                        image: None,
                    },
                    fix(12),
                ));
            }
        }
        for i in 0..n_short {
            rows.push((
                TrialMeta {
                    trial_id: format!("short-{i}"),
                    participant_id: "p".into(),
                    document_id: "d".into(),
                    label: RelevanceLabel::Relevant,
                    gaze_log: None,
                    image: None,
                },
                fix(9),
            ));
        }
        build_manifest(rows).unwrap()
    }

    fn counts(m: &DatasetManifest, label: RelevanceLabel) -> [usize; 3] {
        let mut c = [0; 3];
        for t in m.trials.iter().filter(|t| t.label == label) {
            match t.split {
                Some(Split::Train) => c[0] += 1,
                Some(Split::Val) => c[1] += 1,
                Some(Split::Test) => c[2] += 1,
                _ => {}
            }
        }
        c
    }

    #[test]
    fn balanced_806_splits_484_161_161() {
        let m = balance_and_split(&manifest(806, 806, 0), &SplitConfig::default()).unwrap();
        for l in RelevanceLabel::ALL {
            assert_eq!(counts(&m, l), [484, 161, 161]);
        }
    }

    #[test]
    fn ten_per_class_splits_6_2_2() {
        let m = balance_and_split(&manifest(10, 10, 0), &SplitConfig::default()).unwrap();
        assert_eq!(counts(&m, RelevanceLabel::Relevant), [6, 2, 2]);
        assert_eq!(counts(&m, RelevanceLabel::Irrelevant), [6, 2, 2]);
    }

    #[test]
    fn majority_is_downsampled_and_exclusions_kept() {
        let m = balance_and_split(&manifest(30, 10, 3), &SplitConfig::default()).unwrap();
        assert_eq!(counts(&m, RelevanceLabel::Relevant), [6, 2, 2]);
        assert_eq!(m.trials.iter().filter(|t| t.split == Some(Split::Excluded)).count(), 3);
        assert_eq!(m.trials.iter().filter(|t| t.split.is_none()).count(), 20);
    }

    #[test]
    fn split_is_seeded() {
        let base = manifest(20, 20, 0);
        let a = balance_and_split(&base, &SplitConfig::default()).unwrap();
        assert_eq!(a, balance_and_split(&base, &SplitConfig::default()).unwrap());
        let other = SplitConfig {
            seed: 5,
            ..SplitConfig::default()
        };
        assert_ne!(a, balance_and_split(&base, &other).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            balance_and_split(&manifest(1, 10, 0), &SplitConfig::default()),
            Err(EvalError::EmptyClass("relevant"))
        ));
        let bad = SplitConfig {
            fractions: [0.5, 0.2, 0.2],
            ..SplitConfig::default()
        };
        assert!(matches!(balance_and_split(&manifest(5, 5, 0), &bad), Err(EvalError::InvalidConfig(_))));
    }

    #[test]
    fn confusion_example() {
        let m = MetricsReport::from_confusion(8, 2, 2, 8);
        assert_eq!((m.accuracy, m.f1, m.tpr, m.tnr), (0.8, 0.8, 0.8, 0.8));
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let m = compute_metrics(&[0.7, 0.2], &[true, true]).unwrap();
        assert_eq!(m.roc_auc, None);
        assert_eq!((m.tp, m.fn_), (1, 1));
        assert!(matches!(compute_metrics(&[0.5], &[]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(compute_metrics(&[1.5], &[true]), Err(EvalError::InvalidScore(_))));
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = compute_metrics(&[0.5, 0.4999], &[true, false]).unwrap();
        assert_eq!((m.tp, m.tn), (1, 1));
    }

    #[test]
    fn csv_has_table_columns() {
        let report = ExperimentReport {
            results: vec![MethodResult {
                method: "m".into(),
                split: Split::Test,
                metrics: MetricsReport::from_confusion(8, 2, 2, 8),
            }],
            feature_ranking: Vec::new(),
            training_logs: Vec::new(),
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,split,tpr_pct,tnr_pct,acc_pct,roc_auc,f1,tp,fp,fn,tn\nm,test,80.00,80.00,80.00,,0.8000,8,2,2,8\n"
        );
    }
}

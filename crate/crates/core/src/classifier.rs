//! Relevance classifiers behind one interface, looked up by name.
//!
//! Each classifier sees both views of a trial (rendered image and aggregate
//! features) and uses whichever it was built for. Scores lie in [0, 1] and a
//! trial is predicted relevant iff its score is at least 0.5.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{feature_importances, train_forest, train_svm, BaselineError, ForestConfig, ForestModel, SvmConfig, SvmModel};
use crate::features::FeatureVector;
use crate::nn::checkpoint::read_header;
use crate::nn::{
    load_checkpoint, predict, save_checkpoint, train, EpochMetrics, MiniVgg, MiniVggSpec, NnError, Precision, Scalar,
    TrainConfig,
};
use crate::render::ScanpathImage;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("unknown classifier {name:?}; available: {available}")]
    Unknown { name: String, available: String },
    #[error("classifier {0} has not been fitted")]
    NotFitted(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The two views of one trial.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image: &'a ScanpathImage,
    pub features: &'a FeatureVector,
}

/// An input with its target (true = relevant).
pub type Labeled<'a> = (ModelInput<'a>, bool);

pub trait RelevanceClassifier: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(&mut self, train: &[Labeled<'_>], val: &[Labeled<'_>]) -> Result<(), ClassifierError>;

    /// Relevance scores in [0, 1].
    fn score(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<f64>, ClassifierError>;

    fn save(&self, path: &Path) -> Result<(), ClassifierError>;

    /// Per-feature importances, for models that define them.
    fn feature_importances(&self) -> Option<Vec<f64>> {
        None
    }

    /// Per-epoch log, for iteratively trained models.
    fn training_log(&self) -> &[EpochMetrics] {
        &[]
    }

    /// Access to the concrete type, e.g. to reach a CNN for Grad-CAM.
    fn as_any(&self) -> &dyn std::any::Any;
}

/// Hyperparameters for every registered classifier.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub cnn: TrainConfig,
    pub forest: ForestConfig,
    pub svm: SvmConfig,
}

type Create = fn(&ClassifierSettings) -> Box<dyn RelevanceClassifier>;
type Load = fn(&Path, &ClassifierSettings) -> Result<Box<dyn RelevanceClassifier>, ClassifierError>;

struct Entry {
    create: Create,
    load: Load,
}

/// Name-keyed constructors and loaders.
pub struct ClassifierRegistry {
    entries: BTreeMap<&'static str, Entry>,
}

impl ClassifierRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding `mini-vgg`, `random-forest` and `linear-svm`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(CNN_NAME, create_cnn, load_cnn);
        r.register(FOREST_NAME, |s| Box::new(ForestClassifier::new(s.forest.clone())), load_forest);
        r.register(SVM_NAME, |s| Box::new(SvmClassifier::new(s.svm.clone())), load_svm);
        r
    }

    pub fn register(&mut self, name: &'static str, create: Create, load: Load) {
        self.entries.insert(name, Entry { create, load });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    fn entry(&self, name: &str) -> Result<&Entry, ClassifierError> {
        self.entries.get(name).ok_or_else(|| ClassifierError::Unknown {
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn create(&self, name: &str, settings: &ClassifierSettings) -> Result<Box<dyn RelevanceClassifier>, ClassifierError> {
        Ok((self.entry(name)?.create)(settings))
    }

    pub fn load(
        &self,
        name: &str,
        path: &Path,
        settings: &ClassifierSettings,
    ) -> Result<Box<dyn RelevanceClassifier>, ClassifierError> {
        (self.entry(name)?.load)(path, settings)
    }
}

pub const CNN_NAME: &str = "mini-vgg";
pub const FOREST_NAME: &str = "random-forest";
pub const SVM_NAME: &str = "linear-svm";

// ---------------------------------------------------------------------------

pub struct CnnClassifier<S> {
    cfg: TrainConfig,
    model: Option<MiniVgg<S>>,
    log: Vec<EpochMetrics>,
}

impl<S: Scalar> CnnClassifier<S> {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            model: None,
            log: Vec::new(),
        }
    }

    pub fn from_model(cfg: TrainConfig, model: MiniVgg<S>) -> Self {
        Self {
            cfg,
            model: Some(model),
            log: Vec::new(),
        }
    }

    pub fn model(&self) -> Option<&MiniVgg<S>> {
        self.model.as_ref()
    }

    pub fn into_model(self) -> Option<MiniVgg<S>> {
        self.model
    }
}

fn create_cnn(s: &ClassifierSettings) -> Box<dyn RelevanceClassifier> {
    match s.cnn.precision {
        Precision::F32 => Box::new(CnnClassifier::<f32>::new(s.cnn.clone())),
        Precision::F64 => Box::new(CnnClassifier::<f64>::new(s.cnn.clone())),
    }
}

fn load_cnn(path: &Path, s: &ClassifierSettings) -> Result<Box<dyn RelevanceClassifier>, ClassifierError> {
    let mut cfg = s.cnn.clone();
    cfg.precision = read_header(path)?.precision;
    Ok(match cfg.precision {
        Precision::F32 => Box::new(CnnClassifier::from_model(cfg, load_checkpoint::<f32>(path)?)),
        Precision::F64 => Box::new(CnnClassifier::from_model(cfg, load_checkpoint::<f64>(path)?)),
    })
}

impl<S: Scalar> RelevanceClassifier for CnnClassifier<S> {
    fn name(&self) -> &'static str {
        CNN_NAME
    }

    fn fit(&mut self, train_set: &[Labeled<'_>], val: &[Labeled<'_>]) -> Result<(), ClassifierError> {
        let first = train_set.first().ok_or(NnError::EmptyDataset)?;
        let spec = MiniVggSpec::new(first.0.image.h, first.0.image.w);
        let mut model = MiniVgg::<S>::new(spec, self.cfg.seed)?;
        let tr: Vec<_> = train_set.iter().map(|(i, l)| (i.image, *l)).collect();
        let va: Vec<_> = val.iter().map(|(i, l)| (i.image, *l)).collect();
        self.log = train(&mut model, &tr, &va, &self.cfg)?.log;
        self.model = Some(model);
        Ok(())
    }

    fn score(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<f64>, ClassifierError> {
        let model = self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(CNN_NAME.into()))?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let images: Vec<&ScanpathImage> = inputs.iter().map(|i| i.image).collect();
        Ok(predict(model, &images)?)
    }

    fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let model = self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(CNN_NAME.into()))?;
        Ok(save_checkpoint(model, path)?)
    }

    fn training_log(&self) -> &[EpochMetrics] {
        &self.log
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

// ---------------------------------------------------------------------------

fn feature_matrix(set: &[Labeled<'_>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    set.iter().map(|(i, l)| (i.features.to_array().to_vec(), *l)).unzip()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ClassifierError> {
    let text = serde_json::to_string(value).map_err(|e| ClassifierError::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ClassifierError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ClassifierError::Format(format!("{}: {e}", path.display())))
}

pub struct ForestClassifier {
    cfg: ForestConfig,
    model: Option<ForestModel>,
}

impl ForestClassifier {
    pub fn new(cfg: ForestConfig) -> Self {
        Self { cfg, model: None }
    }
}

fn load_forest(path: &Path, s: &ClassifierSettings) -> Result<Box<dyn RelevanceClassifier>, ClassifierError> {
    Ok(Box::new(ForestClassifier {
        cfg: s.forest.clone(),
        model: Some(read_json(path)?),
    }))
}

impl RelevanceClassifier for ForestClassifier {
    fn name(&self) -> &'static str {
        FOREST_NAME
    }

    fn fit(&mut self, train_set: &[Labeled<'_>], _val: &[Labeled<'_>]) -> Result<(), ClassifierError> {
        let (x, y) = feature_matrix(train_set);
        self.model = Some(train_forest(&x, &y, &self.cfg)?);
        Ok(())
    }

    fn score(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<f64>, ClassifierError> {
        let model = self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(FOREST_NAME.into()))?;
        Ok(inputs.iter().map(|i| model.score(&i.features.to_array())).collect())
    }

    fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        write_json(self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(FOREST_NAME.into()))?, path)
    }

    fn feature_importances(&self) -> Option<Vec<f64>> {
        self.model.as_ref().map(feature_importances)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

// ---------------------------------------------------------------------------

pub struct SvmClassifier {
    cfg: SvmConfig,
    model: Option<SvmModel>,
}

impl SvmClassifier {
    pub fn new(cfg: SvmConfig) -> Self {
        Self { cfg, model: None }
    }
}

fn load_svm(path: &Path, s: &ClassifierSettings) -> Result<Box<dyn RelevanceClassifier>, ClassifierError> {
    Ok(Box::new(SvmClassifier {
        cfg: s.svm.clone(),
        model: Some(read_json(path)?),
    }))
}

/// Maps a signed margin into (0, 1); margin 0 maps to exactly 0.5.
pub fn margin_to_score(m: f64) -> f64 {
    crate::nn::layers::sigmoid(m)
}

impl RelevanceClassifier for SvmClassifier {
    fn name(&self) -> &'static str {
        SVM_NAME
    }

    fn fit(&mut self, train_set: &[Labeled<'_>], _val: &[Labeled<'_>]) -> Result<(), ClassifierError> {
        let (x, y) = feature_matrix(train_set);
        self.model = Some(train_svm(&x, &y, &self.cfg)?);
        Ok(())
    }

    fn score(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<f64>, ClassifierError> {
        let model = self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(SVM_NAME.into()))?;
        Ok(inputs.iter().map(|i| margin_to_score(model.margin(&i.features.to_array()))).collect())
    }

    fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        write_json(self.model.as_ref().ok_or_else(|| ClassifierError::NotFitted(SVM_NAME.into()))?, path)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_COUNT;

    fn inputs(n: usize) -> (Vec<ScanpathImage>, Vec<FeatureVector>, Vec<bool>) {
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let images = labels
            .iter()
            .map(|&l| {
                let mut img = ScanpathImage::new(16, 16, [0, 0, 0]);
                for y in 0..16 {
                    for x in if l { 0..8 } else { 8..16 } {
                        img.set(x, y, [255, 255, 0]);
                    }
                }
                img
            })
            .collect();
        let feats = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut a = [0.0; FEATURE_COUNT];
                a[0] = if l { 100.0 } else { 20.0 } + (i % 5) as f64;
                a[3] = (i * 7 % 11) as f64;
                FeatureVector::from_array(a)
            })
            .collect();
        (images, feats, labels)
    }

    #[test]
    fn builtin_names_and_unknown() {
        let r = ClassifierRegistry::builtin();
        assert_eq!(r.names(), vec!["linear-svm", "mini-vgg", "random-forest"]);
        let err = r.create("knn", &ClassifierSettings::default()).err().unwrap();
        assert!(err.to_string().contains("available: linear-svm, mini-vgg, random-forest"));
    }

    #[test]
    fn baselines_fit_score_save_load() {
        let (imgs, feats, labels) = inputs(20);
        let set: Vec<Labeled> = imgs
            .iter()
            .zip(&feats)
            .zip(&labels)
            .map(|((image, features), &l)| (ModelInput { image, features }, l))
            .collect();
        let only: Vec<ModelInput> = set.iter().map(|s| s.0).collect();
        let r = ClassifierRegistry::builtin();
        let settings = ClassifierSettings {
            forest: ForestConfig {
                n_trees: 10,
                ..ForestConfig::default()
            },
            ..ClassifierSettings::default()
        };
        let dir = tempfile::tempdir().unwrap();
        for name in [FOREST_NAME, SVM_NAME] {
            let mut c = r.create(name, &settings).unwrap();
            assert!(matches!(c.score(&only), Err(ClassifierError::NotFitted(_))));
            c.fit(&set, &[]).unwrap();
            let s = c.score(&only).unwrap();
            for (v, &l) in s.iter().zip(&labels) {
                assert!((0.0..=1.0).contains(v));
                assert_eq!(*v >= 0.5, l, "{name}");
            }
            let path = dir.path().join(name);
            c.save(&path).unwrap();
            let back = r.load(name, &path, &settings).unwrap();
            assert_eq!(back.score(&only).unwrap(), s);
        }
    }

    #[test]
    fn cnn_fits_through_registry() {
        let (imgs, feats, labels) = inputs(16);
        let set: Vec<Labeled> = imgs
            .iter()
            .zip(&feats)
            .zip(&labels)
            .map(|((image, features), &l)| (ModelInput { image, features }, l))
            .collect();
        let settings = ClassifierSettings {
            cnn: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..ClassifierSettings::default()
        };
        let r = ClassifierRegistry::builtin();
        let mut c = r.create(CNN_NAME, &settings).unwrap();
        c.fit(&set, &set[..4]).unwrap();
        assert_eq!(c.training_log().len(), 2);
        assert!(c.feature_importances().is_none());
        let only: Vec<ModelInput> = set.iter().map(|s| s.0).collect();
        let s = c.score(&only).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cnn.ckpt");
        c.save(&path).unwrap();
        assert_eq!(r.load(CNN_NAME, &path, &settings).unwrap().score(&only).unwrap(), s);
    }

    #[test]
    fn svm_margin_zero_is_one_half() {
        assert_eq!(margin_to_score(0.0), 0.5);
    }
}

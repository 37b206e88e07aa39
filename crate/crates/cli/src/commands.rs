//! One adapter per subcommand. Each resolves defaults, runs one pipeline
//! stage and records its effective parameters under `<out-dir>/runs/`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gazelens_core::baselines::{write_importance_csv, ForestConfig, SvmConfig};
use gazelens_core::classifier::{ClassifierRegistry, ClassifierSettings, Labeled, CNN_NAME, FOREST_NAME, SVM_NAME};
use gazelens_core::eval::{balance_and_split, evaluate_models, ExperimentReport, PreparedTrial, SplitConfig};
use gazelens_core::features::{extract_features, write_feature_csv, FeatureConfig, FEATURE_NAMES};
use gazelens_core::fixdet::{detect_fixations, write_fixation_csv, FixdetError, IvtConfig};
use gazelens_core::gradcam::{average_heatmap, gradcam_batch, overlay, region_mass, write_heatmap_png, write_region_csv};
use gazelens_core::ingest::{build_manifest, parse_gaze_log, write_gaze_log, ColumnMap, GazeLogFormat, TrialMeta};
use gazelens_core::nn::checkpoint::read_header;
use gazelens_core::nn::{load_checkpoint, write_training_log, MiniVgg, Precision, Scalar, TrainConfig};
use gazelens_core::render::{render_scanpath, write_png, RenderConfig, RenderMode};
use gazelens_core::synth::{fixations_to_samples, generate_dataset, manifest_for};
use gazelens_core::{ModelInput, RelevanceLabel, Screen, Split, TrialRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::store::{self, ensure_dir, read_text, write_bytes, write_json};
use crate::{
    required, seed_or_env, BaselineMethod, CliError, DetectArgs, EvaluateArgs, FeaturesArgs, GradcamArgs, IngestArgs,
    LogFormatArgs, ModeArg, RenderArgs, ReportArgs, ScreenArgs, SplitArg, SplitArgs, SynthArgs, SynthOutput,
    TrainBaselineArgs, TrainCnnArgs,
};

#[derive(Serialize)]
struct RunConfig<'a, T> {
    command: &'a str,
    version: &'a str,
    params: &'a T,
}

fn record_run<T: Serialize>(out_dir: &Path, command: &str, params: &T) -> Result<(), CliError> {
    let dir = out_dir.join("runs");
    ensure_dir(&dir)?;
    let rc = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        params,
    };
    write_json(&dir.join(format!("{command}.json")), &rc)
}

/// Runs `f` on a pool of `jobs` workers, or on the default pool.
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::domain(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn to_csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn log_format(a: &mut LogFormatArgs) -> GazeLogFormat {
    let delimiter = *a.delimiter.get_or_insert(',');
    let header = !*a.no_header.get_or_insert(false);
    GazeLogFormat {
        delimiter,
        columns: ColumnMap {
            t: 0,
            x: 1,
            y: 2,
            valid: 3,
        },
        header,
    }
}

fn screen(a: &mut ScreenArgs, manifest_dir: &Path) -> (Screen, PathBuf) {
    let d = Screen::default();
    let screen = Screen {
        w: *a.screen_w.get_or_insert(d.w),
        h: *a.screen_h.get_or_insert(d.h),
    };
    let dir = a
        .fixations_dir
        .get_or_insert_with(|| manifest_dir.join(store::FIXATIONS_DIR))
        .clone();
    (screen, dir)
}

fn usable(manifest: &gazelens_core::ingest::DatasetManifest) -> Vec<&TrialRecord> {
    manifest.usable().collect()
}

pub fn synth(mut a: SynthArgs) -> Result<(), CliError> {
    let n = required(a.n_per_class, "n-per-class")?;
    let seed = seed_or_env(a.seed)?;
    a.seed = Some(seed);
    let out = required(a.out_dir.clone(), "out-dir")?;
    let output = *a.output.get_or_insert(SynthOutput::Gaze);
    let mut cfg = a.synth.take().unwrap_or_default();
    if let Some(j) = a.jitter_sigma {
        cfg.jitter_sigma = j;
    }
    a.jitter_sigma = Some(cfg.jitter_sigma);

    let trials = generate_dataset(n, &cfg, seed)?;
    let mut manifest = manifest_for(&trials)?;
    let sub = out.join(match output {
        SynthOutput::Gaze => store::GAZE_DIR,
        SynthOutput::Fixations => store::FIXATIONS_DIR,
    });
    ensure_dir(&sub)?;
    trials.par_iter().try_for_each(|t| {
        let id = &t.scanpath.trial_id;
        let bytes = match output {
            SynthOutput::Gaze => to_csv_bytes(|w| write_gaze_log(w, &fixations_to_samples(&t.scanpath.fixations))),
            SynthOutput::Fixations => to_csv_bytes(|w| write_fixation_csv(w, id, &t.scanpath.fixations)),
        };
        write_bytes(&store::fixation_file(&sub, id), bytes)
    })?;
    if output == SynthOutput::Gaze {
        for t in &mut manifest.trials {
            t.gaze_log = Some(store::fixation_file(&sub, &t.trial_id));
        }
    }
    let path = store::save(&manifest, &out)?;
    a.synth = Some(cfg);
    record_run(&out, "synth", &a)?;
    println!("wrote {} trials and {}", manifest.trials.len(), path.display());
    Ok(())
}

fn read_trial_table(path: &Path) -> Result<Vec<TrialMeta>, CliError> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').map(str::trim).collect();
    let want = ["trial_id", "participant_id", "document_id", "label", "gaze_log"];
    if header != want {
        return Err(CliError::domain(format!(
            "{}: header must be `{}`",
            path.display(),
            want.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: String| CliError::domain(format!("{} line {}: {m}", path.display(), i + 2));
        if cols.len() != want.len() {
            return Err(bad(format!("expected {} columns, found {}", want.len(), cols.len())));
        }
        let label: RelevanceLabel = cols[3].parse().map_err(bad)?;
        let log = PathBuf::from(cols[4]);
        out.push(TrialMeta {
            trial_id: cols[0].into(),
            participant_id: cols[1].into(),
            document_id: cols[2].into(),
            label,
            gaze_log: Some(if log.is_relative() { base.join(log) } else { log }),
            image: None,
        });
    }
    Ok(out)
}

pub fn ingest(mut a: IngestArgs) -> Result<(), CliError> {
    let table = required(a.trials.clone(), "trials")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let fmt = log_format(&mut a.format);
    let metas = read_trial_table(&table)?;
    // Logs are parsed up front so malformed files fail here, not in `detect`.
    metas.par_iter().try_for_each(|m| {
        let path = m.gaze_log.as_ref().expect("set by the table reader");
        let bytes = std::fs::read(path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
        parse_gaze_log(&bytes, &fmt).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
        Ok::<_, CliError>(())
    })?;
    // Fixation counts are unknown until `detect`.
    let manifest = build_manifest(metas.into_iter().map(|m| (m, Vec::new())))?;
    ensure_dir(&out)?;
    let path = store::save(&manifest, &out)?;
    record_run(&out, "ingest", &a)?;
    println!("wrote {} trials to {}", manifest.trials.len(), path.display());
    Ok(())
}

pub fn detect(mut a: DetectArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let fmt = log_format(&mut a.format);
    let d = IvtConfig::default();
    let cfg = IvtConfig {
        velocity_threshold: *a.velocity_threshold.get_or_insert(d.velocity_threshold),
        min_fixation_duration: *a.min_fixation_ms.get_or_insert(d.min_fixation_duration),
        drop_invalid_samples: !*a.keep_invalid.get_or_insert(!d.drop_invalid_samples),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (mut manifest, _) = store::load(&manifest_path)?;
    let dir = out.join(store::FIXATIONS_DIR);
    ensure_dir(&dir)?;
    let counts: Vec<(String, usize)> = with_jobs(a.jobs, || {
        manifest
            .trials
            .par_iter()
            .map(|t| {
                let path = t
                    .gaze_log
                    .as_ref()
                    .ok_or_else(|| CliError::domain(format!("trial {} has no gaze log", t.trial_id)))?;
                let bytes = std::fs::read(path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
                let samples = parse_gaze_log(&bytes, &fmt).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
                let fixations = match detect_fixations(&samples, &cfg) {
                    Ok(f) => f,
                    // A log too short to hold a saccade has no fixations to report.
                    Err(FixdetError::TooFewSamples(_)) => Vec::new(),
                    Err(e) => return Err(CliError::domain(format!("trial {}: {e}", t.trial_id))),
                };
                let bytes = to_csv_bytes(|w| write_fixation_csv(w, &t.trial_id, &fixations));
                write_bytes(&store::fixation_file(&dir, &t.trial_id), bytes)?;
                Ok((t.trial_id.clone(), fixations.len()))
            })
            .collect::<Result<_, CliError>>()
    })??;
    for (id, n) in &counts {
        manifest.set_fixation_count(id, *n);
    }
    let path = store::save(&manifest, &out)?;
    record_run(&out, "detect", &a)?;
    println!(
        "detected fixations for {} trials ({} usable); wrote {}",
        counts.len(),
        manifest.usable().count(),
        path.display()
    );
    Ok(())
}

pub fn render(mut a: RenderArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let size = required(a.image_size, "image-size")?;
    let (mut manifest, base) = store::load(&manifest_path)?;
    let (screen, fix_dir) = screen(&mut a.screen, &base);
    let cfg = RenderConfig {
        antialias: *a.antialias.get_or_insert(false),
        mode: RenderMode::from(*a.mode.get_or_insert(ModeArg::Direct)),
        ..RenderConfig::square(size)
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out.join(store::IMAGES_DIR);
    ensure_dir(&dir)?;
    let trials = usable(&manifest);
    let written: Vec<(String, PathBuf)> = with_jobs(a.jobs, || {
        let scanpaths = store::load_scanpaths(&trials, &fix_dir, screen)?;
        trials
            .par_iter()
            .map(|t| {
                let img = render_scanpath(&scanpaths[&t.trial_id], &cfg)
                    .map_err(|e| CliError::domain(format!("trial {}: {e}", t.trial_id)))?;
                let path = dir.join(format!("{}.png", t.trial_id));
                write_png(&img, &path).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
                Ok((t.trial_id.clone(), path))
            })
            .collect::<Result<_, CliError>>()
    })??;
    let paths: HashMap<_, _> = written.into_iter().collect();
    for t in &mut manifest.trials {
        if let Some(p) = paths.get(&t.trial_id) {
            t.image = Some(p.clone());
        }
    }
    let path = store::save(&manifest, &out)?;
    record_run(&out, "render", &a)?;
    println!("rendered {} images at {size}x{size}; wrote {}", paths.len(), path.display());
    Ok(())
}

pub fn features(mut a: FeaturesArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let (manifest, base) = store::load(&manifest_path)?;
    let (screen, fix_dir) = screen(&mut a.screen, &base);
    let cfg = FeatureConfig {
        hv_ratio_cap: *a.hv_ratio_cap.get_or_insert(FeatureConfig::default().hv_ratio_cap),
    };
    let trials = usable(&manifest);
    let rows = with_jobs(a.jobs, || {
        let scanpaths = store::load_scanpaths(&trials, &fix_dir, screen)?;
        trials
            .par_iter()
            .map(|t| {
                let fv = extract_features(&scanpaths[&t.trial_id], &cfg)
                    .map_err(|e| CliError::domain(format!("trial {}: {e}", t.trial_id)))?;
                Ok((t.trial_id.clone(), t.label, fv))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    ensure_dir(&out)?;
    let path = out.join(store::FEATURES_FILE);
    write_bytes(&path, to_csv_bytes(|w| write_feature_csv(w, &rows)))?;
    record_run(&out, "features", &a)?;
    println!("extracted {} feature rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn split(mut a: SplitArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let seed = seed_or_env(a.seed)?;
    a.seed = Some(seed);
    let d = SplitConfig::default();
    let fr = a.fractions.get_or_insert_with(|| d.fractions.to_vec()).clone();
    let fractions: [f64; 3] = fr
        .try_into()
        .map_err(|_| CliError::Usage("--fractions takes exactly three values".into()))?;
    let cfg = SplitConfig {
        fractions,
        seed,
        balance: !*a.no_balance.get_or_insert(!d.balance),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (manifest, _) = store::load(&manifest_path)?;
    let manifest = balance_and_split(&manifest, &cfg)?;
    ensure_dir(&out)?;
    let path = store::save(&manifest, &out)?;
    record_run(&out, "split", &a)?;
    let n = |s| manifest.in_split(s).count();
    println!(
        "train {} / val {} / test {}; wrote {}",
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        path.display()
    );
    Ok(())
}

fn split_sets(trials: &[PreparedTrial]) -> (Vec<Labeled<'_>>, Vec<Labeled<'_>>) {
    let pick = |s: Split| {
        trials
            .iter()
            .filter(|t| t.split == s)
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
    };
    (pick(Split::Train), pick(Split::Val))
}

pub fn train_cnn(mut a: TrainCnnArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let seed = seed_or_env(a.seed)?;
    a.seed = Some(seed);
    let d = TrainConfig::default();
    let settings = ClassifierSettings {
        cnn: TrainConfig {
            epochs: *a.epochs.get_or_insert(d.epochs),
            batch_size: *a.batch_size.get_or_insert(d.batch_size),
            momentum: *a.momentum.get_or_insert(d.momentum),
            learning_rate: *a.learning_rate.get_or_insert(d.learning_rate),
            seed,
            precision: *a.precision.get_or_insert(d.precision),
        },
        ..ClassifierSettings::default()
    };
    settings.cnn.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (manifest, _) = store::load(&manifest_path)?;
    let trials = store::prepared_trials(&manifest, true, None)?;
    let (train, val) = split_sets(&trials);
    let mut model = ClassifierRegistry::builtin().create(CNN_NAME, &settings)?;
    model.fit(&train, &val)?;
    let models = out.join(store::MODELS_DIR);
    ensure_dir(&models)?;
    let path = models.join(format!("{CNN_NAME}.ckpt"));
    model.save(&path)?;
    let log = out.join("training_log.csv");
    write_bytes(&log, to_csv_bytes(|w| write_training_log(w, model.training_log())))?;
    record_run(&out, "train-cnn", &a)?;
    if let Some(last) = model.training_log().last() {
        println!(
            "epoch {}: train loss {:.4}, train acc {:.3}, val acc {}",
            last.epoch,
            last.train_loss,
            last.train_acc,
            last.val_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("wrote {} and {}", path.display(), log.display());
    Ok(())
}

pub fn train_baseline(mut a: TrainBaselineArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let features_path = required(a.features.clone(), "features")?;
    let method = required(a.method, "method")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let seed = seed_or_env(a.seed)?;
    a.seed = Some(seed);
    let (df, ds) = (ForestConfig::default(), SvmConfig::default());
    let settings = match method {
        BaselineMethod::RandomForest => ClassifierSettings {
            forest: ForestConfig {
                n_trees: *a.n_trees.get_or_insert(df.n_trees),
                max_depth: a.max_depth.or(df.max_depth),
                min_samples_leaf: *a.min_samples_leaf.get_or_insert(df.min_samples_leaf),
                max_features: *a.max_features.get_or_insert(df.max_features),
                bootstrap: df.bootstrap,
                seed,
            },
            ..ClassifierSettings::default()
        },
        BaselineMethod::LinearSvm => ClassifierSettings {
            svm: SvmConfig {
                lambda: *a.lambda.get_or_insert(ds.lambda),
                epochs: *a.epochs.get_or_insert(ds.epochs),
                seed,
            },
            ..ClassifierSettings::default()
        },
    };
    let name = match method {
        BaselineMethod::RandomForest => FOREST_NAME,
        BaselineMethod::LinearSvm => SVM_NAME,
    };
    let (manifest, _) = store::load(&manifest_path)?;
    let features = store::load_features(&features_path)?;
    let trials = store::prepared_trials(&manifest, false, Some(&features))?;
    let (train, val) = split_sets(&trials);
    let mut model = ClassifierRegistry::builtin().create(name, &settings)?;
    model.fit(&train, &val)?;
    let models = out.join(store::MODELS_DIR);
    ensure_dir(&models)?;
    let path = models.join(format!("{name}.json"));
    model.save(&path)?;
    if let Some(imp) = model.feature_importances() {
        let p = out.join("feature_importance.csv");
        write_bytes(&p, to_csv_bytes(|w| write_importance_csv(w, &FEATURE_NAMES, &imp)))?;
        println!("wrote {}", p.display());
    }
    record_run(&out, "train-baseline", &a)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Known model files under `dir`, in registry order.
fn discover_models(dir: &Path) -> Vec<String> {
    [
        (CNN_NAME, format!("{CNN_NAME}.ckpt")),
        (FOREST_NAME, format!("{FOREST_NAME}.json")),
        (SVM_NAME, format!("{SVM_NAME}.json")),
    ]
    .into_iter()
    .filter(|(_, f)| dir.join(f).is_file())
    .map(|(n, f)| format!("{n}={}", dir.join(f).display()))
    .collect()
}

pub fn evaluate(mut a: EvaluateArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let specs = a
        .models
        .get_or_insert_with(|| discover_models(&out.join(store::MODELS_DIR)))
        .clone();
    if specs.is_empty() {
        return Err(CliError::domain(format!(
            "no models given and none found under {}",
            out.join(store::MODELS_DIR).display()
        )));
    }
    let registry = ClassifierRegistry::builtin();
    let settings = ClassifierSettings::default();
    let mut models = Vec::new();
    for spec in &specs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--model expects NAME=PATH, got {spec:?}")))?;
        models.push(registry.load(name, Path::new(path), &settings)?);
    }
    let needs_images = models.iter().any(|m| m.name() == CNN_NAME);
    let needs_features = models.iter().any(|m| m.name() != CNN_NAME);
    let features = match (&a.features, needs_features) {
        (Some(p), true) => Some(store::load_features(p)?),
        (None, true) => return Err(CliError::Usage("feature-based models need --features".into())),
        _ => None,
    };
    let (manifest, _) = store::load(&manifest_path)?;
    let trials = store::prepared_trials(&manifest, needs_images, features.as_ref())?;
    let refs: Vec<_> = models.iter().map(|m| m.as_ref()).collect();
    let report = evaluate_models(&trials, &refs)?;
    ensure_dir(&out)?;
    write_json(&out.join(store::REPORT_JSON), &report)?;
    write_bytes(&out.join("report.csv"), to_csv_bytes(|w| report.write_csv(w)))?;
    record_run(&out, "evaluate", &a)?;
    print!("{}", table(&[report]));
    Ok(())
}

fn gradcam_with<S: Scalar>(model: &MiniVgg<S>, a: &GradcamArgs, trials: &[PreparedTrial], out: &Path) -> Result<(), CliError> {
    let alpha = a.alpha.expect("defaulted");
    let dir = out.join("gradcam");
    let overlays = dir.join("overlays");
    ensure_dir(&overlays)?;
    let mut regions = Vec::new();
    for label in RelevanceLabel::ALL {
        let of_class: Vec<&PreparedTrial> = trials.iter().filter(|t| t.label == label).collect();
        if of_class.is_empty() {
            continue;
        }
        let images: Vec<(&str, &_)> = of_class.iter().map(|t| (t.trial_id.as_str(), &t.image)).collect();
        let maps = gradcam_batch(model, &images, label, a.block)?;
        if !a.no_overlays.unwrap_or(false) {
            maps.par_iter().zip(&of_class).try_for_each(|(hm, t)| {
                let img = overlay(&t.image, hm, alpha)?;
                let path = overlays.join(format!("{}.png", t.trial_id));
                write_png(&img, &path).map_err(CliError::from)
            })?;
        }
        let avg = average_heatmap(&maps)?;
        write_heatmap_png(&avg, &dir.join(format!("average-{label}.png")))?;
        regions.push((format!("average-{label}"), region_mass(&avg)));
        regions.extend(maps.iter().map(|m| (m.trial_id.clone().unwrap_or_default(), region_mass(m))));
    }
    let path = dir.join("regions.csv");
    write_bytes(&path, to_csv_bytes(|w| write_region_csv(w, &regions)))?;
    for (name, m) in regions.iter().filter(|(n, _)| n.starts_with("average-")) {
        println!(
            "{name}: left {:.3} center {:.3} right {:.3} | top {:.3} middle {:.3} bottom {:.3}",
            m.left, m.center, m.right, m.top, m.middle, m.bottom
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn gradcam(mut a: GradcamArgs) -> Result<(), CliError> {
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let model_path = required(a.model.clone(), "model")?;
    let out = required(a.out_dir.clone(), "out-dir")?;
    let split = match *a.split.get_or_insert(SplitArg::Test) {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    a.alpha.get_or_insert(0.5);
    a.no_overlays.get_or_insert(false);
    let (manifest, _) = store::load(&manifest_path)?;
    let mut trials = store::prepared_trials(&manifest, true, None)?;
    trials.retain(|t| t.split == split);
    match read_header(&model_path)?.precision {
        Precision::F32 => gradcam_with(&load_checkpoint::<f32>(&model_path)?, &a, &trials, &out)?,
        Precision::F64 => gradcam_with(&load_checkpoint::<f64>(&model_path)?, &a, &trials, &out)?,
    }
    record_run(&out, "gradcam", &a)
}

/// Markdown table with one row per method and split.
fn table(reports: &[ExperimentReport]) -> String {
    let mut s = String::from("| Method | Split | TPR % | TNR % | Acc % | ROC AUC | F1 |\n|---|---|---:|---:|---:|---:|---:|\n");
    for r in reports.iter().flat_map(|r| &r.results) {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {} | {:.4} |",
            r.method,
            r.split,
            100.0 * m.tpr,
            100.0 * m.tnr,
            100.0 * m.accuracy,
            m.roc_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            m.f1
        );
    }
    s
}

pub fn report(mut a: ReportArgs) -> Result<(), CliError> {
    let out = required(a.out_dir.clone(), "out-dir")?;
    let files = a
        .reports
        .get_or_insert_with(|| vec![out.join(store::REPORT_JSON)])
        .clone();
    let reports = files
        .iter()
        .map(|p| {
            serde_json::from_str::<ExperimentReport>(&read_text(p)?)
                .map_err(|e| CliError::domain(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = table(&reports);
    if let Some(r) = reports.iter().find(|r| !r.feature_ranking.is_empty()) {
        text.push_str("\n| Feature | Importance |\n|---|---:|\n");
        for (name, imp) in &r.feature_ranking {
            let _ = writeln!(text, "| {name} | {imp:.4} |");
        }
    }
    ensure_dir(&out)?;
    write_bytes(&out.join("report.md"), &text)?;
    record_run(&out, "report", &a)?;
    print!("{text}");
    Ok(())
}

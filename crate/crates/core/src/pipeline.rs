//! End-to-end commands over a run directory.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.<command>.toml      snapshot of the configuration each command ran with
//! fold_<k>/                  generator, discriminator, log and split of fold k
//! ensembler.ckpt             fused model, with ensemble_log.ndjson and ensemble_split.json
//! predictions/<subject>.nii.gz
//! metrics.json
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data_io::{
    load_label_map, load_subject, read_spacing, reference_image, save_label_map_like,
    segmentation_path, subject_dirs, to_categorical, write_phantom_dataset, ManifestEntry,
    PhantomSpec, Subject,
};
use crate::ensemble::{
    ensemble_predict, holdout_split, stacked_inputs, train_ensembler, EnsembleOutcome,
    EnsembleSample, Ensembler,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Generator;
use crate::postprocess;
use crate::rng::stream;
use crate::train::{
    cross_validate, fold_dir, make_folds, predict, train, FoldOutcome, TrainOutcome,
    GENERATOR_FILE,
};

pub const ENSEMBLER_FILE: &str = "ensembler.ckpt";
pub const ENSEMBLE_LOG_FILE: &str = "ensemble_log.ndjson";
pub const ENSEMBLE_SPLIT_FILE: &str = "ensemble_split.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const REPORT_FILE: &str = "metrics.json";

pub fn snapshot_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("config.{command}.toml"))
}

/// Validates `cfg`, creates the output directory and freezes the
/// configuration next to the artifacts.
fn prepare(cfg: &RunConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(snapshot_path(&cfg.output, command), cfg.to_toml())?;
    Ok(())
}

pub fn synth(out: &Path, subjects: usize, size: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    let spec = PhantomSpec {
        dims: [size; 3],
        ..Default::default()
    };
    write_phantom_dataset(out, subjects, &spec, seed)
}

/// Subject directories of a dataset, or `path` itself when it is a single
/// subject.
pub fn input_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    match subject_dirs(path) {
        Err(Error::EmptyDataset) => Ok(vec![path.to_path_buf()]),
        other => other,
    }
}

fn load_training_set(cfg: &RunConfig) -> Result<Vec<Subject>> {
    let subjects: Vec<Subject> = subject_dirs(&cfg.data.train)?
        .iter()
        .map(|d| load_subject(d))
        .collect::<Result<_>>()?;
    for s in &subjects {
        s.labels()?;
    }
    Ok(subjects)
}

/// Trains the `fold`-th split of the cross-validation partition.
pub fn run_train(cfg: &RunConfig, fold: usize) -> Result<TrainOutcome> {
    prepare(cfg, "train")?;
    let subjects = load_training_set(cfg)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.name.clone()).collect();
    let split = make_folds(&ids, cfg.train.folds, cfg.train.seed)?
        .into_iter()
        .nth(fold)
        .ok_or_else(|| {
            Error::config(format!(
                "fold {fold} out of range for {} folds",
                cfg.train.folds
            ))
        })?;
    train(
        &cfg.experiment(),
        &split,
        &subjects,
        Some(&fold_dir(&cfg.output, fold)),
    )
}

pub fn run_cv(cfg: &RunConfig) -> Result<Vec<FoldOutcome>> {
    prepare(cfg, "cv")?;
    let subjects = load_training_set(cfg)?;
    cross_validate(&cfg.experiment(), &subjects, Some(&cfg.output))
}

fn load_checked<M: checkpoint::Checkpointable>(path: &Path) -> Result<M> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    checkpoint::load(path)
}

/// One generator per fold, in fold order.
pub fn load_fold_generators(out: &Path, folds: usize) -> Result<Vec<Generator>> {
    (0..folds)
        .map(|k| load_checked(&fold_dir(out, k).join(GENERATOR_FILE)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Every fold model predicts every training subject; a fresh subject
/// split drives early stopping.
pub fn run_ensemble(cfg: &RunConfig) -> Result<EnsembleOutcome> {
    prepare(cfg, "ensemble")?;
    let models = load_fold_generators(&cfg.output, cfg.train.folds)?;
    let subjects = load_training_set(cfg)?;
    let mut samples = Vec::with_capacity(subjects.len());
    for s in &subjects {
        samples.push(EnsembleSample {
            input: stacked_inputs(&models, &s.volume, cfg.train.fit_mode, cfg.ensemble.center)?,
            target: to_categorical(s.labels()?).to_tensor(),
        });
    }
    let (train_idx, val_idx) = holdout_split(
        samples.len(),
        cfg.ensemble.validation_fraction,
        cfg.ensemble.seed,
    )?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let names = |idx: &[usize]| idx.iter().map(|&i| subjects[i].name.clone()).collect();
    let split = EnsembleSplit {
        train: names(&train_idx),
        validation: names(&val_idx),
    };
    let ens = Ensembler::new(&cfg.ensemble, &mut stream(cfg.ensemble.seed, &[0]))?;
    let outcome = train_ensembler(
        ens,
        &pick(&train_idx),
        &pick(&val_idx),
        &cfg.train,
        cfg.loss.gdl_eps,
        cfg.augment.patch_size,
    )?;
    checkpoint::save(
        &cfg.output.join(ENSEMBLER_FILE),
        &outcome.ensembler,
        cfg.ensemble.seed,
        outcome.best_epoch,
        &[("stopped_epoch", outcome.stopped_epoch.to_string())],
    )?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(
        cfg.output.join(ENSEMBLE_LOG_FILE),
    )?);
    for r in &outcome.log {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    std::fs::write(
        cfg.output.join(ENSEMBLE_SPLIT_FILE),
        serde_json::to_string_pretty(&split)?,
    )?;
    Ok(outcome)
}

/// Which trained model `predict` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Ensemble,
    Fold(usize),
}

/// Segments every subject under `input` (a dataset or a single subject
/// directory), post-processes and writes `<pred_dir>/<subject>.nii.gz`.
pub fn run_predict(
    cfg: &RunConfig,
    input: &Path,
    choice: ModelChoice,
    pred_dir: &Path,
) -> Result<Vec<PathBuf>> {
    prepare(cfg, "predict")?;
    enum Loaded {
        Ensemble(Vec<Generator>, Ensembler),
        Single(Generator),
    }
    let model = match choice {
        ModelChoice::Ensemble => Loaded::Ensemble(
            load_fold_generators(&cfg.output, cfg.train.folds)?,
            load_checked(&cfg.output.join(ENSEMBLER_FILE))?,
        ),
        ModelChoice::Fold(k) => {
            Loaded::Single(load_checked(&fold_dir(&cfg.output, k).join(GENERATOR_FILE))?)
        }
    };
    std::fs::create_dir_all(pred_dir)?;
    let mut written = Vec::new();
    for dir in input_dirs(input)? {
        let subject = load_subject(&dir)?;
        let probs = match &model {
            Loaded::Ensemble(models, ens) => {
                ensemble_predict(models, ens, &subject.volume, cfg.train.fit_mode)?
            }
            Loaded::Single(g) => predict(g, &subject.volume, cfg.train.fit_mode)?,
        };
        let labels = postprocess::apply(
            &crate::data_io::from_categorical(&probs),
            &cfg.postprocess,
        )?;
        let path = pred_dir.join(format!("{}.nii.gz", subject.name));
        save_label_map_like(&path, &labels, &reference_image(&dir)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Scores predictions against ground truth.
///
/// `truth` is either a dataset directory, matched by subject name against
/// `<pred>/<subject>.nii.gz`, or a single label file compared with the
/// label file `pred`. Voxel spacing comes from the ground-truth header.
pub fn run_evaluate(truth: &Path, pred: &Path, report: &Path) -> Result<MetricsReport> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if truth.is_file() {
        let name = truth
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        vec![(name, truth.to_path_buf(), pred.to_path_buf())]
    } else {
        subject_dirs(truth)?
            .into_iter()
            .map(|d| {
                let name = d
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let p = pred.join(format!("{name}.nii.gz"));
                Ok((name, segmentation_path(&d)?, p))
            })
            .collect::<Result<_>>()?
    };
    let mut records = Vec::with_capacity(pairs.len());
    for (name, gt_path, pred_path) in pairs {
        let gt = load_label_map(&gt_path)?;
        let p = load_label_map(&pred_path)?;
        let mut rec = evaluate(&p, &gt, read_spacing(&gt_path)?).map_err(|e| match e {
            Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("{name}: {msg}")),
            other => other,
        })?;
        rec.subject = name;
        records.push(rec);
    }
    let out = MetricsReport::new(records)?;
    if let Some(parent) = report.parent() {
        std::fs::create_dir_all(parent)?;
    }
    out.write_json(report)?;
    Ok(out)
}

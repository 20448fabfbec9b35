//! Adversarial training, cross-validation and full-volume prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, extract_patch, AugmentationConfig};
use crate::checkpoint;
use crate::data_io::{
    center_offset, from_categorical, to_categorical, Dims, MultiModalVolume, OneHotSegmentation,
    Spatial, Subject,
};
use crate::error::{Error, Result};
use crate::loss::{discriminator_loss_tensors, generator_loss_tensors, LossConfig};
use crate::metrics::{dice, remap_regions};
use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamSet};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::tensor::{Graph, Tensor};

const TAG_FOLDS: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_PATCH: u64 = 4;
const TAG_DROPOUT: u64 = 5;

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const LOG_FILE: &str = "log.ndjson";
pub const SPLIT_FILE: &str = "split.json";

/// How a volume is brought to a multiple of `2^depth` for inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    #[default]
    Crop,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub fit_mode: FitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-7,
            batch_size: 2,
            epochs: 30,
            folds: 3,
            seed: 0,
            fit_mode: FitMode::Crop,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 200,
            folds: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::config("learning rate and eps must be positive"));
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("beta {b} outside (0, 1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        let p = self.augment.patch_size;
        for m in [self.generator.multiple(), self.discriminator.multiple()] {
            if p % m != 0 {
                return Err(Error::NotDivisible {
                    size: [p; 3],
                    multiple: m,
                });
            }
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Bias-corrected update of every tensor with its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Seeded shuffle dealt round-robin into `m` validation sets.
pub fn make_folds(ids: &[String], m: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if m < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {m}")));
    }
    if m > ids.len() {
        return Err(Error::config(format!(
            "{m} folds requested for {} subjects",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut stream(seed, &[TAG_FOLDS]));
    let mut member = vec![0usize; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        member[i] = pos % m;
    }
    Ok((0..m)
        .map(|fold| {
            let (validation, train) = ids
                .iter()
                .zip(&member)
                .partition::<Vec<_>, _>(|(_, f)| **f == fold);
            FoldSplit {
                fold,
                train: train.into_iter().map(|(id, _)| id.clone()).collect(),
                validation: validation.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss_d: f64,
    pub loss_g: f64,
    pub adversarial: f64,
    pub gdl: f64,
}

/// Where a step sits in the run, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Position {
    pub fold: usize,
    pub epoch: usize,
    pub step: usize,
}

fn non_finite(at: Position, detail: impl Into<String>) -> Error {
    Error::NonFinite {
        fold: at.fold,
        epoch: at.epoch,
        step: at.step,
        detail: detail.into(),
    }
}

fn check_grads(grads: &[Tensor], names: &[String], at: Position) -> Result<()> {
    for (g, name) in grads.iter().zip(names) {
        if !g.is_finite() {
            return Err(non_finite(at, format!("gradient of {name}")));
        }
    }
    Ok(())
}

/// One discriminator update on the detached generator output, then one
/// generator update through the freshly updated, frozen discriminator.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    g: &mut Generator,
    d: &mut Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    loss: &LossConfig,
    dropout_rng: &mut StreamRng,
    at: Position,
) -> Result<StepRecord> {
    let mut graph_g = Graph::new();
    let gp = g.params().bind(&mut graph_g, true);
    let xg = graph_g.input(x.clone());
    let yhat_var = g.forward(&mut graph_g, &gp, xg, Some(dropout_rng))?;
    let yhat = graph_g.value(yhat_var).clone();
    if !yhat.is_finite() {
        return Err(non_finite(at, "generator output"));
    }

    let loss_d = {
        let mut graph = Graph::new();
        let dp = d.params().bind(&mut graph, true);
        let xv = graph.input(x.clone());
        let yv = graph.input(y.clone());
        let fv = graph.input(yhat.clone());
        let real = d.forward(&mut graph, &dp, xv, yv)?;
        let fake = d.forward(&mut graph, &dp, xv, fv)?;
        let (value, d_real, d_fake) =
            discriminator_loss_tensors(graph.value(real), graph.value(fake))?;
        if !value.is_finite() {
            return Err(non_finite(at, "discriminator loss"));
        }
        graph.backward(vec![(real, d_real), (fake, d_fake)])?;
        let grads = d.params().grads(&graph, &dp);
        check_grads(&grads, d.params().names(), at)?;
        drop(graph);
        opt_d.step(d.params_mut().tensors_mut(), &grads);
        value
    };

    let (record, seed) = {
        let mut graph = Graph::new();
        let dp = d.params().bind(&mut graph, false);
        let xv = graph.input(x.clone());
        let fv = graph.input_with_grad(yhat.clone());
        let fake = d.forward(&mut graph, &dp, xv, fv)?;
        let (lg, d_score, mut d_yhat) =
            generator_loss_tensors(graph.value(fake), y, &yhat, loss)?;
        if !lg.total.is_finite() {
            return Err(non_finite(at, "generator loss"));
        }
        graph.backward(vec![(fake, d_score)])?;
        let adv = graph
            .take_grad(fv)
            .ok_or_else(|| non_finite(at, "no gradient reached the prediction"))?;
        d_yhat.add_assign(&adv);
        let record = StepRecord {
            loss_d,
            loss_g: lg.total,
            adversarial: lg.adversarial,
            gdl: lg.gdl,
        };
        (record, d_yhat)
    };

    graph_g.backward(vec![(yhat_var, seed)])?;
    let grads = g.params().grads(&graph_g, &gp);
    check_grads(&grads, g.params().names(), at)?;
    drop(graph_g);
    opt_g.step(g.params_mut().tensors_mut(), &grads);
    Ok(record)
}

/// One line of the newline-delimited training log. Step lines carry no
/// validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub record: String,
    pub fold: usize,
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_D")]
    pub loss_d: f64,
    #[serde(rename = "L_G")]
    pub loss_g: f64,
    pub adversarial: f64,
    #[serde(rename = "GDL")]
    pub gdl: f64,
    #[serde(rename = "val_dice_WT")]
    pub val_dice_wt: Option<f64>,
    #[serde(rename = "val_dice_TC")]
    pub val_dice_tc: Option<f64>,
    #[serde(rename = "val_dice_ET")]
    pub val_dice_et: Option<f64>,
    pub wall_time: f64,
}

impl LogRecord {
    pub fn is_epoch(&self) -> bool {
        self.record == "epoch"
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation WT Dice.
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_dice_wt: f64,
}

fn find_subjects<'s>(subjects: &'s [Subject], names: &[String]) -> Result<Vec<&'s Subject>> {
    names
        .iter()
        .map(|n| {
            subjects
                .iter()
                .find(|s| &s.name == n)
                .ok_or_else(|| Error::config(format!("subject {n} not in dataset")))
        })
        .collect()
}

/// Mean WT/TC/ET Dice of argmax predictions over `subjects`.
pub fn validation_dice(g: &Generator, subjects: &[&Subject], mode: FitMode) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    for s in subjects {
        let pred = from_categorical(&predict(g, &s.volume, mode)?);
        let (p, t) = (remap_regions(&pred), remap_regions(s.labels()?));
        for (r, acc) in sum.iter_mut().enumerate() {
            *acc += dice(p.get(r), t.get(r))?;
        }
    }
    Ok(sum.map(|v| v / subjects.len() as f64))
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
            f.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}"))
}

/// Trains one fold. With `out_dir`, writes the log, the split, the best
/// generator and the final discriminator there.
pub fn train(
    exp: &Experiment,
    split: &FoldSplit,
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    exp.validate()?;
    let cfg = &exp.train;
    let fold = split.fold;
    let train_set = find_subjects(subjects, &split.train)?;
    let val_set = find_subjects(subjects, &split.validation)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train_set.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "{} training subjects for batch size {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let pairs: Vec<(&MultiModalVolume, &crate::data_io::LabelMap)> = train_set
        .iter()
        .map(|s| Ok((&s.volume, s.labels()?)))
        .collect::<Result<_>>()?;

    let mut g = Generator::new(
        &exp.generator,
        &mut stream(cfg.seed, &[TAG_INIT, fold as u64, 0]),
    )?;
    let mut d = Discriminator::new(
        &exp.discriminator,
        &mut stream(cfg.seed, &[TAG_INIT, fold as u64, 1]),
    )?;
    let mut opt_g = Adam::new(cfg, g.params());
    let mut opt_d = Adam::new(cfg, d.params());
    let mut dropout_rng = stream(cfg.seed, &[TAG_DROPOUT, fold as u64]);
    let patch_base = derive_seed(cfg.seed, &[TAG_PATCH, exp.augment.seed]);
    let patch = [exp.augment.patch_size; 3];

    let mut sink = LogSink {
        file: None,
        records: Vec::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(split)?)?;
        sink.file = Some(BufWriter::new(File::create(dir.join(LOG_FILE))?));
    }

    let start = Instant::now();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_ORDER, fold as u64, epoch as u64]));
        let mut totals = [0.0f64; 4];
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = stream(patch_base, &[fold as u64, epoch as u64, i as u64]);
                let (v, m) = pairs[i];
                let (pv, pm) = extract_patch(v, m, patch, &mut rng)?;
                let (av, am, _) = augment(&pv, &pm, &exp.augment, &mut rng)?;
                xs.push(av.to_tensor());
                ys.push(to_categorical(&am).to_tensor());
            }
            let x = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
            let y = Tensor::stack(&ys.iter().collect::<Vec<_>>())?;
            step += 1;
            let at = Position { fold, epoch, step };
            let r = train_step(
                &mut g,
                &mut d,
                &mut opt_g,
                &mut opt_d,
                &x,
                &y,
                &exp.loss,
                &mut dropout_rng,
                at,
            )?;
            for (t, v) in totals.iter_mut().zip([r.loss_d, r.loss_g, r.adversarial, r.gdl]) {
                *t += v;
            }
            steps_in_epoch += 1;
            sink.push(LogRecord {
                record: "step".into(),
                fold,
                epoch,
                step,
                loss_d: r.loss_d,
                loss_g: r.loss_g,
                adversarial: r.adversarial,
                gdl: r.gdl,
                val_dice_wt: None,
                val_dice_tc: None,
                val_dice_et: None,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(validation_dice(&g, &val_set, cfg.fit_mode)?)
        };
        let mean = totals.map(|t| t / steps_in_epoch as f64);
        sink.push(LogRecord {
            record: "epoch".into(),
            fold,
            epoch,
            step,
            loss_d: mean[0],
            loss_g: mean[1],
            adversarial: mean[2],
            gdl: mean[3],
            val_dice_wt: val.map(|v| v[0]),
            val_dice_tc: val.map(|v| v[1]),
            val_dice_et: val.map(|v| v[2]),
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        let score = val.map_or(f64::NEG_INFINITY, |v| v[0]);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => score > *b || val.is_none(),
        };
        if improved {
            best = Some((epoch, score, g.params().clone()));
            if let Some(dir) = out_dir {
                checkpoint::save(
                    &dir.join(GENERATOR_FILE),
                    &g,
                    cfg.seed,
                    epoch,
                    &[("fold", fold.to_string()), ("val_dice_WT", score.to_string())],
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(
            &dir.join(DISCRIMINATOR_FILE),
            &d,
            cfg.seed,
            cfg.epochs,
            &[("fold", fold.to_string())],
        )?;
    }
    let (best_epoch, best_dice_wt, params) = best.expect("at least one epoch ran");
    *g.params_mut() = params;
    Ok(TrainOutcome {
        generator: g,
        discriminator: d,
        log: sink.records,
        best_epoch,
        best_dice_wt,
    })
}

pub struct FoldOutcome {
    pub split: FoldSplit,
    pub outcome: TrainOutcome,
}

/// One independent run per fold of `make_folds`.
pub fn cross_validate(
    exp: &Experiment,
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<Vec<FoldOutcome>> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.name.clone()).collect();
    make_folds(&ids, exp.train.folds, exp.train.seed)?
        .into_iter()
        .map(|split| {
            let dir = out_dir.map(|o| fold_dir(o, split.fold));
            let outcome = train(exp, &split, subjects, dir.as_deref())?;
            Ok(FoldOutcome { split, outcome })
        })
        .collect()
}

/// Grid the network actually sees for a volume of `dims`.
pub fn fit_dims(dims: Dims, multiple: usize, mode: FitMode) -> Result<Dims> {
    if dims.iter().any(|&d| d < multiple) {
        return Err(Error::TooSmall {
            size: dims,
            minimum: multiple,
        });
    }
    Ok(dims.map(|d| match mode {
        FitMode::Crop => d / multiple * multiple,
        FitMode::Pad => d.div_ceil(multiple) * multiple,
    }))
}

/// Whole-volume inference on the original grid. Cropped margins come back
/// as certain background; padding is removed.
pub fn predict(g: &Generator, v: &MultiModalVolume, mode: FitMode) -> Result<OneHotSegmentation> {
    let dims = v.dims();
    let fitted = fit_dims(dims, g.config().multiple(), mode)?;
    let input = match mode {
        FitMode::Crop => v.window(center_offset(dims, fitted), fitted),
        FitMode::Pad => v.embed(center_offset(fitted, dims), fitted),
    };
    let out = g.infer(Tensor::stack(&[&input.to_tensor()])?)?;
    let seg = OneHotSegmentation::from_tensor(out.sample(0))?;
    Ok(match mode {
        FitMode::Crop => seg.embed(center_offset(dims, fitted), dims),
        FitMode::Pad => seg.window(center_offset(fitted, dims), dims),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::data_io::{generate_phantom, normalize, PhantomSpec};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn fold_examples() {
        let f = make_folds(&ids(10), 10, 3).unwrap();
        assert!(f.iter().all(|s| s.validation.len() == 1 && s.train.len() == 9));
        let f = make_folds(&ids(5), 2, 3).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(|s| s.validation.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 3]);
        assert!(make_folds(&ids(3), 4, 0).is_err());
        assert!(make_folds(&ids(3), 1, 0).is_err());
        assert_eq!(make_folds(&ids(7), 3, 9).unwrap(), make_folds(&ids(7), 3, 9).unwrap());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..40, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let m = 2 + ((n - 2) as f64 * m_frac) as usize;
            let all = ids(n);
            let folds = make_folds(&all, m, seed).unwrap();
            prop_assert_eq!(folds.len(), m);
            let mut seen: Vec<String> = folds.iter().flat_map(|f| f.validation.clone()).collect();
            seen.sort();
            let mut want = all.clone();
            want.sort();
            prop_assert_eq!(seen, want);
            let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in &folds {
                prop_assert!(f.train.iter().all(|t| !f.validation.contains(t)));
                prop_assert_eq!(f.train.len() + f.validation.len(), n);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut params = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::from_vec(&[3], vec![0.3, -4.0, 1e-3]).unwrap()];
        let mut adam = Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: vec![vec![0.0; 3]],
            v: vec![vec![0.0; 3]],
        };
        adam.step(&mut params, &grads);
        // m̂ = g and v̂ = g² after one step, so each parameter moves by
        // lr·g/(|g|+eps)
        for (i, (p0, g)) in [1.0f64, -2.0, 0.5].iter().zip([0.3f64, -4.0, 1e-3]).enumerate() {
            let want = p0 - 2e-4 * g / (g.abs() + 1e-7);
            assert!((params[0].data()[i] as f64 - want).abs() < 1e-6);
        }
        // second step with the same gradient: hand-computed moments
        adam.step(&mut params, &grads);
        let g = 0.3f64;
        let m = 0.5 * 0.5 * g + 0.5 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let step = (m / (1.0 - 0.25)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-7);
        let want = 1.0 - 2e-4 * 0.3 / (0.3 + 1e-7) - 2e-4 * step;
        assert!((params[0].data()[0] as f64 - want).abs() < 1e-6);
    }

    fn small_experiment() -> Experiment {
        Experiment {
            generator: GeneratorConfig {
                base_filters: 2,
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                base_filters: 2,
                ..Default::default()
            },
            augment: AugmentationConfig {
                patch_size: 16,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn subjects(n: usize, side: usize, seed: u64) -> Vec<Subject> {
        (0..n)
            .map(|i| {
                let (v, m) = generate_phantom(&PhantomSpec {
                    dims: [side; 3],
                    seed: seed + i as u64,
                    ..Default::default()
                })
                .unwrap();
                Subject {
                    name: format!("p{i}"),
                    volume: normalize(&v).unwrap(),
                    labels: Some(m),
                    spacing: [1.0; 3],
                }
            })
            .collect()
    }

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut r = StreamRng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn one_hot_batch(n: usize, side: usize, seed: u64) -> Tensor {
        let mut r = StreamRng::seed_from_u64(seed);
        let v = side * side * side;
        let mut data = vec![0.0; n * 4 * v];
        for b in 0..n {
            for i in 0..v {
                data[(b * 4 + r.gen_range(0..4)) * v + i] = 1.0;
            }
        }
        Tensor::from_vec(&[n, 4, side, side, side], data).unwrap()
    }

    #[test]
    fn one_step_changes_every_parameter_and_is_deterministic() {
        let exp = small_experiment();
        let run = || {
            let mut g = Generator::new(&exp.generator, &mut StreamRng::seed_from_u64(1)).unwrap();
            let mut d =
                Discriminator::new(&exp.discriminator, &mut StreamRng::seed_from_u64(2)).unwrap();
            let (g0, d0) = (g.params().clone(), d.params().clone());
            let mut og = Adam::new(&exp.train, g.params());
            let mut od = Adam::new(&exp.train, d.params());
            let x = random_batch(&[2, 4, 32, 32, 32], 3);
            let y = one_hot_batch(2, 32, 4);
            let mut rng = StreamRng::seed_from_u64(5);
            let r = train_step(
                &mut g,
                &mut d,
                &mut og,
                &mut od,
                &x,
                &y,
                &exp.loss,
                &mut rng,
                Position::default(),
            )
            .unwrap();
            (r, g0, d0, g, d)
        };
        let (r, g0, d0, g, d) = run();
        for (before, after) in [(&d0, d.params()), (&g0, g.params())] {
            for ((name, a), b) in before.names().iter().zip(before.tensors()).zip(after.tensors()) {
                assert_ne!(a, b, "{name} unchanged");
            }
        }
        assert!([r.loss_d, r.loss_g, r.adversarial, r.gdl].iter().all(|v| v.is_finite()));
        let (r2, _, _, g2, _) = run();
        assert_eq!(r, r2);
        assert_eq!(g.params(), g2.params());
    }

    #[test]
    fn pure_gan_step_reports_dice_without_using_it() {
        let mut exp = small_experiment();
        exp.loss.alpha = 0.0;
        let mut g = Generator::new(&exp.generator, &mut StreamRng::seed_from_u64(1)).unwrap();
        let mut d = Discriminator::new(&exp.discriminator, &mut StreamRng::seed_from_u64(2)).unwrap();
        let mut og = Adam::new(&exp.train, g.params());
        let mut od = Adam::new(&exp.train, d.params());
        let x = random_batch(&[1, 4, 16, 16, 16], 3);
        let y = one_hot_batch(1, 16, 4);
        let r = train_step(
            &mut g,
            &mut d,
            &mut og,
            &mut od,
            &x,
            &y,
            &exp.loss,
            &mut StreamRng::seed_from_u64(6),
            Position::default(),
        )
        .unwrap();
        assert!(r.gdl > 0.0);
        assert_eq!(r.loss_g, r.adversarial);
    }

    #[test]
    fn smoke_run_writes_log_and_checkpoints() {
        let exp = small_experiment();
        let data = subjects(8, 16, 40);
        let split = make_folds(
            &data.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            4,
            0,
        )
        .unwrap()
        .remove(1);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&exp, &split, &data, Some(dir.path())).unwrap();
        let epochs: Vec<_> = out.log.iter().filter(|r| r.is_epoch()).collect();
        assert_eq!(epochs.len(), 2);
        assert_eq!(out.log.iter().filter(|r| !r.is_epoch()).count(), 2 * 3);
        assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap(), out.log);
        let stored: FoldSplit =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SPLIT_FILE)).unwrap())
                .unwrap();
        assert_eq!(stored, split);

        let back: Generator = checkpoint::load(&dir.path().join(GENERATOR_FILE)).unwrap();
        let val: Vec<&Subject> = find_subjects(&data, &split.validation).unwrap();
        let a = validation_dice(&out.generator, &val, FitMode::Crop).unwrap();
        let b = validation_dice(&back, &val, FitMode::Crop).unwrap();
        for r in 0..3 {
            assert!((a[r] - b[r]).abs() < 1e-6);
        }
        assert!((a[0] - out.best_dice_wt).abs() < 1e-6);
        let meta = checkpoint::read_meta(&dir.path().join(GENERATOR_FILE)).unwrap();
        assert_eq!(meta["epoch"], out.best_epoch.to_string());
        assert!(dir.path().join(DISCRIMINATOR_FILE).is_file());
    }

    #[test]
    fn training_errors() {
        let exp = small_experiment();
        let data = subjects(2, 16, 1);
        let split = FoldSplit {
            fold: 0,
            train: vec![],
            validation: vec!["p0".into()],
        };
        assert!(matches!(train(&exp, &split, &data, None), Err(Error::EmptyDataset)));
        let split = FoldSplit {
            fold: 0,
            train: vec!["p0".into()],
            validation: vec![],
        };
        assert!(matches!(train(&exp, &split, &data, None), Err(Error::Config(_))));
        assert!(matches!(
            cross_validate(&exp, &[], None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn prediction_grids() {
        assert_eq!(
            fit_dims([240, 240, 155], 16, FitMode::Crop).unwrap(),
            [240, 240, 144]
        );
        assert_eq!(fit_dims([33, 33, 33], 16, FitMode::Pad).unwrap(), [48, 48, 48]);
        assert_eq!(fit_dims([32, 48, 16], 16, FitMode::Crop).unwrap(), [32, 48, 16]);
        assert!(matches!(
            fit_dims([15, 32, 32], 16, FitMode::Pad),
            Err(Error::TooSmall { minimum: 16, .. })
        ));

        let cfg = GeneratorConfig {
            base_filters: 2,
            ..Default::default()
        };
        let g = Generator::new(&cfg, &mut StreamRng::seed_from_u64(0)).unwrap();
        let v = subjects(1, 33, 2).remove(0).volume;
        for mode in [FitMode::Crop, FitMode::Pad] {
            let p = predict(&g, &v, mode).unwrap();
            assert_eq!(p.dims(), [33, 33, 33]);
        }
        // cropped margins are certain background
        let p = predict(&g, &v, FitMode::Crop).unwrap();
        let n = 33 * 33 * 33;
        let last = n - 1;
        assert_eq!(p.data()[last], 1.0);
        assert_eq!(p.data()[n + last], 0.0);
        // divisible volumes are used as is
        let v32 = subjects(1, 32, 3).remove(0).volume;
        let direct = g
            .infer(Tensor::stack(&[&v32.to_tensor()]).unwrap())
            .unwrap()
            .sample(0);
        assert_eq!(predict(&g, &v32, FitMode::Crop).unwrap().to_tensor(), direct);
    }
}

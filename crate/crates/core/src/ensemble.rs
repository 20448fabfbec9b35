//! Single-convolution ensembler fusing the probability maps of M models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpointable;
use crate::data_io::{Dims, MultiModalVolume, OneHotSegmentation, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::loss::{generalized_dice_loss, generalized_dice_loss_grad};
use crate::model::{Generator, ParamSet};
use crate::rng::{stream, StreamRng};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};
use crate::train::{predict, Adam, FitMode, TrainConfig};

/// Initial weights of the ensembler convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsemblerInit {
    /// Centre tap maps each model's class channel onto the same output
    /// class: training starts from probability averaging.
    #[default]
    Average,
    HeNormal,
}

/// Centre-tap gain of the averaging start, split evenly across models.
const AVERAGE_GAIN: f32 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsemblerConfig {
    pub models: usize,
    pub kernel_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Subtracted from every stacked probability.
    pub center: f32,
    pub validation_fraction: f64,
    pub init: EnsemblerInit,
    pub seed: u64,
}

impl Default for EnsemblerConfig {
    fn default() -> Self {
        EnsemblerConfig {
            models: 3,
            kernel_size: 3,
            epochs: 100,
            patience: 10,
            center: 0.5,
            validation_fraction: 0.2,
            init: EnsemblerInit::Average,
            seed: 0,
        }
    }
}

impl EnsemblerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models == 0 {
            return Err(Error::config("ensembler needs at least one model"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("ensembler kernel size must be odd"));
        }
        if self.epochs == 0 || self.patience == 0 || self.patience > self.epochs {
            return Err(Error::config(format!(
                "need 0 < patience {} <= epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        NUM_CLASSES * self.models
    }
}

/// Concatenates the predictions in order into a `(4M, X, Y, Z)` tensor,
/// each value shifted by `-center`.
pub fn stack_predictions(preds: &[OneHotSegmentation], center: f32) -> Result<Tensor> {
    let first = preds
        .first()
        .ok_or_else(|| Error::shape("no predictions to stack"))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(first.data().len() * preds.len());
    for p in preds {
        if p.dims() != dims {
            return Err(Error::shape(format!(
                "prediction grids differ: {:?} vs {:?}",
                dims,
                p.dims()
            )));
        }
        data.extend(p.data().iter().map(|v| v - center));
    }
    Tensor::from_vec(
        &[NUM_CLASSES * preds.len(), dims[0], dims[1], dims[2]],
        data,
    )
}

#[derive(Clone, Debug)]
pub struct Ensembler {
    cfg: EnsemblerConfig,
    params: ParamSet,
}

impl Ensembler {
    pub fn new<R: Rng + ?Sized>(cfg: &EnsemblerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let c_in = cfg.in_channels();
        let taps = k * k * k;
        let mut weight = Tensor::zeros(&[NUM_CLASSES, c_in, k, k, k]);
        match cfg.init {
            EnsemblerInit::Average => {
                let centre = taps / 2;
                let gain = AVERAGE_GAIN / cfg.models as f32;
                for c in 0..NUM_CLASSES {
                    for m in 0..cfg.models {
                        let ci = m * NUM_CLASSES + c;
                        weight.data_mut()[(c * c_in + ci) * taps + centre] = gain;
                    }
                }
            }
            EnsemblerInit::HeNormal => {
                let std = (2.0 / (c_in * taps) as f64).sqrt() as f32;
                let normal = Normal::new(0.0f32, std).expect("positive std");
                for w in weight.data_mut() {
                    *w = normal.sample(rng);
                }
            }
        }
        let mut params = ParamSet::default();
        params.push("conv.weight".into(), weight);
        params.push("conv.bias".into(), Tensor::zeros(&[NUM_CLASSES]));
        Ok(Ensembler {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &EnsemblerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &[Var], x: Var) -> Result<Var> {
        let (_, c, _) = g.value(x).dims5()?;
        if c != self.cfg.in_channels() {
            return Err(Error::shape(format!(
                "ensembler expects {} channels, got {c}",
                self.cfg.in_channels()
            )));
        }
        let logits = g.conv3d(x, p[0], Some(p[1]), ConvGeometry::new(self.cfg.kernel_size, 1))?;
        g.softmax_channels(logits)
    }

    /// Applies the ensembler to a rank-5 batch.
    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.input(x);
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Fuses one stacked `(4M, X, Y, Z)` field into a segmentation.
    pub fn apply(&self, stacked: &Tensor) -> Result<OneHotSegmentation> {
        let out = self.infer(Tensor::stack(&[stacked])?)?;
        OneHotSegmentation::from_tensor(out.sample(0))
    }
}

impl Checkpointable for Ensembler {
    const KIND: &'static str = "ensembler";
    type Config = EnsemblerConfig;

    fn build(cfg: &EnsemblerConfig) -> Result<Self> {
        Ensembler::new(cfg, &mut StreamRng::seed_from_u64(0))
    }

    fn checkpoint_config(&self) -> &EnsemblerConfig {
        &self.cfg
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// `k³ · 4M · 4 + 4`.
pub fn ensembler_parameter_count(models: usize, kernel: usize) -> usize {
    kernel.pow(3) * NUM_CLASSES * models * NUM_CLASSES + NUM_CLASSES
}

/// Patience counter on a validation loss that should decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records an epoch's loss; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.wait >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// A stacked prediction field and its one-hot ground truth.
#[derive(Clone, Debug)]
pub struct EnsembleSample {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLogRecord {
    pub epoch: usize,
    pub train_gdl: f64,
    pub val_gdl: f64,
}

pub struct EnsembleOutcome {
    pub ensembler: Ensembler,
    pub log: Vec<EnsembleLogRecord>,
    /// Epoch whose weights were restored; 0 means the initial weights.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

fn sample_dims(t: &Tensor) -> Result<Dims> {
    match *t.shape() {
        [_, x, y, z] => Ok([x, y, z]),
        _ => Err(Error::shape(format!("expected (C, X, Y, Z), got {:?}", t.shape()))),
    }
}

fn window(t: &Tensor, offset: Dims, size: Dims) -> Tensor {
    let c = t.shape()[0];
    let d = [t.shape()[1], t.shape()[2], t.shape()[3]];
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for x in 0..size[0] {
            for y in 0..size[1] {
                let start = ((ch * d[0] + offset[0] + x) * d[1] + offset[1] + y) * d[2] + offset[2];
                out.extend_from_slice(&t.data()[start..start + size[2]]);
            }
        }
    }
    Tensor::from_vec(&[c, size[0], size[1], size[2]], out).expect("window inside tensor")
}

fn validation_loss(ens: &Ensembler, val: &[EnsembleSample], eps: f64) -> Result<f64> {
    let mut sum = 0.0;
    for s in val {
        let y = ens.infer(Tensor::stack(&[&s.input])?)?;
        sum += generalized_dice_loss(&Tensor::stack(&[&s.target])?, &y, eps)?;
    }
    Ok(sum / val.len() as f64)
}

/// Adam on the dice loss over random `patch_size` windows, with early
/// stopping on the full-volume validation loss; the best weights seen,
/// including the initial ones, are restored.
pub fn train_ensembler(
    mut ens: Ensembler,
    train: &[EnsembleSample],
    val: &[EnsembleSample],
    optim: &TrainConfig,
    gdl_eps: f64,
    patch_size: usize,
) -> Result<EnsembleOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if patch_size == 0 {
        return Err(Error::config("ensembler patch size must be positive"));
    }
    let cfg = ens.cfg.clone();
    let mut adam = Adam::new(optim, ens.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_loss = validation_loss(&ens, val, gdl_eps)?;
    let mut best_params = ens.params().clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stopped_epoch = cfg.epochs;
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, &[epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(optim.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let dims = sample_dims(&s.input)?;
                let size = dims.map(|d| d.min(patch_size));
                let offset = [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - size[a]));
                xs.push(window(&s.input, offset, size));
                ys.push(window(&s.target, offset, size));
            }
            if xs.iter().any(|x| x.shape() != xs[0].shape()) {
                return Err(Error::shape("ensembler training samples differ in size"));
            }
            let x = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
            let y = Tensor::stack(&ys.iter().collect::<Vec<_>>())?;
            let grads = {
                let mut g = Graph::new();
                let p = ens.params().bind(&mut g, true);
                let xv = g.input(x);
                let out = ens.forward(&mut g, &p, xv)?;
                let (loss, seed) = generalized_dice_loss_grad(&y, g.value(out), gdl_eps)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        fold: 0,
                        epoch,
                        step: batches,
                        detail: "ensembler loss".into(),
                    });
                }
                train_loss += loss;
                g.backward(vec![(out, seed)])?;
                ens.params().grads(&g, &p)
            };
            adam.step(ens.params_mut().tensors_mut(), &grads);
            batches += 1;
        }
        let val_loss = validation_loss(&ens, val, gdl_eps)?;
        log.push(EnsembleLogRecord {
            epoch,
            train_gdl: train_loss / batches as f64,
            val_gdl: val_loss,
        });
        if stopper.observe(epoch, val_loss) && val_loss < best_loss {
            best_loss = val_loss;
            best_params = ens.params().clone();
            best_epoch = epoch;
        }
        if stopper.should_stop() {
            stopped_epoch = epoch;
            break;
        }
    }
    *ens.params_mut() = best_params;
    Ok(EnsembleOutcome {
        ensembler: ens,
        log,
        best_epoch,
        stopped_epoch,
    })
}

/// Runs every model on the full volume and stacks the outputs.
pub fn stacked_inputs(
    models: &[Generator],
    v: &MultiModalVolume,
    mode: FitMode,
    center: f32,
) -> Result<Tensor> {
    let preds = models
        .iter()
        .map(|g| predict(g, v, mode))
        .collect::<Result<Vec<_>>>()?;
    stack_predictions(&preds, center)
}

pub fn ensemble_predict(
    models: &[Generator],
    ens: &Ensembler,
    v: &MultiModalVolume,
    mode: FitMode,
) -> Result<OneHotSegmentation> {
    if models.len() != ens.cfg.models {
        return Err(Error::config(format!(
            "ensembler expects {} models, got {}",
            ens.cfg.models,
            models.len()
        )));
    }
    ens.apply(&stacked_inputs(models, v, mode, ens.cfg.center)?)
}

/// Splits subject indices into ensembler training and early-stopping
/// sets, keeping at least one subject in each.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[u64::MAX]));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    idx.sort();
    let mut val = val;
    val.sort();
    Ok((idx, val))
}

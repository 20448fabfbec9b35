//! Generator (U-Net with a densely concatenated bottleneck) and PatchGAN
//! discriminator.
//!
//! Convolutions feeding an instance normalization carry no bias: the
//! normalization's learnable shift subsumes it and a bias there would
//! never receive gradient. Output layers keep their bias.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpointable;
use crate::data_io::{Dims, MODALITIES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

/// Epsilon of every instance normalization.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub bottleneck_blocks: usize,
    pub kernel_size: usize,
    pub leaky_slope: f32,
    pub dropout: f32,
    /// Initial background probability of the output softmax, set through
    /// the head bias; `1 / num_classes` leaves the bias at zero.
    pub background_prior: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: MODALITIES,
            num_classes: NUM_CLASSES,
            depth: 4,
            base_filters: 8,
            bottleneck_blocks: 4,
            kernel_size: 4,
            leaky_slope: 0.3,
            dropout: 0.2,
            background_prior: 0.97,
        }
    }
}

impl GeneratorConfig {
    pub fn full_scale() -> Self {
        GeneratorConfig {
            base_filters: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.depth == 0 || self.kernel_size == 0 {
            return Err(Error::config("generator sizes must be positive"));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("generator channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.background_prior > 0.0 && self.background_prior < 1.0) {
            return Err(Error::config(format!(
                "background prior {} outside (0, 1)",
                self.background_prior
            )));
        }
        Ok(())
    }

    /// Spatial axes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub kernel_size: usize,
    pub leaky_slope: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: MODALITIES + NUM_CLASSES,
            depth: 4,
            base_filters: 8,
            kernel_size: 4,
            leaky_slope: 0.3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn full_scale() -> Self {
        DiscriminatorConfig {
            base_filters: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.depth == 0 || self.kernel_size == 0 {
            return Err(Error::config("discriminator sizes must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("discriminator needs input channels"));
        }
        Ok(())
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub(crate) fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on the tape, in order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t, trainable)).collect()
    }

    /// Gradients of bound parameters, zero where none reached them.
    pub fn grads(&self, g: &Graph<'_>, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, v)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// He-normal initialized convolution weight, `std = sqrt(2 / fan_in)`.
fn he_weight<R: Rng + ?Sized>(shape: [usize; 5], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let len = shape.iter().product();
    Tensor::from_vec(&shape, (0..len).map(|_| normal.sample(rng)).collect())
        .expect("length matches shape")
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeometry,
    transposed: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        transposed: bool,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let shape = if transposed {
            [c_in, c_out, k, k, k]
        } else {
            [c_out, c_in, k, k, k]
        };
        let weight = params.push(
            format!("{name}.weight"),
            he_weight(shape, c_in * k * k * k, rng),
        );
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        ConvUnit {
            weight,
            bias,
            geom,
            transposed,
        }
    }

    fn apply(&self, g: &mut Graph<'_>, p: &[Var], x: Var) -> Result<Var> {
        let b = self.bias.map(|i| p[i]);
        if self.transposed {
            g.conv_transpose3d(x, p[self.weight], b, self.geom)
        } else {
            g.conv3d(x, p[self.weight], b, self.geom)
        }
    }
}

#[derive(Clone, Debug)]
struct NormUnit {
    gamma: usize,
    beta: usize,
}

impl NormUnit {
    fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        NormUnit {
            gamma: params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, p: &[Var], x: Var) -> Result<Var> {
        g.instance_norm(x, p[self.gamma], p[self.beta], NORM_EPS)
    }
}

/// Convolution followed by instance normalization.
#[derive(Clone, Debug)]
struct Block {
    conv: ConvUnit,
    norm: NormUnit,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        Block {
            conv: ConvUnit::new(
                params,
                &format!("{name}.conv"),
                c_in,
                c_out,
                geom,
                transposed,
                false,
                rng,
            ),
            norm: NormUnit::new(params, &format!("{name}.norm"), c_out),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.conv.apply(g, p, x)?;
        self.norm.apply(g, p, h)
    }
}

fn check_divisible(dims: Dims, multiple: usize) -> Result<()> {
    if dims.iter().any(|d| d % multiple != 0 || *d == 0) {
        return Err(Error::NotDivisible {
            size: dims,
            multiple,
        });
    }
    Ok(())
}

fn encoder<R: Rng + ?Sized>(
    params: &mut ParamSet,
    c_in: usize,
    base: usize,
    depth: usize,
    kernel: usize,
    rng: &mut R,
) -> (Vec<Block>, usize) {
    let geom = ConvGeometry::new(kernel, 2);
    let mut blocks = Vec::with_capacity(depth);
    let mut channels = c_in;
    for i in 0..depth {
        let out = base << i;
        blocks.push(Block::new(
            params,
            &format!("encoder.{i}"),
            channels,
            out,
            geom,
            false,
            rng,
        ));
        channels = out;
    }
    (blocks, channels)
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamSet,
    encoder: Vec<Block>,
    bottleneck: Vec<Block>,
    decoder: Vec<Block>,
    head: ConvUnit,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let k = cfg.kernel_size;
        let (encoder, enc_out) = encoder(
            &mut params,
            cfg.in_channels,
            cfg.base_filters,
            cfg.depth,
            k,
            rng,
        );

        let same = ConvGeometry::new(k, 1);
        let mut bottleneck = Vec::with_capacity(cfg.bottleneck_blocks);
        let mut dense = enc_out;
        for j in 0..cfg.bottleneck_blocks {
            bottleneck.push(Block::new(
                &mut params,
                &format!("bottleneck.{j}"),
                dense,
                enc_out,
                same,
                false,
                rng,
            ));
            dense += enc_out;
        }

        let up = ConvGeometry::new(k, 2);
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        let mut channels = dense;
        for i in 0..cfg.depth - 1 {
            let out = cfg.base_filters << (cfg.depth - 2 - i);
            decoder.push(Block::new(
                &mut params,
                &format!("decoder.{i}"),
                channels,
                out,
                up,
                true,
                rng,
            ));
            // concatenated with the matching encoder output of equal width
            channels = 2 * out;
        }
        let head = ConvUnit::new(
            &mut params,
            "head",
            channels,
            cfg.num_classes,
            up,
            true,
            true,
            rng,
        );
        let others = (1.0 - cfg.background_prior) / (cfg.num_classes - 1).max(1) as f32;
        if let Some(b) = head.bias {
            params.tensors_mut()[b].data_mut()[0] = (cfg.background_prior / others).ln();
        }
        Ok(Generator {
            cfg: cfg.clone(),
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Maps an `(N, C_in, X, Y, Z)` batch to per-voxel class probabilities.
    ///
    /// `dropout_rng` selects training mode; `None` evaluates
    /// deterministically with dropout disabled.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        x: Var,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let (_, c, dims) = g.value(x).dims5()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        check_divisible(dims, self.cfg.multiple())?;
        let slope = self.cfg.leaky_slope;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            let n = block.apply(g, p, h)?;
            h = g.leaky_relu(n, slope);
            skips.push(h);
        }
        let mut dense = h;
        for block in &self.bottleneck {
            let n = block.apply(g, p, dense)?;
            let mut out = g.leaky_relu(n, slope);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                out = g.dropout(out, self.cfg.dropout, rng);
            }
            dense = g.concat(&[dense, out])?;
        }
        h = dense;
        for (i, block) in self.decoder.iter().enumerate() {
            let n = block.apply(g, p, h)?;
            let a = g.relu(n);
            h = g.concat(&[a, skips[self.encoder.len() - 2 - i]])?;
        }
        let logits = self.head.apply(g, p, h)?;
        g.softmax_channels(logits)
    }

    /// Inference on a batch tensor, returning the probability tensor.
    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.input(x);
        let y = self.forward(&mut g, &p, xv, None)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
    encoder: Vec<Block>,
    head: ConvUnit,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let k = cfg.kernel_size;
        let (encoder, enc_out) = encoder(
            &mut params,
            cfg.in_channels,
            cfg.base_filters,
            cfg.depth,
            k,
            rng,
        );
        let head = ConvUnit::new(
            &mut params,
            "head",
            enc_out,
            1,
            ConvGeometry::new(k, 1),
            false,
            true,
            rng,
        );
        Ok(Discriminator {
            cfg: cfg.clone(),
            params,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Scores an (image, segmentation) pair with a `(N, 1, X/2^d, Y/2^d,
    /// Z/2^d)` field of raw (unbounded) patch scores.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        image: Var,
        segmentation: Var,
    ) -> Result<Var> {
        let (ni, ci, di) = g.value(image).dims5()?;
        let (ns, cs, ds) = g.value(segmentation).dims5()?;
        if ni != ns || di != ds {
            return Err(Error::shape(format!(
                "image {:?} and segmentation {:?} differ",
                g.value(image).shape(),
                g.value(segmentation).shape()
            )));
        }
        if ci + cs != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {}",
                self.cfg.in_channels,
                ci + cs
            )));
        }
        check_divisible(di, self.cfg.multiple())?;
        let mut h = g.concat(&[image, segmentation])?;
        for block in &self.encoder {
            let n = block.apply(g, p, h)?;
            h = g.leaky_relu(n, self.cfg.leaky_slope);
        }
        self.head.apply(g, p, h)
    }

    pub fn score(&self, image: Tensor, segmentation: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let i = g.input(image);
        let s = g.input(segmentation);
        let y = self.forward(&mut g, &p, i, s)?;
        Ok(g.value(y).clone())
    }
}

impl Checkpointable for Generator {
    const KIND: &'static str = "generator";
    type Config = GeneratorConfig;

    fn build(cfg: &GeneratorConfig) -> Result<Self> {
        Generator::new(cfg, &mut StreamRng::seed_from_u64(0))
    }

    fn checkpoint_config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl Checkpointable for Discriminator {
    const KIND: &'static str = "discriminator";
    type Config = DiscriminatorConfig;

    fn build(cfg: &DiscriminatorConfig) -> Result<Self> {
        Discriminator::new(cfg, &mut StreamRng::seed_from_u64(0))
    }

    fn checkpoint_config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

pub fn count_parameters(params: &ParamSet) -> usize {
    params.count()
}

//! Semantic boundary detection module.
//!
//! Each feature level goes through its own upsampling block (1×1 conv, 3×3
//! conv to 32 channels, bilinear resize to the output size). The upsampled
//! levels are concatenated and reduced by two 3×3 conv + ReLU layers to one
//! initial boundary channel per class. Every class channel is paired with a
//! copy of the Canny map and mixed by a per-class 1×1 convolution, and a
//! sigmoid gives the final boundary probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{boundary_bce, BoundaryStack, ImageTags, LossConfig};
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, concat_channels, conv2d, conv2d_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, split_channels, ConvKernel, Scalar, Tensor,
};

/// Channel width of every upsampling block.
pub const BLOCK_WIDTH: usize = 32;

/// Layer widths of the module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SbdmArch {
    /// Channel count of each input feature level.
    pub level_channels: Vec<usize>,
    /// Classes including background.
    pub k_total: usize,
    /// Width of the first fusion convolution.
    pub hidden: usize,
}

impl SbdmArch {
    pub fn new(level_channels: Vec<usize>, k_total: usize) -> Self {
        Self {
            level_channels,
            k_total,
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() || self.level_channels.contains(&0) {
            return Err(Error::InvalidArgument("SBDM needs at least one non-empty feature level".into()));
        }
        if self.k_total < 1 || self.hidden < 1 {
            return Err(Error::InvalidArgument("SBDM widths must be positive".into()));
        }
        Ok(())
    }
}

/// Upsampling block of one feature level.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock<T = f32> {
    pub reduce: ConvKernel<T>,
    pub refine: ConvKernel<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbdmParams<T = f32> {
    pub levels: Vec<UpBlock<T>>,
    pub fuse1: ConvKernel<T>,
    pub fuse2: ConvKernel<T>,
    /// Grouped 1×1: group `c` reads `[initial_c, canny]`.
    pub mix: ConvKernel<T>,
}

fn xavier<T: Scalar>(
    rng: &mut ChaCha8Rng,
    groups: usize,
    in_per_group: usize,
    out: usize,
    k: usize,
) -> Result<ConvKernel<T>> {
    let fan_in = in_per_group * k * k;
    let fan_out = (out / groups) * k * k;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weights = (0..out * in_per_group * k * k)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    ConvKernel::grouped(groups, in_per_group, out, k, k, weights, vec![T::zero(); out])
}

impl<T: Scalar> SbdmParams<T> {
    /// Glorot-uniform weights and zero biases, reproducible from `seed`.
    pub fn init(arch: &SbdmArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = arch
            .level_channels
            .iter()
            .map(|&c| {
                Ok(UpBlock {
                    reduce: xavier(&mut rng, 1, c, BLOCK_WIDTH, 1)?,
                    refine: xavier(&mut rng, 1, BLOCK_WIDTH, BLOCK_WIDTH, 3)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = BLOCK_WIDTH * arch.level_channels.len();
        Ok(Self {
            levels,
            fuse1: xavier(&mut rng, 1, cat, arch.hidden, 3)?,
            fuse2: xavier(&mut rng, 1, arch.hidden, arch.k_total, 3)?,
            mix: xavier(&mut rng, arch.k_total, 2, arch.k_total, 1)?,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: &SbdmArch) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        p.kernels_mut().into_iter().for_each(|k| *k = k.zeros_like());
        Ok(p)
    }

    pub fn k_total(&self) -> usize {
        self.mix.out_channels()
    }

    pub fn arch(&self) -> SbdmArch {
        SbdmArch {
            level_channels: self.levels.iter().map(|l| l.reduce.in_channels()).collect(),
            k_total: self.k_total(),
            hidden: self.fuse1.out_channels(),
        }
    }

    /// Kernels in a fixed order matching [`SbdmParams::kernel_names`].
    pub fn kernels(&self) -> Vec<&ConvKernel<T>> {
        let mut out: Vec<&ConvKernel<T>> = Vec::new();
        for l in &self.levels {
            out.push(&l.reduce);
            out.push(&l.refine);
        }
        out.extend([&self.fuse1, &self.fuse2, &self.mix]);
        out
    }

    pub fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        let mut out: Vec<&mut ConvKernel<T>> = Vec::new();
        for l in &mut self.levels {
            out.push(&mut l.reduce);
            out.push(&mut l.refine);
        }
        out.push(&mut self.fuse1);
        out.push(&mut self.fuse2);
        out.push(&mut self.mix);
        out
    }

    pub fn kernel_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.levels.len() {
            names.push(format!("level{i}.reduce"));
            names.push(format!("level{i}.refine"));
        }
        names.extend(["fuse1", "fuse2", "mix"].map(String::from));
        names
    }

    pub fn cast<U: Scalar>(&self) -> SbdmParams<U> {
        SbdmParams {
            levels: self
                .levels
                .iter()
                .map(|l| UpBlock {
                    reduce: l.reduce.cast(),
                    refine: l.refine.cast(),
                })
                .collect(),
            fuse1: self.fuse1.cast(),
            fuse2: self.fuse2.cast(),
            mix: self.mix.cast(),
        }
    }

    /// Checks that the kernels chain together: every block maps its level
    /// to [`BLOCK_WIDTH`] channels, the fusion layers are 3×3 and the mix is
    /// a per-class 1×1 over `[initial_c, canny]` pairs.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidKernel(what));
        if self.levels.is_empty() {
            return bad("SBDM needs at least one feature level".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.reduce.out_channels() != BLOCK_WIDTH || l.reduce.kernel_size() != (1, 1) || l.reduce.groups() != 1 {
                return bad(format!("level{i}.reduce must be a dense 1x1 conv to {BLOCK_WIDTH} channels"));
            }
            if l.refine.in_channels() != BLOCK_WIDTH
                || l.refine.out_channels() != BLOCK_WIDTH
                || l.refine.kernel_size() != (3, 3)
                || l.refine.groups() != 1
            {
                return bad(format!("level{i}.refine must be a dense 3x3 conv {BLOCK_WIDTH} -> {BLOCK_WIDTH}"));
            }
        }
        let cat = BLOCK_WIDTH * self.levels.len();
        if self.fuse1.in_channels() != cat || self.fuse1.kernel_size() != (3, 3) || self.fuse1.groups() != 1 {
            return bad(format!("fuse1 must be a dense 3x3 conv from {cat} channels"));
        }
        if self.fuse2.in_channels() != self.fuse1.out_channels()
            || self.fuse2.kernel_size() != (3, 3)
            || self.fuse2.groups() != 1
        {
            return bad("fuse2 must be a dense 3x3 conv reading fuse1".into());
        }
        let k = self.fuse2.out_channels();
        if self.mix.groups() != k || self.mix.in_per_group() != 2 || self.mix.out_channels() != k || self.mix.kernel_size() != (1, 1) {
            return bad(format!("mix must be a 1x1 conv with {k} groups of 2 inputs"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.kernels()
            .iter()
            .all(|k| k.weights.iter().chain(&k.bias).all(|v| v.is_finite()))
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T = f32> {
    level_inputs: Vec<Tensor<T>>,
    level_reduced: Vec<Tensor<T>>,
    level_sizes: Vec<(usize, usize)>,
    concat: Tensor<T>,
    fuse1_pre: Tensor<T>,
    fuse1_out: Tensor<T>,
    fuse2_pre: Tensor<T>,
    mixed_in: Tensor<T>,
    pub output: BoundaryStack<T>,
}

/// Initial boundary channels interleaved with copies of the Canny map:
/// `[init_0, canny, init_1, canny, ...]`.
pub fn interleave_with_edges<T: Scalar>(initial: &Tensor<T>, edges: &Tensor<T>) -> Result<Tensor<T>> {
    if edges.channels() != 1 || (edges.height(), edges.width()) != (initial.height(), initial.width()) {
        return Err(Error::shape(
            "interleave_with_edges",
            format!("1x{}x{} edge map", initial.height(), initial.width()),
            crate::tensor::shape_str(edges.shape()),
        ));
    }
    let k = initial.channels();
    let n = initial.plane_len();
    let mut data = Vec::with_capacity(2 * k * n);
    for c in 0..k {
        data.extend_from_slice(initial.channel(c));
        data.extend_from_slice(edges.data());
    }
    Tensor::new(2 * k, initial.height(), initial.width(), data)
}

fn check_inputs<T: Scalar>(features: &[Tensor<T>], edges: &Tensor<T>, params: &SbdmParams<T>) -> Result<()> {
    if features.len() != params.levels.len() {
        return Err(Error::InvalidArgument(format!(
            "SBDM expects {} feature levels, got {}",
            params.levels.len(),
            features.len()
        )));
    }
    if edges.channels() != 1 {
        return Err(Error::shape("sbdm_forward", "1-channel edge map", crate::tensor::shape_str(edges.shape())));
    }
    Ok(())
}

/// Boundary prediction with the activations needed for [`sbdm_backward`].
pub fn sbdm_forward_cached<T: Scalar>(
    features: &[Tensor<T>],
    edges: &BoundaryStack<T>,
    params: &SbdmParams<T>,
) -> Result<ForwardCache<T>> {
    check_inputs(features, edges, params)?;
    let (h, w) = (edges.height(), edges.width());
    let mut level_reduced = Vec::with_capacity(features.len());
    let mut upsampled = Vec::with_capacity(features.len());
    for (f, block) in features.iter().zip(&params.levels) {
        let reduced = conv2d(f, &block.reduce)?;
        let refined = conv2d(&reduced, &block.refine)?;
        upsampled.push(bilinear_upsample(&refined, h, w)?);
        level_reduced.push(reduced);
    }
    let refs: Vec<&Tensor<T>> = upsampled.iter().collect();
    let concat = concat_channels(&refs)?;
    let fuse1_pre = conv2d(&concat, &params.fuse1)?;
    let fuse1_out = relu(&fuse1_pre);
    let fuse2_pre = conv2d(&fuse1_out, &params.fuse2)?;
    let initial = relu(&fuse2_pre);
    let mixed_in = interleave_with_edges(&initial, edges)?;
    let output = sigmoid(&conv2d(&mixed_in, &params.mix)?);
    Ok(ForwardCache {
        level_inputs: features.to_vec(),
        level_sizes: features.iter().map(|f| (f.height(), f.width())).collect(),
        level_reduced,
        concat,
        fuse1_pre,
        fuse1_out,
        fuse2_pre,
        mixed_in,
        output,
    })
}

/// Semantic boundary probabilities, one channel per class, at the size of
/// the edge map.
pub fn sbdm_forward<T: Scalar>(
    features: &[Tensor<T>],
    edges: &BoundaryStack<T>,
    params: &SbdmParams<T>,
) -> Result<BoundaryStack<T>> {
    Ok(sbdm_forward_cached(features, edges, params)?.output)
}

/// Parameter gradients given `∂L/∂B`.
pub fn sbdm_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    params: &SbdmParams<T>,
    grad_output: &Tensor<T>,
) -> Result<SbdmParams<T>> {
    let g_logits = sigmoid_backward(&cache.output, grad_output)?;
    let (g_mixed, g_mix) = conv2d_backward(&cache.mixed_in, &params.mix, &g_logits)?;
    let k = params.k_total();
    let n = g_mixed.plane_len();
    let mut g_initial = Tensor::zeros(k, cache.mixed_in.height(), cache.mixed_in.width());
    for c in 0..k {
        g_initial.channel_mut(c).copy_from_slice(&g_mixed.data()[2 * c * n..(2 * c + 1) * n]);
    }
    let g_fuse2_pre = relu_backward(&cache.fuse2_pre, &g_initial)?;
    let (g_fuse1_out, g_fuse2) = conv2d_backward(&cache.fuse1_out, &params.fuse2, &g_fuse2_pre)?;
    let g_fuse1_pre = relu_backward(&cache.fuse1_pre, &g_fuse1_out)?;
    let (g_concat, g_fuse1) = conv2d_backward(&cache.concat, &params.fuse1, &g_fuse1_pre)?;
    let counts = vec![BLOCK_WIDTH; params.levels.len()];
    let g_levels = split_channels(&g_concat, &counts)?;

    let mut levels = Vec::with_capacity(params.levels.len());
    for (i, block) in params.levels.iter().enumerate() {
        let (lh, lw) = cache.level_sizes[i];
        let g_refined = bilinear_upsample_backward(lh, lw, &g_levels[i])?;
        let (g_reduced, g_refine) = conv2d_backward(&cache.level_reduced[i], &block.refine, &g_refined)?;
        let (_, g_reduce) = conv2d_backward(&cache.level_inputs[i], &block.reduce, &g_reduced)?;
        levels.push(UpBlock {
            reduce: g_reduce,
            refine: g_refine,
        });
    }
    Ok(SbdmParams {
        levels,
        fuse1: g_fuse1,
        fuse2: g_fuse2,
        mix: g_mix,
    })
}

/// One training example: feature levels, Canny map, boundary target and tags.
#[derive(Clone, Debug)]
pub struct SbdmSample<T = f32> {
    pub features: Vec<Tensor<T>>,
    pub edges: BoundaryStack<T>,
    pub target: BoundaryStack<T>,
    pub tags: ImageTags,
}

/// `λ₁ L_B` of the module's prediction, and its parameter gradients.
pub fn sbdm_loss_and_grad<T: Scalar>(
    params: &SbdmParams<T>,
    sample: &SbdmSample<T>,
    loss_config: &LossConfig,
) -> Result<(f64, SbdmParams<T>)> {
    let cache = sbdm_forward_cached(&sample.features, &sample.edges, params)?;
    let bce = boundary_bce(&cache.output, &sample.target, &sample.tags, loss_config.bce_clamp)?;
    let mut g = bce.grad;
    g.scale(T::of(loss_config.lambda1));
    let grads = sbdm_backward(&cache, params, &g)?;
    Ok((loss_config.lambda1 * bce.value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub l_init: f64,
    pub gamma: f64,
    pub max_itr: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l_init: 0.01,
            gamma: 0.9,
            max_itr: 200,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_init > 0.0 && self.l_init.is_finite()) {
            return Err(Error::InvalidArgument(format!("l_init must be positive, got {}", self.l_init)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.max_itr == 0 {
            return Err(Error::InvalidArgument("max_itr must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Poly decay `l_init · (1 - itr / max_itr)^γ`.
pub fn poly_lr(itr: usize, config: &TrainConfig) -> Result<f64> {
    if itr > config.max_itr {
        return Err(Error::InvalidArgument(format!(
            "iteration {itr} exceeds max_itr {}",
            config.max_itr
        )));
    }
    Ok(config.l_init * (1.0 - itr as f64 / config.max_itr as f64).powf(config.gamma))
}

/// SGD with momentum on `λ₁ L_B`, scheduled by [`poly_lr`].
#[derive(Clone, Debug)]
pub struct SbdmTrainer {
    pub params: SbdmParams,
    velocity: SbdmParams,
    pub config: TrainConfig,
    pub loss_config: LossConfig,
}

impl SbdmTrainer {
    pub fn new(arch: &SbdmArch, config: TrainConfig, loss_config: LossConfig) -> Result<Self> {
        config.validate()?;
        loss_config.validate()?;
        let params = SbdmParams::init(arch, config.seed)?;
        Ok(Self::from_params(params, config, loss_config))
    }

    pub fn from_params(params: SbdmParams, config: TrainConfig, loss_config: LossConfig) -> Self {
        let mut velocity = params.clone();
        velocity.kernels_mut().into_iter().for_each(|k| *k = k.zeros_like());
        Self {
            params,
            velocity,
            config,
            loss_config,
        }
    }

    /// One update at iteration `itr`; returns the loss before the update.
    pub fn step(&mut self, sample: &SbdmSample, itr: usize) -> Result<f64> {
        let lr = poly_lr(itr, &self.config)?;
        let (loss, grads) = sbdm_loss_and_grad(&self.params, sample, &self.loss_config)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("boundary loss at iteration {itr}")));
        }
        let momentum = self.config.momentum as f32;
        let lr = lr as f32;
        for ((p, v), g) in self
            .params
            .kernels_mut()
            .into_iter()
            .zip(self.velocity.kernels_mut())
            .zip(grads.kernels())
        {
            let pairs = p
                .weights
                .iter_mut()
                .chain(p.bias.iter_mut())
                .zip(v.weights.iter_mut().chain(v.bias.iter_mut()))
                .zip(g.weights.iter().chain(&g.bias));
            for ((pv, vv), &gv) in pairs {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {itr}")));
        }
        Ok(loss)
    }

    /// Runs `max_itr` steps cycling through `samples`; returns per-step losses.
    pub fn train(&mut self, samples: &[SbdmSample]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        (0..self.config.max_itr)
            .map(|itr| self.step(&samples[itr % samples.len()], itr))
            .collect()
    }
}

/// `λ₁ L_B` of the module's prediction, without gradients.
pub fn sbdm_boundary_loss<T: Scalar>(
    params: &SbdmParams<T>,
    sample: &SbdmSample<T>,
    loss_config: &LossConfig,
) -> Result<f64> {
    let b = sbdm_forward(&sample.features, &sample.edges, params)?;
    Ok(loss_config.lambda1 * boundary_bce(&b, &sample.target, &sample.tags, loss_config.bce_clamp)?.value)
}

/// Mean `λ₁ L_B` over samples.
pub fn mean_boundary_loss(params: &SbdmParams, samples: &[SbdmSample], loss_config: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sbdm_boundary_loss(params, s, loss_config)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

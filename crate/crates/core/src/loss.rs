//! Boundary cross-entropy, boundary-guided smoothness losses and the
//! weighted training objective. Every loss returns its value together with
//! the exact gradient with respect to the map it penalizes.
//!
//! Values are accumulated in `f64` regardless of the tensor precision.

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::tensor::{shape_str, Scalar, Tensor};

/// Per-class activation scores, one channel per class including background.
pub type CamStack<T = f32> = Tensor<T>;

/// Per-class boundary responses in `[0, 1]`; also used for the one-channel
/// Canny map.
pub type BoundaryStack<T = f32> = Tensor<T>;

/// Image-level class tags. Channel 0 (background) is governed by
/// `background`; channel `c >= 1` by `foreground[c - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageTags {
    pub background: bool,
    pub foreground: Vec<bool>,
}

impl ImageTags {
    pub fn new(foreground: Vec<bool>) -> Self {
        Self {
            background: true,
            foreground,
        }
    }

    /// Tags of every foreground class present in `labels`.
    pub fn from_labels(labels: &LabelMap, num_classes: usize) -> Self {
        let mut foreground = vec![false; num_classes.saturating_sub(1)];
        for &l in &labels.data {
            if l >= 1 && (l as usize) < num_classes {
                foreground[l as usize - 1] = true;
            }
        }
        Self::new(foreground)
    }

    /// Number of channels these tags describe (foreground + background).
    pub fn k_total(&self) -> usize {
        self.foreground.len() + 1
    }

    pub fn is_active(&self, channel: usize) -> bool {
        match channel {
            0 => self.background,
            c => self.foreground.get(c - 1).copied().unwrap_or(false),
        }
    }

    pub fn active_channels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k_total()).filter(|&c| self.is_active(c))
    }

    fn check(&self, op: &'static str, channels: usize) -> Result<()> {
        if self.k_total() != channels {
            return Err(Error::shape(
                op,
                format!("tags for {channels} channels"),
                format!("tags for {} channels", self.k_total()),
            ));
        }
        Ok(())
    }
}

/// How the boundary map gates the smoothness penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuideMode {
    /// Weight `exp(-α |δS|)`: the derivative of the boundary map.
    #[default]
    Gradient,
    /// Weight `exp(-α S)`: the boundary response itself.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Sharpness of the boundary gate.
    pub alpha: f64,
    /// Weight of the second-order smoothness term.
    pub lambda_s: f64,
    /// Weight of the boundary cross-entropy in the total objective.
    pub lambda1: f64,
    /// Weight of the smoothness loss in the total objective.
    pub lambda2: f64,
    pub psi_eps: f64,
    pub bce_clamp: f64,
    /// Divide smoothness values and gradients by the pixel count.
    pub normalize: bool,
    pub guide_mode: GuideMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            lambda_s: 10.0,
            lambda1: 0.05,
            lambda2: 1.0,
            psi_eps: 1e-6,
            bce_clamp: 1e-7,
            normalize: false,
            guide_mode: GuideMode::Gradient,
        }
    }
}

/// Smoothness weights swept in the ablation over `lambda2`.
pub const LAMBDA2_SWEEP: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("lambda_s", self.lambda_s),
            ("psi_eps", self.psi_eps),
            ("bce_clamp", self.bce_clamp),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        // the objective weights may be switched off entirely
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.bce_clamp >= 0.5 {
            return Err(Error::InvalidArgument("bce_clamp must be below 0.5".into()));
        }
        Ok(())
    }

    /// Copy with a different smoothness weight, for λ₂ sweeps.
    pub fn with_lambda2(self, lambda2: f64) -> Self {
        Self { lambda2, ..self }
    }
}

/// Charbonnier penalty `sqrt(s² + eps)`.
#[inline]
pub fn psi(s: f64, eps: f64) -> f64 {
    (s * s + eps).sqrt()
}

#[inline]
pub fn psi_derivative(s: f64, eps: f64) -> f64 {
    s / psi(s, eps)
}

/// A scalar loss and its gradient with respect to one map.
#[derive(Clone, Debug)]
pub struct LossGrad<T = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn from_int(order: u32) -> Result<Self> {
        match order {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            o => Err(Error::InvalidArgument(format!("smoothness order must be 1 or 2, got {o}"))),
        }
    }
}

/// Stencil taps `(offset, coefficient)` of the discrete derivative at
/// position `i` along an axis of length `n`; empty where the derivative is
/// defined as zero at the border.
pub(crate) fn stencil(order: Order, i: usize, n: usize) -> &'static [(isize, f64)] {
    match order {
        Order::First if i + 1 < n => &[(0, -1.0), (1, 1.0)],
        Order::Second if i > 0 && i + 1 < n => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        _ => &[],
    }
}

/// Weight of one smoothness term given the guide's derivative `ds` and its
/// value `s` at the term's pixel.
#[inline]
pub(crate) fn gate(config: &LossConfig, ds: f64, s: f64) -> f64 {
    match config.guide_mode {
        GuideMode::Gradient => (-config.alpha * ds.abs()).exp(),
        GuideMode::Direct => (-config.alpha * s.abs()).exp(),
    }
}

/// Boundary-guided smoothness loss of the given derivative order.
///
/// Sums `Ψ(|δ_d C| · exp(-α |δ_d S|))` over active classes, pixels and both
/// axes. First-order derivatives are forward differences, second-order ones
/// the `[1, -2, 1]` stencil; derivatives that would reach past the border
/// are zero, so every pixel contributes one term per axis.
pub fn smoothness_loss<T: Scalar>(
    cam: &CamStack<T>,
    guide: &BoundaryStack<T>,
    tags: &ImageTags,
    order: Order,
    config: &LossConfig,
) -> Result<LossGrad<T>> {
    guide.expect_shape("smoothness_loss", cam)?;
    tags.check("smoothness_loss", cam.channels())?;
    let (k, h, w) = cam.shape();
    let eps = config.psi_eps;
    let norm = if config.normalize { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut value = 0.0;
    let mut grad = vec![0.0f64; k * h * w];

    for c in tags.active_channels() {
        let cp = cam.channel(c);
        let sp = guide.channel(c);
        let gp = &mut grad[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // (taps, stride) per axis
                let axes = [(stencil(order, x, w), 1isize), (stencil(order, y, h), w as isize)];
                for (taps, stride) in axes {
                    let centre = (y * w + x) as isize;
                    let mut dc = 0.0;
                    let mut ds = 0.0;
                    for &(off, coef) in taps {
                        let j = (centre + off * stride) as usize;
                        dc += coef * cp[j].as_f64();
                        ds += coef * sp[j].as_f64();
                    }
                    let gate = gate(config, ds, sp[centre as usize].as_f64());
                    let s = dc * gate;
                    value += psi(s, eps);
                    let ds_dc = psi_derivative(s, eps) * gate;
                    for &(off, coef) in taps {
                        let j = (centre + off * stride) as usize;
                        gp[j] += coef * ds_dc;
                    }
                }
            }
        }
    }
    let grad = grad.into_iter().map(|g| T::of(g * norm)).collect();
    Ok(LossGrad {
        value: value * norm,
        grad: Tensor::new(k, h, w, grad)?,
    })
}

/// `L_S = L_S¹ + λ_s · L_S²`, with gradients combined the same way.
pub fn combine_smoothness<T: Scalar>(
    first: &LossGrad<T>,
    second: &LossGrad<T>,
    config: &LossConfig,
) -> Result<LossGrad<T>> {
    second.grad.expect_shape("combine_smoothness", &first.grad)?;
    let mut grad = first.grad.clone();
    grad.add_scaled(&second.grad, T::of(config.lambda_s))?;
    Ok(LossGrad {
        value: first.value + config.lambda_s * second.value,
        grad,
    })
}

/// First-order, second-order and combined smoothness losses in one call.
pub fn smoothness_terms<T: Scalar>(
    cam: &CamStack<T>,
    guide: &BoundaryStack<T>,
    tags: &ImageTags,
    config: &LossConfig,
) -> Result<[LossGrad<T>; 3]> {
    let first = smoothness_loss(cam, guide, tags, Order::First, config)?;
    let second = smoothness_loss(cam, guide, tags, Order::Second, config)?;
    let combined = combine_smoothness(&first, &second, config)?;
    Ok([first, second, combined])
}

/// Binary cross-entropy of predicted boundaries against a binary target.
///
/// Targets are binarized at 0.5; predictions are clamped to
/// `[clamp, 1 - clamp]`, and the gradient is zero where clamping is active.
pub fn boundary_bce<T: Scalar>(
    pred: &BoundaryStack<T>,
    target: &BoundaryStack<T>,
    tags: &ImageTags,
    clamp: f64,
) -> Result<LossGrad<T>> {
    target.expect_shape("boundary_bce", pred)?;
    tags.check("boundary_bce", pred.channels())?;
    let (k, h, w) = pred.shape();
    let mut value = 0.0;
    let mut grad = vec![T::zero(); k * h * w];
    for c in tags.active_channels() {
        let range = c * h * w..(c + 1) * h * w;
        for i in range {
            let raw = pred.data()[i].as_f64();
            let t = if target.data()[i].as_f64() >= 0.5 { 1.0 } else { 0.0 };
            let p = raw.clamp(clamp, 1.0 - clamp);
            value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            if raw > clamp && raw < 1.0 - clamp {
                grad[i] = T::of((p - t) / (p * (1.0 - p)));
            }
        }
    }
    Ok(LossGrad {
        value,
        grad: Tensor::new(k, h, w, grad)?,
    })
}

/// The weighted training objective and the gradients this crate owns.
///
/// The baseline term enters with weight 1, so its (external) gradient is
/// used unchanged by the caller.
#[derive(Clone, Debug)]
pub struct Objective<T = f32> {
    pub value: f64,
    /// `λ₁ ∂L_B/∂B`
    pub grad_boundary: Tensor<T>,
    /// `λ₂ ∂L_S/∂C`
    pub grad_cam: Tensor<T>,
}

/// `L = L_b + λ₁ L_B + λ₂ L_S`.
pub fn total_objective<T: Scalar>(
    base_loss: f64,
    boundary: &LossGrad<T>,
    smoothness: &LossGrad<T>,
    config: &LossConfig,
) -> Result<Objective<T>> {
    for (name, v) in [
        ("base loss", base_loss),
        ("boundary loss", boundary.value),
        ("smoothness loss", smoothness.value),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let mut grad_boundary = boundary.grad.clone();
    grad_boundary.scale(T::of(config.lambda1));
    let mut grad_cam = smoothness.grad.clone();
    grad_cam.scale(T::of(config.lambda2));
    Ok(Objective {
        value: base_loss + config.lambda1 * boundary.value + config.lambda2 * smoothness.value,
        grad_boundary,
        grad_cam,
    })
}

pub(crate) fn check_channels<T: Scalar>(op: &'static str, t: &Tensor<T>, k_total: usize) -> Result<()> {
    if t.channels() != k_total {
        return Err(Error::shape(
            op,
            format!("{k_total} channels"),
            shape_str(t.shape()),
        ));
    }
    Ok(())
}

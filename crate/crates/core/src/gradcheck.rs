//! Central finite-difference verification of the analytic gradients.
//!
//! Every check evaluates the loss in `f64` and compares against the
//! analytic gradient computed by the production code path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{boundary_bce, smoothness_loss, ImageTags, LossConfig, Order};
use crate::sbdm::{sbdm_boundary_loss, sbdm_loss_and_grad, SbdmArch, SbdmParams, SbdmSample};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-4;
/// Fraction of components that must meet [`REL_TOL`].
pub const REL_FRACTION: f64 = 0.95;

/// Relative error with the larger magnitude as denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Accumulated comparison statistics over many components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub components: usize,
    /// Components with relative error below [`REL_TOL`].
    pub rel_ok: usize,
    /// Components failing both the relative and the absolute tolerance.
    pub failures: usize,
    pub max_rel_error: f64,
    /// Largest absolute error among components that missed [`REL_TOL`].
    pub max_abs_error_outside: f64,
}

impl GradReport {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        let abs = (analytic - numeric).abs();
        self.components += 1;
        self.max_rel_error = self.max_rel_error.max(rel);
        if rel < REL_TOL {
            self.rel_ok += 1;
        } else {
            self.max_abs_error_outside = self.max_abs_error_outside.max(abs);
            if abs >= ABS_TOL {
                self.failures += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.components += other.components;
        self.rel_ok += other.rel_ok;
        self.failures += other.failures;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error_outside = self.max_abs_error_outside.max(other.max_abs_error_outside);
    }

    pub fn rel_fraction(&self) -> f64 {
        if self.components == 0 {
            1.0
        } else {
            self.rel_ok as f64 / self.components as f64
        }
    }

    /// ≥95 % within the relative tolerance and every other component within
    /// the absolute tolerance.
    pub fn passed(&self) -> bool {
        self.rel_fraction() >= REL_FRACTION && self.failures == 0
    }
}

/// Compares `analytic` against central differences of `f` at `x` on the
/// listed coordinates (all coordinates when `coords` is `None`).
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    h: f64,
) -> GradReport {
    let mut report = GradReport::default();
    let mut x = x.to_vec();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    for &i in coords {
        let numeric = central_difference(&mut f, &mut x, i, h);
        report.record(analytic[i], numeric);
    }
    report
}

/// Losses covered by the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    SmoothnessFirst,
    SmoothnessSecond,
    BoundaryBce,
    SbdmChain,
}

impl Subject {
    pub const ALL: [Subject; 4] = [
        Subject::SmoothnessFirst,
        Subject::SmoothnessSecond,
        Subject::BoundaryBce,
        Subject::SbdmChain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subject::SmoothnessFirst => "smoothness_first_order",
            Subject::SmoothnessSecond => "smoothness_second_order",
            Subject::BoundaryBce => "boundary_bce",
            Subject::SbdmChain => "sbdm_chain",
        }
    }
}

/// Shape of the random instances.
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Weight components sampled per kernel per instance for the SBDM chain;
    /// one bias component per kernel is always added.
    pub sbdm_samples_per_kernel: usize,
    pub step: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            channels: 3,
            height: 8,
            width: 8,
            sbdm_samples_per_kernel: 1,
            step: FD_STEP,
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0))
}

fn random_tags(rng: &mut ChaCha8Rng, channels: usize) -> ImageTags {
    let mut fg: Vec<bool> = (1..channels).map(|_| rng.random_bool(0.6)).collect();
    if !fg.is_empty() && !fg.contains(&true) {
        let i = rng.random_range(0..fg.len());
        fg[i] = true;
    }
    ImageTags::new(fg)
}

fn check_map_loss(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    mut value: impl FnMut(&Tensor<f64>) -> f64,
) -> GradReport {
    let (c, h, w) = x.shape();
    check_gradient(
        |v| value(&Tensor::new(c, h, w, v.to_vec()).expect("shape preserved")),
        x.data(),
        analytic.data(),
        None,
        step,
    )
}

/// Runs one subject over `config.instances` seeded random instances.
pub fn run_subject(subject: Subject, seed: u64, config: &SuiteConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let loss_config = LossConfig::default();
    let (k, h, w) = (config.channels, config.height, config.width);
    let mut report = GradReport::default();
    for _ in 0..config.instances {
        let tags = random_tags(&mut rng, k);
        let r = match subject {
            Subject::SmoothnessFirst | Subject::SmoothnessSecond => {
                let order = if subject == Subject::SmoothnessFirst {
                    Order::First
                } else {
                    Order::Second
                };
                let cam = random_map(&mut rng, k, h, w);
                let guide = random_map(&mut rng, k, h, w);
                let out = smoothness_loss(&cam, &guide, &tags, order, &loss_config)?;
                check_map_loss(&cam, &out.grad, config.step, |c| {
                    smoothness_loss(c, &guide, &tags, order, &loss_config)
                        .expect("valid shapes")
                        .value
                })
            }
            Subject::BoundaryBce => {
                let pred = Tensor::from_fn(k, h, w, |_, _, _| rng.random_range(0.05..0.95));
                let target = Tensor::from_fn(k, h, w, |_, _, _| rng.random_bool(0.3) as u8 as f64);
                let clamp = loss_config.bce_clamp;
                let out = boundary_bce(&pred, &target, &tags, clamp)?;
                check_map_loss(&pred, &out.grad, config.step, |p| {
                    boundary_bce(p, &target, &tags, clamp).expect("valid shapes").value
                })
            }
            Subject::SbdmChain => check_sbdm_instance(&mut rng, k, h, w, &tags, &loss_config, config)?,
        };
        report.merge(&r);
    }
    Ok(report)
}

fn check_sbdm_instance(
    rng: &mut ChaCha8Rng,
    k: usize,
    h: usize,
    w: usize,
    tags: &ImageTags,
    loss_config: &LossConfig,
    config: &SuiteConfig,
) -> Result<GradReport> {
    let sizes = [(h, w), (h.div_ceil(2), w.div_ceil(2)), (h.div_ceil(4), w.div_ceil(4)), (h.div_ceil(8), w.div_ceil(8))];
    let features: Vec<Tensor<f64>> = sizes
        .iter()
        .map(|&(fh, fw)| Tensor::from_fn(k, fh, fw, |_, _, _| rng.random_range(-1.0..1.0)))
        .collect();
    let edges = Tensor::from_fn(1, h, w, |_, _, _| rng.random_bool(0.2) as u8 as f64);
    let target = Tensor::from_fn(k, h, w, |_, _, _| rng.random_bool(0.2) as u8 as f64);
    let arch = SbdmArch::new(vec![k; sizes.len()], k);
    let mut params = SbdmParams::<f64>::init(&arch, rng.random())?;
    // non-zero biases so every bias gradient is exercised away from zero
    for kernel in params.kernels_mut() {
        kernel.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let sample = SbdmSample {
        features,
        edges,
        target,
        tags: tags.clone(),
    };
    let (_, grads) = sbdm_loss_and_grad(&params, &sample, loss_config)?;

    let mut report = GradReport::default();
    let n_kernels = params.kernels().len();
    for ki in 0..n_kernels {
        let kernel = params.kernels()[ki].clone();
        let grad = grads.kernels()[ki];
        let nw = kernel.weights.len();
        let flat: Vec<f64> = kernel.weights.iter().chain(&kernel.bias).copied().collect();
        let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
        let mut coords: Vec<usize> = (0..config.sbdm_samples_per_kernel.min(nw))
            .map(|_| rng.random_range(0..nw))
            .collect();
        coords.push(nw + rng.random_range(0..kernel.bias.len()));
        let r = check_gradient(
            |v| {
                let mut p = params.clone();
                let target = &mut p.kernels_mut()[ki];
                target.weights.copy_from_slice(&v[..nw]);
                target.bias.copy_from_slice(&v[nw..]);
                sbdm_boundary_loss(&p, &sample, loss_config).unwrap_or(f64::NAN)
            },
            &flat,
            &analytic,
            Some(&coords),
            config.step,
        );
        report.merge(&r);
    }
    Ok(report)
}

/// Runs every subject; `(subject, report)` in [`Subject::ALL`] order.
pub fn run_suite(seed: u64, config: &SuiteConfig) -> Result<Vec<(Subject, GradReport)>> {
    Subject::ALL
        .iter()
        .map(|&s| Ok((s, run_subject(s, seed, config)?)))
        .collect()
}

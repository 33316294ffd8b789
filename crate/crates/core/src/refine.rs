//! CAM post-processing: smoothness-driven refinement, random-walk diffusion
//! over a pixel affinity graph, and pseudo-label extraction.

use crate::error::{Error, Result};
use crate::image::{ColorImage, LabelMap};
use crate::loss::{
    check_channels, gate, psi, smoothness_terms, stencil, BoundaryStack, CamStack, ImageTags, LossConfig, Order,
};
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    /// Iterations of the smoothness refinement.
    pub steps: usize,
    /// Largest step of [`RefineMethod::GradientDescent`].
    pub step_size: f64,
    /// Weight of `‖C - C₀‖²` in the refinement objective.
    pub fidelity_mu: f64,
    /// Elementwise power applied to affinities before row normalization.
    pub rw_beta: f64,
    pub rw_iters: usize,
    pub bg_threshold: f64,
    /// Chebyshev radius of the affinity neighbourhood.
    pub affinity_radius: usize,
    pub affinity_sigma: f64,
    pub method: RefineMethod,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.05,
            fidelity_mu: 1.0,
            rw_beta: 8.0,
            rw_iters: 16,
            bg_threshold: 0.25,
            affinity_radius: 4,
            affinity_sigma: 0.1,
            method: RefineMethod::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let floats = [
            ("step_size", self.step_size),
            ("fidelity_mu", self.fidelity_mu),
            ("rw_beta", self.rw_beta),
            ("bg_threshold", self.bg_threshold),
            ("affinity_sigma", self.affinity_sigma),
        ];
        for (name, v) in floats {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("steps", self.steps),
            ("rw_iters", self.rw_iters),
            ("affinity_radius", self.affinity_radius),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Sparse symmetric pixel affinities in compressed-row form. Pixels are
/// indexed row-major; every pixel has a self-edge of weight 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl AffinityGraph {
    /// Builds a graph from one weight function over the `(2r+1)²` window.
    /// `weight(i, j)` is only called for `i < j`; zero weights are dropped.
    fn from_window(width: usize, height: usize, radius: usize, mut weight: impl FnMut(usize, usize) -> f64) -> Self {
        let n = width * height;
        let r = radius as isize;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let i = (y * width as isize + x) as usize;
                rows[i].push((i, 1.0));
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                            continue;
                        }
                        let j = (ny * width as isize + nx) as usize;
                        if j <= i {
                            continue;
                        }
                        let w = weight(i, j);
                        if w > 0.0 {
                            rows[i].push((j, w));
                            rows[j].push((i, w));
                        }
                    }
                }
            }
        }
        Self::from_rows(width, height, rows)
    }

    fn from_rows(width: usize, height: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
            for &(j, w) in row.iter() {
                neighbors.push(j);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Self {
            width,
            height,
            offsets,
            neighbors,
            weights,
        }
    }

    /// Self-edges only.
    pub fn identity(width: usize, height: usize) -> Self {
        Self::from_window(width, height, 0, |_, _| 0.0)
    }

    /// Every pair within Chebyshev distance `radius` with the same weight.
    pub fn uniform(width: usize, height: usize, radius: usize, weight: f64) -> Self {
        Self::from_window(width, height, radius, |_, _| weight)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbour indices (including `i`) and their weights, ascending.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.offsets[i]..self.offsets[i + 1];
        (&self.neighbors[range.clone()], &self.weights[range])
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let (nb, w) = self.row(i);
        nb.binary_search(&j).ok().map(|k| w[k])
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.num_pixels()).all(|i| {
            let (nb, w) = self.row(i);
            nb.iter().zip(w).all(|(&j, &wij)| self.weight(j, i) == Some(wij))
        })
    }

    /// Dense window layout for storage: channel `(dy + r)(2r + 1) + (dx + r)`
    /// holds the weight from each pixel to its `(dx, dy)` neighbour, zero
    /// where absent.
    pub fn to_window_tensor(&self, radius: usize) -> Result<Tensor> {
        let side = 2 * radius + 1;
        let (w, h) = (self.width, self.height);
        let mut out = Tensor::zeros(side * side, h, w);
        for i in 0..self.num_pixels() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let (nb, wt) = self.row(i);
            for (&j, &v) in nb.iter().zip(wt) {
                let dx = (j % w) as isize - x;
                let dy = (j / w) as isize - y;
                if dx.unsigned_abs() > radius || dy.unsigned_abs() > radius {
                    return Err(Error::InvalidArgument(format!(
                        "affinity edge ({i}, {j}) lies outside radius {radius}"
                    )));
                }
                let ch = (dy + radius as isize) as usize * side + (dx + radius as isize) as usize;
                out.set(ch, y as usize, x as usize, v as f32);
            }
        }
        Ok(out)
    }

    /// Inverse of [`AffinityGraph::to_window_tensor`]; rejects missing or
    /// non-unit self-edges, negative weights and asymmetric windows.
    pub fn from_window_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.shape();
        let side = (c as f64).sqrt().round() as usize;
        if side * side != c || side % 2 == 0 {
            return Err(Error::shape("AffinityGraph::from_window_tensor", "(2r+1)^2 channels", shape_str(t.shape())));
        }
        let r = (side / 2) as isize;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (y * w as isize + x) as usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let ch = ((dy + r) * side as isize + dx + r) as usize;
                        let v = t.get(ch, y as usize, x as usize) as f64;
                        let (nx, ny) = (x + dx, y + dy);
                        let inside = nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize;
                        if (dx, dy) == (0, 0) && v != 1.0 {
                            return Err(Error::InvalidArgument(format!(
                                "self-edge of pixel ({x}, {y}) has weight {v}, expected 1"
                            )));
                        }
                        if !(v >= 0.0 && v.is_finite()) {
                            return Err(Error::InvalidArgument(format!(
                                "affinity weight {v} at pixel ({x}, {y}) is not a finite non-negative number"
                            )));
                        }
                        if v > 0.0 {
                            if !inside {
                                return Err(Error::InvalidArgument(format!(
                                    "affinity edge from ({x}, {y}) leaves the image"
                                )));
                            }
                            rows[i].push(((ny * w as isize + nx) as usize, v));
                        }
                    }
                }
            }
        }
        let graph = Self::from_rows(w, h, rows);
        if !graph.is_symmetric() {
            return Err(Error::InvalidArgument("affinity window tensor is not symmetric".into()));
        }
        Ok(graph)
    }
}

/// Color affinities `exp(-‖x_i - x_j‖² / σ²)` over RGB normalized to
/// `[0, 1]`, within Chebyshev distance `affinity_radius`.
pub fn build_color_affinity(image: &ColorImage, config: &RefineConfig) -> Result<AffinityGraph> {
    config.validate()?;
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidArgument("affinity of an empty image".into()));
    }
    let rgb: Vec<[f64; 3]> = image
        .data
        .chunks_exact(3)
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    let inv_s2 = 1.0 / (config.affinity_sigma * config.affinity_sigma);
    Ok(AffinityGraph::from_window(
        image.width,
        image.height,
        config.affinity_radius,
        |i, j| {
            let d2: f64 = (0..3).map(|k| (rgb[i][k] - rgb[j][k]).powi(2)).sum();
            (-d2 * inv_s2).exp()
        },
    ))
}

/// Row-stochastic transition matrix `T = rownorm(W^β)` sharing the graph's
/// sparsity pattern.
#[derive(Clone, Debug)]
pub struct Transition {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    probs: Vec<f64>,
}

impl Transition {
    pub fn new(graph: &AffinityGraph, beta: f64) -> Self {
        let mut probs = Vec::with_capacity(graph.num_edges());
        for i in 0..graph.num_pixels() {
            let (_, w) = graph.row(i);
            let powered: Vec<f64> = w.iter().map(|v| v.powf(beta)).collect();
            let sum: f64 = powered.iter().sum();
            probs.extend(powered.iter().map(|v| v / sum));
        }
        Self {
            offsets: graph.offsets.clone(),
            neighbors: graph.neighbors.clone(),
            probs,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.offsets.windows(2).map(|r| self.probs[r[0]..r[1]].iter().sum()).collect()
    }

    /// `x ← T x`: each pixel takes a convex combination of its neighbours.
    pub fn pull(&self, x: &[f64]) -> Vec<f64> {
        self.offsets
            .windows(2)
            .map(|r| (r[0]..r[1]).map(|e| self.probs[e] * x[self.neighbors[e]]).sum())
            .collect()
    }

    /// `x ← Tᵀ x`: each pixel spreads its value over its neighbours, so the
    /// total is conserved.
    pub fn push(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (i, r) in self.offsets.windows(2).enumerate() {
            for e in r[0]..r[1] {
                out[self.neighbors[e]] += self.probs[e] * x[i];
            }
        }
        out
    }
}

fn check_graph(cam: &Tensor, graph: &AffinityGraph) -> Result<()> {
    if (cam.height(), cam.width()) != (graph.height, graph.width) {
        return Err(Error::shape(
            "random_walk_refine",
            format!("cam of {}x{} pixels", graph.height, graph.width),
            shape_str(cam.shape()),
        ));
    }
    Ok(())
}

fn diffuse(cam: &CamStack, graph: &AffinityGraph, config: &RefineConfig, transpose: bool) -> Result<CamStack> {
    check_graph(cam, graph)?;
    let t = Transition::new(graph, config.rw_beta);
    let mut out = cam.clone();
    for c in 0..cam.channels() {
        let mut x: Vec<f64> = cam.channel(c).iter().map(|&v| v as f64).collect();
        for _ in 0..config.rw_iters {
            x = if transpose { t.push(&x) } else { t.pull(&x) };
        }
        out.channel_mut(c).iter_mut().zip(&x).for_each(|(o, &v)| *o = v as f32);
    }
    Ok(out)
}

/// Applies `rw_iters` steps of `C_c ← T C_c` to every channel.
pub fn random_walk_refine(cam: &CamStack, graph: &AffinityGraph, config: &RefineConfig) -> Result<CamStack> {
    diffuse(cam, graph, config, false)
}

/// The transposed walk `C_c ← Tᵀ C_c`, which conserves each channel's total.
pub fn random_walk_transport(cam: &CamStack, graph: &AffinityGraph, config: &RefineConfig) -> Result<CamStack> {
    diffuse(cam, graph, config, true)
}

/// One smoothness term `weight · Ψ(gate · Σ coef·x[idx])` of a channel.
struct Term {
    idx: [usize; 3],
    coef: [f64; 3],
    len: usize,
    gate: f64,
    weight: f64,
}

impl Term {
    #[inline]
    fn apply(&self, x: &[f64]) -> f64 {
        let mut d = 0.0;
        for k in 0..self.len {
            d += self.coef[k] * x[self.idx[k]];
        }
        self.gate * d
    }
}

/// The smoothness terms of one channel as a sparse linear operator, plus
/// the constant contributed by border terms whose derivative is zero.
struct ChannelTerms {
    terms: Vec<Term>,
    constant: f64,
}

fn channel_terms(guide: &[f64], h: usize, w: usize, lambda2: f64, config: &LossConfig) -> ChannelTerms {
    let norm = if config.normalize { 1.0 / (h * w) as f64 } else { 1.0 };
    let psi0 = psi(0.0, config.psi_eps);
    let mut terms = Vec::with_capacity(4 * h * w);
    let mut constant = 0.0;
    for (order, order_weight) in [(Order::First, 1.0), (Order::Second, config.lambda_s)] {
        let weight = lambda2 * order_weight * norm;
        for y in 0..h {
            for x in 0..w {
                let centre = y * w + x;
                for (taps, stride) in [(stencil(order, x, w), 1isize), (stencil(order, y, h), w as isize)] {
                    if taps.is_empty() {
                        constant += weight * psi0;
                        continue;
                    }
                    let mut t = Term {
                        idx: [centre; 3],
                        coef: [0.0; 3],
                        len: taps.len(),
                        gate: 0.0,
                        weight,
                    };
                    let mut ds = 0.0;
                    for (k, &(off, c)) in taps.iter().enumerate() {
                        let j = (centre as isize + off * stride) as usize;
                        t.idx[k] = j;
                        t.coef[k] = c;
                        ds += c * guide[j];
                    }
                    t.gate = gate(config, ds, guide[centre]);
                    terms.push(t);
                }
            }
        }
    }
    ChannelTerms { terms, constant }
}

/// Upper bound of `‖K‖²` for the stacked first- and second-order stencils
/// with gates in `(0, 1]`: 4 + 4 for the forward differences and 16 + 16 for
/// `[1, -2, 1]`.
const OPERATOR_NORM_SQ: f64 = 40.0;

/// `argmin_q  c²(q - u)²/(2σ) - c·sqrt(ε)·sqrt(1 - q²)` over `|q| ≤ 1`, the
/// proximal step of the conjugate of `c·Ψ`, returned as `c·q`.
fn prox_conjugate(v: f64, sigma: f64, c: f64, eps: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let u = v / c;
    let a = u.abs();
    let kappa = sigma * eps.sqrt() / c;
    // f(q) = q - a + κ q / sqrt(1 - q²) is increasing on [0, 1)
    let (mut lo, mut hi) = (0.0f64, a.min(1.0));
    let mut q = hi / (1.0 + kappa);
    for _ in 0..60 {
        let r = (1.0 - q * q).max(f64::MIN_POSITIVE);
        let f = q - a + kappa * q / r.sqrt();
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = q;
        } else {
            lo = q;
        }
        let df = 1.0 + kappa / (r * r.sqrt());
        let next = q - f / df;
        q = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
    }
    c * q.copysign(u)
}

/// Algorithm used to minimize the refinement objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RefineMethod {
    /// Accelerated primal-dual hybrid gradient on the exact objective; each
    /// iteration is one dual ascent step on the smoothness terms and one
    /// clamped primal descent step.
    #[default]
    PrimalDual,
    /// Projected gradient descent with step halving on increase.
    GradientDescent,
}

/// The refinement objective `λ₂ L_S(C) + μ ‖C - C₀‖²` for fixed `C₀`,
/// guide and tags.
pub struct SmoothnessObjective<'a> {
    pub cam0: Tensor<f64>,
    pub guide: Tensor<f64>,
    pub tags: &'a ImageTags,
    pub config: RefineConfig,
    pub loss_config: LossConfig,
    channels: Vec<(usize, ChannelTerms)>,
}

impl<'a> SmoothnessObjective<'a> {
    pub fn new(
        cam0: &CamStack,
        guide: &BoundaryStack,
        tags: &'a ImageTags,
        config: &RefineConfig,
        loss_config: &LossConfig,
    ) -> Result<Self> {
        config.validate()?;
        loss_config.validate()?;
        guide.expect_shape("refine_cam_by_smoothness", cam0)?;
        check_channels("refine_cam_by_smoothness", cam0, tags.k_total())?;
        let guide: Tensor<f64> = guide.cast();
        let (h, w) = (cam0.height(), cam0.width());
        let channels = tags
            .active_channels()
            .map(|c| (c, channel_terms(guide.channel(c), h, w, loss_config.lambda2, loss_config)))
            .collect();
        Ok(Self {
            cam0: cam0.cast(),
            guide,
            tags,
            config: *config,
            loss_config: *loss_config,
            channels,
        })
    }

    fn fidelity(&self, cam: &Tensor<f64>) -> f64 {
        let d2: f64 = cam.data().iter().zip(self.cam0.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        self.config.fidelity_mu * d2
    }

    fn smoothness(&self, cam: &Tensor<f64>) -> f64 {
        let eps = self.loss_config.psi_eps;
        self.channels
            .iter()
            .map(|(c, ct)| {
                let x = cam.channel(*c);
                ct.constant + ct.terms.iter().map(|t| t.weight * psi(t.apply(x), eps)).sum::<f64>()
            })
            .sum()
    }

    pub fn value(&self, cam: &Tensor<f64>) -> Result<f64> {
        cam.expect_shape("refine_cam_by_smoothness", &self.cam0)?;
        Ok(self.smoothness(cam) + self.fidelity(cam))
    }

    pub fn value_and_grad(&self, cam: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let mu = self.config.fidelity_mu;
        let mut grad = cam.zip_map(&self.cam0, |a, b| 2.0 * mu * (a - b))?;
        let mut value = self.fidelity(cam);
        if self.loss_config.lambda2 != 0.0 {
            let [_, _, ls] = smoothness_terms(cam, &self.guide, self.tags, &self.loss_config)?;
            value += self.loss_config.lambda2 * ls.value;
            grad.add_scaled(&ls.grad, self.loss_config.lambda2)?;
        }
        Ok((value, grad))
    }

    /// Minimizes from `init` with the configured method. Returns the final
    /// map and the objective after every iteration, starting with the value
    /// at `init`; the sequence never increases.
    pub fn descend(&self, init: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<f64>)> {
        init.expect_shape("refine_cam_by_smoothness", &self.cam0)?;
        match self.config.method {
            RefineMethod::PrimalDual => self.primal_dual(init),
            RefineMethod::GradientDescent => self.gradient_descent(init),
        }
    }

    /// Projected gradient descent onto `[0, 1]`. A step that would raise
    /// the objective is retried at half the step size; the step size
    /// recovers by doubling (up to `step_size`) after each accepted step.
    fn gradient_descent(&self, init: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<f64>)> {
        let mut cam = init.clone();
        let mut eta = self.config.step_size;
        let mut trace = vec![self.value(&cam)?];
        for itr in 0..self.config.steps {
            let (value, grad) = self.value_and_grad(&cam)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("refinement gradient at step {itr}")));
            }
            let mut accepted = None;
            while eta > 1e-12 {
                let mut cand = cam.clone();
                for (c, g) in cand.data_mut().iter_mut().zip(grad.data()) {
                    *c = (*c - eta * g).clamp(0.0, 1.0);
                }
                let v = self.value(&cand)?;
                if v <= value {
                    accepted = Some((cand, v));
                    break;
                }
                eta *= 0.5;
            }
            let Some((cand, v)) = accepted else { break };
            cam = cand;
            trace.push(v);
            eta = (2.0 * eta).min(self.config.step_size);
        }
        Ok((cam, trace))
    }

    /// Chambolle-Pock iterations accelerated by the `2μ`-strong convexity
    /// of the fidelity term, run independently per active channel. The
    /// primal step is the proximal map of `μ‖C - C₀‖²` followed by clamping
    /// to `[0, 1]`. The best iterate seen so far is returned.
    fn primal_dual(&self, init: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<f64>)> {
        let mu = self.config.fidelity_mu;
        let eps = self.loss_config.psi_eps;
        let n = init.plane_len();
        let mut cam = init.clone();
        let mut trace = vec![self.value(&cam)?];
        let mut best = trace[0];

        struct State {
            x: Vec<f64>,
            xbar: Vec<f64>,
            dual: Vec<f64>,
        }
        let mut states: Vec<State> = self
            .channels
            .iter()
            .map(|(c, ct)| State {
                x: init.channel(*c).to_vec(),
                xbar: init.channel(*c).to_vec(),
                dual: vec![0.0; ct.terms.len()],
            })
            .collect();
        let mut tau = 1.0 / OPERATOR_NORM_SQ.sqrt();
        let mut sigma = 1.0 / OPERATOR_NORM_SQ.sqrt();
        let mut kt = vec![0.0; n];

        for itr in 0..self.config.steps {
            let theta = 1.0 / (1.0 + 4.0 * mu * tau).sqrt();
            let mut iterate = cam.clone();
            for ((c, ct), st) in self.channels.iter().zip(&mut states) {
                kt.iter_mut().for_each(|v| *v = 0.0);
                for (t, p) in ct.terms.iter().zip(&mut st.dual) {
                    *p = prox_conjugate(*p + sigma * t.apply(&st.xbar), sigma, t.weight, eps);
                    let g = t.gate * *p;
                    for k in 0..t.len {
                        kt[t.idx[k]] += t.coef[k] * g;
                    }
                }
                let x0 = self.cam0.channel(*c);
                for i in 0..n {
                    let next = ((st.x[i] - tau * kt[i] + 2.0 * tau * mu * x0[i]) / (1.0 + 2.0 * tau * mu)).clamp(0.0, 1.0);
                    st.xbar[i] = next + theta * (next - st.x[i]);
                    st.x[i] = next;
                }
                iterate.channel_mut(*c).copy_from_slice(&st.x);
            }
            tau *= theta;
            sigma /= theta;
            let v = self.value(&iterate)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("refinement objective at step {itr}")));
            }
            if v < best {
                best = v;
                cam = iterate;
            }
            trace.push(best);
        }
        Ok((cam, trace))
    }
}

/// Approximate minimizer of `λ₂ L_S(C) + μ ‖C - C₀‖²` over `C ∈ [0, 1]`,
/// starting from `C₀`. The smoothness weight is `loss_config.lambda2`.
pub fn refine_cam_by_smoothness(
    cam0: &CamStack,
    guide: &BoundaryStack,
    tags: &ImageTags,
    config: &RefineConfig,
    loss_config: &LossConfig,
) -> Result<CamStack> {
    let objective = SmoothnessObjective::new(cam0, guide, tags, config, loss_config)?;
    let (cam, _) = objective.descend(&objective.cam0)?;
    Ok(cam.cast())
}

/// Per-pixel argmax over tagged foreground channels; background where the
/// winning score is below `bg_threshold`. Ties go to the lower class index.
pub fn cam_to_pseudo_label(cam: &CamStack, tags: &ImageTags, bg_threshold: f64) -> Result<LabelMap> {
    check_channels("cam_to_pseudo_label", cam, tags.k_total())?;
    let (h, w) = (cam.height(), cam.width());
    let active: Vec<usize> = tags.active_channels().filter(|&c| c > 0).collect();
    Ok(LabelMap::from_fn(w, h, |x, y| {
        let mut best: Option<(usize, f32)> = None;
        for &c in &active {
            let v = cam.get(c, y, x);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        match best {
            Some((c, v)) if v as f64 >= bg_threshold => c as u32,
            _ => 0,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags2() -> ImageTags {
        ImageTags::new(vec![true, true])
    }

    #[test]
    fn config_rejects_non_positive() {
        assert!(RefineConfig::default().validate().is_ok());
        let bad = RefineConfig {
            rw_beta: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefineConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn constant_image_has_unit_edges() {
        let img = ColorImage::filled(5, 4, [10, 200, 30]);
        let config = RefineConfig {
            affinity_radius: 2,
            ..Default::default()
        };
        let g = build_color_affinity(&img, &config).unwrap();
        assert!(g.weights.iter().all(|&w| w == 1.0));
        // rows 0..=3 by columns 0..=4
        assert_eq!(g.row(2 * 5 + 2).0.len(), 20);
        assert!(g.is_symmetric());
    }

    #[test]
    fn color_distance_sets_weight() {
        let mut img = ColorImage::filled(3, 1, [0, 0, 0]);
        img.set_pixel(1, 0, [0, 0, 0]);
        img.set_pixel(2, 0, [255, 255, 255]);
        let config = RefineConfig {
            affinity_radius: 1,
            ..Default::default()
        };
        let g = build_color_affinity(&img, &config).unwrap();
        assert_eq!(g.weight(0, 1), Some(1.0));
        let far = g.weight(1, 2).unwrap();
        assert!(far > 0.0 && far < 1e-130);
        assert_eq!(g.weight(0, 2), None);
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let img = ColorImage::new(4, 3, (0..36).map(|v| (v * 7 % 256) as u8).collect()).unwrap();
        let g = build_color_affinity(&img, &RefineConfig::default()).unwrap();
        let t = Transition::new(&g, 8.0);
        for s in t.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_graph_leaves_cam_unchanged() {
        let cam = Tensor::from_fn(3, 4, 5, |c, y, x| (c + y * x) as f32 * 0.1);
        let out = random_walk_refine(&cam, &AffinityGraph::identity(5, 4), &RefineConfig::default()).unwrap();
        assert_eq!(out, cam);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cam = Tensor::<f32>::zeros(2, 4, 4);
        assert!(random_walk_refine(&cam, &AffinityGraph::identity(3, 4), &RefineConfig::default()).is_err());
    }

    #[test]
    fn window_tensor_round_trip() {
        let img = ColorImage::new(4, 3, (0..36).map(|v| (v * 29 % 256) as u8).collect()).unwrap();
        let config = RefineConfig {
            affinity_radius: 2,
            affinity_sigma: 0.5,
            ..Default::default()
        };
        let g = build_color_affinity(&img, &config).unwrap();
        let t = g.to_window_tensor(2).unwrap();
        assert_eq!(t.channels(), 25);
        let back = AffinityGraph::from_window_tensor(&t).unwrap();
        assert_eq!(back.neighbors, g.neighbors);
        for (a, b) in back.weights.iter().zip(&g.weights) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut broken = t.clone();
        broken.set(0, 2, 2, 0.5);
        assert!(AffinityGraph::from_window_tensor(&broken).is_err());
    }

    #[test]
    fn zero_smoothness_weight_returns_input() {
        let cam = Tensor::from_fn(3, 6, 6, |c, y, x| ((c * 7 + y * 3 + x) % 5) as f32 / 4.0);
        let guide = Tensor::zeros(3, 6, 6);
        let lc = LossConfig {
            lambda2: 0.0,
            ..Default::default()
        };
        let out = refine_cam_by_smoothness(&cam, &guide, &tags2(), &RefineConfig::default(), &lc).unwrap();
        assert_eq!(out, cam);
    }

    #[test]
    fn objective_never_increases() {
        let cam = Tensor::from_fn(3, 8, 8, |c, y, x| ((c * 13 + y * 5 + x * 3) % 7) as f32 / 6.0);
        let guide = Tensor::from_fn(3, 8, 8, |_, _, x| (x == 4) as u8 as f32);
        let tags = tags2();
        let obj = SmoothnessObjective::new(&cam, &guide, &tags, &RefineConfig::default(), &LossConfig::default()).unwrap();
        let (out, trace) = obj.descend(&obj.cam0).unwrap();
        assert!(trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(trace.last().unwrap() < &trace[0]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn term_objective_matches_loss_path() {
        let cam: Tensor<f32> = Tensor::from_fn(3, 7, 5, |c, y, x| ((c * 11 + y * 7 + x * 3) % 9) as f32 / 8.0);
        let guide: Tensor<f32> = Tensor::from_fn(3, 7, 5, |c, y, x| ((c + y * x) % 4) as f32 / 3.0);
        let tags = ImageTags::new(vec![true, false]);
        for normalize in [false, true] {
            let lc = LossConfig {
                normalize,
                lambda2: 2.5,
                ..Default::default()
            };
            let obj = SmoothnessObjective::new(&cam, &guide, &tags, &RefineConfig::default(), &lc).unwrap();
            let x = Tensor::from_fn(3, 7, 5, |c, y, x| ((c * 5 + y + x * 2) % 6) as f64 / 5.0);
            let fast = obj.value(&x).unwrap();
            let (reference, _) = obj.value_and_grad(&x).unwrap();
            assert!((fast - reference).abs() <= 1e-9 * reference.abs().max(1.0), "{fast} vs {reference}");
        }
    }

    #[test]
    fn prox_conjugate_minimizes_its_objective() {
        let eps: f64 = 1e-6;
        for &(v, sigma, c) in &[(0.3, 0.2, 1.0), (-5.0, 0.15, 2.0), (1e-4, 0.5, 0.01), (0.0, 1.0, 3.0)] {
            let obj = |p: f64| (p - v) * (p - v) / (2.0 * sigma) - c * eps.sqrt() * (1.0 - (p / c).powi(2)).max(0.0).sqrt();
            let p: f64 = prox_conjugate(v, sigma, c, eps);
            assert!(p.abs() <= c);
            for k in 1..=200 {
                let other = -c + 2.0 * c * k as f64 / 200.0;
                assert!(obj(p) <= obj(other) + 1e-12, "v={v} p={p} other={other}");
            }
        }
        assert_eq!(prox_conjugate(1.0, 0.1, 0.0, eps), 0.0);
    }

    #[test]
    fn primal_dual_reaches_lower_objective_than_descent() {
        let cam = Tensor::from_fn(3, 12, 12, |c, y, x| ((c * 13 + y * 5 + x * 3) % 7) as f32 / 6.0);
        let guide = Tensor::from_fn(3, 12, 12, |_, _, x| (x == 6) as u8 as f32);
        let tags = tags2();
        let lc = LossConfig::default();
        let pd = SmoothnessObjective::new(&cam, &guide, &tags, &RefineConfig::default(), &lc).unwrap();
        let gd_config = RefineConfig {
            method: RefineMethod::GradientDescent,
            ..Default::default()
        };
        let gd = SmoothnessObjective::new(&cam, &guide, &tags, &gd_config, &lc).unwrap();
        let (_, pd_trace) = pd.descend(&pd.cam0).unwrap();
        let (_, gd_trace) = gd.descend(&gd.cam0).unwrap();
        assert!(pd_trace.last().unwrap() < gd_trace.last().unwrap());
    }

    #[test]
    fn pseudo_label_thresholds_and_ties() {
        let zero = Tensor::zeros(3, 2, 2);
        let l = cam_to_pseudo_label(&zero, &tags2(), 0.25).unwrap();
        assert!(l.data.iter().all(|&v| v == 0));

        let mut cam = Tensor::zeros(3, 2, 2);
        cam.set(2, 0, 0, 0.9);
        cam.set(1, 0, 1, 0.5);
        cam.set(2, 0, 1, 0.5);
        cam.set(1, 1, 0, 0.2);
        cam.set(0, 1, 1, 0.99);
        let l = cam_to_pseudo_label(&cam, &tags2(), 0.25).unwrap();
        assert_eq!(l.data, vec![2, 1, 0, 0]);

        let only_two = ImageTags::new(vec![false, true]);
        let l = cam_to_pseudo_label(&cam, &only_two, 0.25).unwrap();
        assert_eq!(l.data, vec![2, 2, 0, 0]);
    }

    #[test]
    fn pseudo_label_requires_matching_channels() {
        assert!(cam_to_pseudo_label(&Tensor::zeros(2, 2, 2), &tags2(), 0.25).is_err());
    }
}

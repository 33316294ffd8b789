//! Seeded synthetic scenes: colored primitives with exact label maps,
//! fabricated feature pyramids, and degraded activation maps that cover only
//! part of each object.

use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::edge::{canny, label_to_boundary, CannyConfig};
use crate::error::{Error, Result};
use crate::image::{ColorImage, LabelMap};
use crate::loss::{CamStack, ImageTags};
use crate::sbdm::SbdmSample;
use crate::tensor::Tensor;

/// Downsampling factors of the fabricated feature levels.
pub const PYRAMID_SCALES: [usize; 4] = [1, 2, 4, 8];

/// Default class colors; index 0 is background.
pub const DEFAULT_PALETTE: [[u8; 3]; 6] = [
    [70, 90, 70],
    [220, 40, 40],
    [40, 80, 220],
    [230, 200, 40],
    [200, 60, 200],
    [40, 200, 200],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_objects: usize,
    /// Mean color of each class, background first; its length is `K_total`.
    pub class_palette: Vec<[u8; 3]>,
    /// Standard deviation of the per-pixel color noise, in 8-bit levels.
    pub noise_sigma: f64,
    /// Noise standard deviation of each feature level, finest first.
    pub feature_noise: [f64; 4],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_objects: 3,
            class_palette: DEFAULT_PALETTE[..5].to_vec(),
            noise_sigma: 4.0,
            feature_noise: [0.5, 0.35, 0.2, 0.1],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.class_palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidArgument(format!(
                "scene must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_objects == 0 {
            return Err(Error::InvalidArgument("scene needs at least one object".into()));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidArgument("palette needs background and at least one class".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.feature_noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("feature noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// A filled primitive in pixel coordinates; a pixel belongs to the shape
/// when its center `(x + 0.5, y + 0.5)` does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((px - cx) / rx, (py - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Triangle { pts: [a, b, c] } => {
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Shape::Ellipse { rx, ry, .. } => std::f64::consts::PI * rx * ry,
            Shape::Triangle { pts: [a, b, c] } => {
                0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs()
            }
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Triangle { pts } => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u32,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ColorImage,
    pub labels: LabelMap,
    pub tags: ImageTags,
    /// One tensor per entry of [`PYRAMID_SCALES`], `K_total` channels each.
    pub features: Vec<Tensor>,
}

fn random_object(rng: &mut impl Rng, spec: &SceneSpec) -> SceneObject {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let class = rng.random_range(1..spec.num_classes() as u32);
    let (sw, sh) = (
        rng.random_range(side / 5.0..side / 2.2),
        rng.random_range(side / 5.0..side / 2.2),
    );
    let x0 = rng.random_range(0.0..w - sw);
    let y0 = rng.random_range(0.0..h - sh);
    let shape = match rng.random_range(0..3) {
        0 => Shape::Rect {
            x0,
            y0,
            x1: x0 + sw,
            y1: y0 + sh,
        },
        1 => Shape::Ellipse {
            cx: x0 + sw / 2.0,
            cy: y0 + sh / 2.0,
            rx: sw / 2.0,
            ry: sh / 2.0,
        },
        _ => {
            let apex = x0 + rng.random_range(0.0..sw);
            Shape::Triangle {
                pts: [(apex, y0), (x0, y0 + sh), (x0 + sw, y0 + sh)],
            }
        }
    };
    SceneObject { class, shape }
}

/// Class-indicator pyramid: each level is the box average of the one-hot
/// label stack over `s × s` cells plus Gaussian noise.
fn feature_pyramid(labels: &LabelMap, k: usize, noise: &[f64; 4], rng: &mut impl Rng) -> Vec<Tensor> {
    let (w, h) = (labels.width, labels.height);
    PYRAMID_SCALES
        .iter()
        .zip(noise)
        .map(|(&s, &sigma)| {
            let (lw, lh) = (w.div_ceil(s), h.div_ceil(s));
            let mut t = Tensor::zeros(k, lh, lw);
            let mut counts = vec![0u32; lw * lh];
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / s) * lw + x / s;
                    counts[cell] += 1;
                    let c = labels.get(x, y) as usize;
                    t.channel_mut(c)[cell] += 1.0;
                }
            }
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
            for c in 0..k {
                for (v, &n) in t.channel_mut(c).iter_mut().zip(&counts) {
                    let jitter = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                    *v = (*v as f64 / n as f64 + jitter) as f32;
                }
            }
            t
        })
        .collect()
}

/// Renders `objects` back to front over the background, with noise and
/// features drawn from `spec.seed`.
pub fn render_scene(spec: &SceneSpec, objects: &[SceneObject]) -> Result<Scene> {
    spec.validate()?;
    let k = spec.num_classes();
    let (w, h) = (spec.width, spec.height);
    let mut labels = LabelMap::filled(w, h, 0);
    for obj in objects {
        if obj.class as usize >= k {
            return Err(Error::InvalidArgument(format!(
                "object class {} outside palette of {k} classes",
                obj.class
            )));
        }
        let (x0, y0, x1, y1) = obj.shape.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > w as f64 || y1 > h as f64 {
            return Err(Error::InvalidArgument(format!("object {:?} exceeds the {w}x{h} image", obj.shape)));
        }
        let (ya, yb) = (y0.floor().max(0.0) as usize, (y1.ceil() as usize).min(h));
        let (xa, xb) = (x0.floor().max(0.0) as usize, (x1.ceil() as usize).min(w));
        for y in ya..yb {
            for x in xa..xb {
                if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels.set(x, y, obj.class);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_1AB5);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Vec::with_capacity(w * h * 3);
    for &l in &labels.data {
        for ch in spec.class_palette[l as usize] {
            let n = if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push((ch as f64 + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = ColorImage::new(w, h, data)?;
    let tags = ImageTags::from_labels(&labels, k);
    let features = feature_pyramid(&labels, k, &spec.feature_noise, &mut rng);
    Ok(Scene {
        image,
        labels,
        tags,
        features,
    })
}

/// `spec.num_objects` random rectangles, ellipses and triangles.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects: Vec<SceneObject> = (0..spec.num_objects).map(|_| random_object(&mut rng, spec)).collect();
    render_scene(spec, &objects)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeSpec {
    /// Fraction of each object's area kept as the activated part.
    pub keep_fraction: f64,
    pub blur_sigma: f64,
    /// Fraction of background pixels covered by false activation of the
    /// present classes.
    pub spurious_rate: f64,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            keep_fraction: 0.35,
            blur_sigma: 2.0,
            spurious_rate: 0.05,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        if !(0.0..=1.0).contains(&self.spurious_rate) {
            return Err(Error::InvalidArgument(format!(
                "spurious_rate must be in [0, 1], got {}",
                self.spurious_rate
            )));
        }
        Ok(())
    }
}

/// Heap entry ordered by smallest priority first.
#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Grows a compact blob of `target` pixels inside `mask` from a random seed,
/// preferring pixels near the seed with jittered distances.
fn grow_blob(mask: &[bool], w: usize, target: usize, rng: &mut impl Rng) -> Vec<bool> {
    let members: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut blob = vec![false; mask.len()];
    if members.is_empty() || target == 0 {
        return blob;
    }
    let seed = members[rng.random_range(0..members.len())];
    let (sx, sy) = ((seed % w) as f64, (seed / w) as f64);
    let h = mask.len() / w;
    let mut queued = vec![false; mask.len()];
    let mut heap = BinaryHeap::new();
    heap.push(Frontier(0.0, seed));
    queued[seed] = true;
    let mut count = 0;
    while let Some(Frontier(_, i)) = heap.pop() {
        blob[i] = true;
        count += 1;
        if count >= target {
            break;
        }
        let (x, y) = (i % w, i / w);
        let nbrs = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for j in nbrs.into_iter().flatten() {
            if mask[j] && !queued[j] {
                queued[j] = true;
                let (dx, dy) = ((j % w) as f64 - sx, (j / w) as f64 - sy);
                let d = (dx * dx + dy * dy).sqrt() + rng.random_range(0.0..2.0);
                heap.push(Frontier(d, j));
            }
        }
    }
    blob
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with replicate borders; `sigma == 0` is a no-op.
fn blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Activation maps that reveal only part of each object.
///
/// Every present foreground class keeps a random compact blob of about
/// `keep_fraction` of its mask, blurred and rescaled to peak at 1. Spurious
/// patches of the present classes then cover about `spurious_rate` of the
/// background at amplitudes in `[0.3, 0.6)`. The background channel is
/// `1 - max` over the foreground channels.
pub fn degrade_to_cam(labels: &LabelMap, num_classes: usize, spec: &DegradeSpec) -> Result<CamStack> {
    spec.validate()?;
    labels.validate(num_classes)?;
    let (w, h) = (labels.width, labels.height);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cam = Tensor::zeros(num_classes, h, w);
    let present: Vec<usize> = (1..num_classes).filter(|&c| labels.contains(c as u32)).collect();

    for &c in &present {
        let mask: Vec<bool> = labels.data.iter().map(|&l| l as usize == c).collect();
        let area = mask.iter().filter(|&&m| m).count();
        let target = ((spec.keep_fraction * area as f64).round() as usize).clamp(1, area);
        let blob = grow_blob(&mask, w, target, &mut rng);
        let plane: Vec<f64> = blob.iter().map(|&b| b as u8 as f64).collect();
        let blurred = blur_plane(&plane, w, h, spec.blur_sigma);
        let peak = blurred.iter().copied().fold(0.0, f64::max);
        for (o, v) in cam.channel_mut(c).iter_mut().zip(&blurred) {
            *o = if peak > 0.0 { (v / peak) as f32 } else { 0.0 };
        }
    }

    let background: Vec<usize> = (0..n).filter(|&i| labels.data[i] == 0).collect();
    if !present.is_empty() && !background.is_empty() && spec.spurious_rate > 0.0 {
        let budget = (spec.spurious_rate * background.len() as f64).round() as usize;
        let mut covered = vec![false; n];
        let mut count = 0;
        let mut attempts = 0;
        while count < budget && attempts < 4 * budget + 16 {
            attempts += 1;
            let centre = background[rng.random_range(0..background.len())];
            let c = present[rng.random_range(0..present.len())];
            let amp = rng.random_range(0.3..0.6);
            let radius = rng.random_range(1..=2i64) as isize;
            let (cx, cy) = ((centre % w) as isize, (centre / w) as isize);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize || dx * dx + dy * dy > radius * radius {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if labels.data[i] != 0 {
                        continue;
                    }
                    let v = &mut cam.channel_mut(c)[i];
                    *v = v.max(amp);
                    if !covered[i] {
                        covered[i] = true;
                        count += 1;
                    }
                }
            }
        }
    }

    for i in 0..n {
        let m = (1..num_classes).map(|c| cam.channel(c)[i]).fold(0.0f32, f32::max);
        cam.channel_mut(0)[i] = 1.0 - m;
    }
    Ok(cam)
}

/// Training pair for the boundary module: the selected feature levels, the
/// Canny map of the image (zeros when `use_canny` is false) and the
/// one-pixel label boundaries as target.
pub fn scene_sbdm_sample(
    features: &[Tensor],
    image: &ColorImage,
    labels: &LabelMap,
    tags: ImageTags,
    canny_config: &CannyConfig,
    levels: &[usize],
    use_canny: bool,
) -> Result<SbdmSample> {
    let selected = levels
        .iter()
        .map(|&l| {
            features
                .get(l)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("feature level {l} of {}", features.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let edges = if use_canny {
        canny(&image.to_gray(), canny_config)?
    } else {
        Tensor::zeros(1, image.height, image.width)
    };
    let target = label_to_boundary(labels, tags.k_total(), 1)?;
    Ok(SbdmSample {
        features: selected,
        edges,
        target,
        tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_scene(&spec).unwrap().labels, generate_scene(&other).unwrap().labels);
    }

    #[test]
    fn noiseless_pixels_match_palette() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            num_objects: 4,
            seed: 3,
            ..Default::default()
        };
        let scene = generate_scene(&spec).unwrap();
        for (i, &l) in scene.labels.data.iter().enumerate() {
            assert_eq!(scene.image.data[3 * i..3 * i + 3], spec.class_palette[l as usize]);
        }
    }

    #[test]
    fn single_ellipse_area() {
        let spec = SceneSpec::default();
        let shape = Shape::Ellipse {
            cx: 32.0,
            cy: 30.0,
            rx: 20.0,
            ry: 14.0,
        };
        let scene = render_scene(&spec, &[SceneObject { class: 2, shape }]).unwrap();
        assert_eq!(scene.tags.foreground, vec![false, true, false, false]);
        let count = scene.labels.data.iter().filter(|&&l| l == 2).count() as f64;
        assert!((count / shape.area() - 1.0).abs() < 0.01);
    }

    #[test]
    fn objects_must_fit() {
        let spec = SceneSpec::default();
        let shape = Shape::Rect {
            x0: 50.0,
            y0: 0.0,
            x1: 70.0,
            y1: 10.0,
        };
        assert!(render_scene(&spec, &[SceneObject { class: 1, shape }]).is_err());
        let bad = SceneSpec {
            num_objects: 0,
            ..Default::default()
        };
        assert!(generate_scene(&bad).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let scene = generate_scene(&SceneSpec {
            width: 36,
            height: 20,
            ..Default::default()
        })
        .unwrap();
        let shapes: Vec<_> = scene.features.iter().map(|f| f.shape()).collect();
        assert_eq!(shapes, vec![(5, 20, 36), (5, 10, 18), (5, 5, 9), (5, 3, 5)]);
    }

    #[test]
    fn identity_degradation_is_one_hot() {
        let labels = LabelMap::from_fn(10, 8, |x, y| if x < 4 && y < 5 { 1 } else if x > 6 { 2 } else { 0 });
        let spec = DegradeSpec {
            keep_fraction: 1.0,
            blur_sigma: 0.0,
            spurious_rate: 0.0,
            seed: 5,
        };
        let cam = degrade_to_cam(&labels, 3, &spec).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                for c in 0..3 {
                    let expect = (labels.get(x, y) as usize == c) as u8 as f32;
                    assert_eq!(cam.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn spurious_activation_outside_objects_only_for_present_classes() {
        let labels = LabelMap::from_fn(32, 32, |x, y| if (8..20).contains(&x) && (8..20).contains(&y) { 2 } else { 0 });
        let cam = degrade_to_cam(&labels, 4, &DegradeSpec::default()).unwrap();
        let bg_active = (0..32 * 32).any(|i| labels.data[i] == 0 && cam.channel(2)[i] > 0.25);
        assert!(bg_active);
        assert!(cam.channel(1).iter().chain(cam.channel(3)).all(|&v| v == 0.0));
        let quiet = DegradeSpec {
            spurious_rate: 0.0,
            blur_sigma: 0.0,
            ..Default::default()
        };
        let cam = degrade_to_cam(&labels, 4, &quiet).unwrap();
        assert!((0..32 * 32).all(|i| labels.data[i] != 0 || cam.channel(2)[i] == 0.0));
    }

    #[test]
    fn blob_has_requested_size_and_stays_in_mask() {
        let mask: Vec<bool> = (0..100).map(|i| i % 10 < 6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blob = grow_blob(&mask, 10, 21, &mut rng);
        assert_eq!(blob.iter().filter(|&&b| b).count(), 21);
        assert!(blob.iter().zip(&mask).all(|(&b, &m)| !b || m));
    }

    #[test]
    fn blur_preserves_constants() {
        let out = blur_plane(&[0.7; 30], 6, 5, 1.5);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}

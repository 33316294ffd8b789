//! Canny edges for the structure input of the boundary module, and
//! per-class semantic boundaries extracted from label maps.

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMap};
use crate::tensor::Tensor;

/// tan(22.5°), the orientation bin edge.
const TAN_22_5: f64 = 0.414_213_562_373_095_03;

/// Fixed-point scale of the integer Gaussian taps.
const GAUSS_SCALE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyConfig {
    pub gaussian_sigma: f64,
    /// Fraction of the maximum gradient magnitude.
    pub low_threshold: f64,
    /// Fraction of the maximum gradient magnitude.
    pub high_threshold: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.4,
            low_threshold: 0.1,
            high_threshold: 0.3,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "canny sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        let (lo, hi) = (self.low_threshold, self.high_threshold);
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "canny thresholds must satisfy 0 < low < high < 1, got low={lo} high={hi}"
            )));
        }
        Ok(())
    }
}

/// Symmetric integer Gaussian taps `w[0..=radius]`, radius = ceil(3σ).
///
/// Integer taps keep blur and Sobel exact, so the detector's output does not
/// depend on summation order and is exactly invariant to positive brightness
/// scaling and offsets.
pub fn gaussian_taps(sigma: f64) -> Vec<i64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    (0..=radius)
        .map(|i| (GAUSS_SCALE * (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).round() as i64)
        .collect()
}

fn blur(image: &GrayImage, taps: &[i64]) -> Vec<i64> {
    let (w, h) = (image.width, image.height);
    let r = taps.len() as isize - 1;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for k in -r..=r {
                acc += taps[k.unsigned_abs()] * image.get(clamp(x as isize + k, w), y) as i64;
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for k in -r..=r {
                acc += taps[k.unsigned_abs()] * horiz[clamp(y as isize + k, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct Gradients {
    gx: Vec<i64>,
    gy: Vec<i64>,
    mag2: Vec<i128>,
}

fn sobel(smooth: &[i64], w: usize, h: usize) -> Gradients {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        smooth[yc * w + xc]
    };
    let mut gx = vec![0; w * h];
    let mut gy = vec![0; w * h];
    let mut mag2 = vec![0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag2[i] = dx as i128 * dx as i128 + dy as i128 * dy as i128;
        }
    }
    Gradients { gx, gy, mag2 }
}

/// Unit step along the gradient, quantized to one of four orientations and
/// signed by the gradient direction.
fn gradient_step(gx: i64, gy: i64) -> (isize, isize) {
    let (ax, ay) = (gx.unsigned_abs() as f64, gy.unsigned_abs() as f64);
    let sx = gx.signum() as isize;
    let sy = gy.signum() as isize;
    if ay <= TAN_22_5 * ax {
        (sx, 0)
    } else if ax <= TAN_22_5 * ay {
        (0, sy)
    } else {
        (sx, sy)
    }
}

/// Keeps local maxima along the gradient. A pixel must strictly exceed its
/// neighbour behind it and at least match the one ahead, so a plateau of two
/// equal maxima keeps only the darker side of the step.
fn non_max_suppression(g: &Gradients, w: usize, h: usize) -> Vec<bool> {
    let mag = |x: isize, y: isize| -> i128 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            g.mag2[y as usize * w + x as usize]
        }
    };
    let mut keep = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = g.mag2[i];
            if m == 0 {
                continue;
            }
            let (dx, dy) = gradient_step(g.gx[i], g.gy[i]);
            let (xi, yi) = (x as isize, y as isize);
            keep[i] = m > mag(xi - dx, yi - dy) && m >= mag(xi + dx, yi + dy);
        }
    }
    keep
}

fn hysteresis(g: &Gradients, candidates: &[bool], w: usize, h: usize, config: &CannyConfig) -> Vec<bool> {
    let max2 = g.mag2.iter().copied().max().unwrap_or(0) as f64;
    let low2 = config.low_threshold * config.low_threshold * max2;
    let high2 = config.high_threshold * config.high_threshold * max2;
    let mut edge = vec![false; w * h];
    let mut stack = Vec::new();
    for i in 0..w * h {
        if candidates[i] && g.mag2[i] as f64 >= high2 {
            edge[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && candidates[j] && g.mag2[j] as f64 >= low2 {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

/// Binary Canny edge map as a one-channel boundary stack.
///
/// Gaussian blur, Sobel gradients, non-maximum suppression over four
/// orientation bins, then double-threshold hysteresis with thresholds taken
/// relative to the maximum gradient magnitude.
pub fn canny(image: &GrayImage, config: &CannyConfig) -> Result<Tensor> {
    config.validate()?;
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return Err(Error::InvalidArgument(format!(
            "canny needs an image of at least 3x3, got {w}x{h}"
        )));
    }
    let smooth = blur(image, &gaussian_taps(config.gaussian_sigma));
    let grads = sobel(&smooth, w, h);
    let candidates = non_max_suppression(&grads, w, h);
    let edges = hysteresis(&grads, &candidates, w, h, config);
    let data = edges.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    Tensor::new(1, h, w, data)
}

/// Per-class semantic boundaries of a label map.
///
/// Channel `c` marks pixels of class `c` with a 4-neighbour of another class,
/// then dilates each mark to a square of side `thickness`.
pub fn label_to_boundary(labels: &LabelMap, num_classes: usize, thickness: usize) -> Result<Tensor> {
    if thickness == 0 {
        return Err(Error::InvalidArgument("boundary thickness must be at least 1".into()));
    }
    labels.validate(num_classes)?;
    let (w, h) = (labels.width, labels.height);
    let mut out = Tensor::zeros(num_classes, h, w);
    let lo = (thickness as isize - 1) / 2;
    let hi = thickness as isize / 2;
    for y in 0..h {
        for x in 0..w {
            let c = labels.get(x, y);
            let differs = (x > 0 && labels.get(x - 1, y) != c)
                || (x + 1 < w && labels.get(x + 1, y) != c)
                || (y > 0 && labels.get(x, y - 1) != c)
                || (y + 1 < h && labels.get(x, y + 1) != c);
            if !differs {
                continue;
            }
            for dy in -lo..=hi {
                for dx in -lo..=hi {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        out.set(c as usize, ny as usize, nx as usize, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_has_no_edges() {
        let e = canny(&GrayImage::filled(10, 8, 77), &CannyConfig::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_tiny_images_and_bad_config() {
        assert!(canny(&GrayImage::filled(2, 5, 0), &CannyConfig::default()).is_err());
        let bad = CannyConfig {
            low_threshold: 0.5,
            high_threshold: 0.4,
            ..Default::default()
        };
        assert!(canny(&GrayImage::filled(5, 5, 0), &bad).is_err());
    }

    /// Brute-force: for every pixel, scan its four neighbours.
    fn brute_boundary(labels: &LabelMap, k: usize) -> Vec<Vec<u8>> {
        let (w, h) = (labels.width as isize, labels.height as isize);
        let mut out = vec![vec![0u8; (w * h) as usize]; k];
        for y in 0..h {
            for x in 0..w {
                let c = labels.get(x as usize, y as usize);
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h && labels.get(nx as usize, ny as usize) != c {
                        out[c as usize][(y * w + x) as usize] = 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_labels_have_no_boundary() {
        let b = label_to_boundary(&LabelMap::filled(5, 4, 2), 3, 1).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_column_split() {
        let labels = LabelMap::from_fn(4, 4, |x, _| if x < 2 { 1 } else { 0 });
        let b = label_to_boundary(&labels, 2, 1).unwrap();
        let brute = brute_boundary(&labels, 2);
        for c in 0..2 {
            let got: Vec<u8> = b.channel(c).iter().map(|&v| v as u8).collect();
            assert_eq!(got, brute[c]);
        }
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(b.get(1, y, x), (x == 1) as u8 as f32);
                assert_eq!(b.get(0, y, x), (x == 2) as u8 as f32);
            }
        }
        let thick = label_to_boundary(&labels, 2, 3).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(thick.get(1, y, x), (x <= 2) as u8 as f32);
                assert_eq!(thick.get(0, y, x), (1..=3).contains(&x) as u8 as f32);
            }
        }
    }

    #[test]
    fn out_of_range_label_reports_position() {
        let mut labels = LabelMap::filled(3, 3, 0);
        labels.set(2, 1, 5);
        match label_to_boundary(&labels, 3, 1) {
            Err(Error::LabelOutOfRange { x: 2, y: 1, label: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label_map() -> impl Strategy<Value = LabelMap> {
            (2usize..9, 2usize..9).prop_flat_map(|(w, h)| {
                proptest::collection::vec(0u32..4, w * h).prop_map(move |d| LabelMap::new(w, h, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn boundary_matches_brute_force_and_is_adjacent(labels in label_map()) {
                let b = label_to_boundary(&labels, 4, 1).unwrap();
                let brute = brute_boundary(&labels, 4);
                let (w, h) = (labels.width, labels.height);
                for c in 0..4 {
                    let got: Vec<u8> = b.channel(c).iter().map(|&v| v as u8).collect();
                    prop_assert_eq!(&got, &brute[c]);
                    let present = labels.contains(c as u32);
                    let full = labels.data.iter().all(|&l| l == c as u32);
                    prop_assert_eq!(got.iter().all(|&v| v == 0), !present || full);
                }
                // every mark has a 4-neighbour marked in another channel
                for c in 0..4 {
                    for y in 0..h {
                        for x in 0..w {
                            if b.get(c, y, x) == 0.0 { continue; }
                            let mut found = false;
                            for (dx, dy) in [(1i32, 0i32), (-1, 0), (0, 1), (0, -1)] {
                                let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                                if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 { continue; }
                                found |= (0..4).any(|o| o != c && b.get(o, ny as usize, nx as usize) == 1.0);
                            }
                            prop_assert!(found);
                        }
                    }
                }
            }
        }
    }
}

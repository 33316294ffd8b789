//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sbseg::edge::CannyConfig;
use sbseg::image::{GrayImage, LabelMap};
use sbseg::tensor::{ConvKernel, Tensor};

/// Staged reference detector: 2-D window blur, explicit Sobel masks,
/// angle-binned suppression and fixpoint hysteresis.
pub fn reference_canny(image: &GrayImage, config: &CannyConfig) -> Vec<u8> {
    let (w, h) = (image.width as isize, image.height as isize);
    let px = |x: isize, y: isize| image.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as i64;

    let sigma = config.gaussian_sigma;
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let tap = |i: isize| (256.0 * (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).round() as i64;
    let mut smooth = vec![0i64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for j in -radius..=radius {
                for i in -radius..=radius {
                    acc += tap(i) * tap(j) * px(x + i, y + j);
                }
            }
            smooth[(y * w + x) as usize] = acc;
        }
    }
    let sm = |x: isize, y: isize| smooth[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    const KX: [[i64; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    const KY: [[i64; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    let mut gx = vec![0i64; (w * h) as usize];
    let mut gy = vec![0i64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0, 0);
            for j in 0..3 {
                for i in 0..3 {
                    let v = sm(x + i as isize - 1, y + j as isize - 1);
                    sx += KX[j][i] * v;
                    sy += KY[j][i] * v;
                }
            }
            gx[(y * w + x) as usize] = sx;
            gy[(y * w + x) as usize] = sy;
        }
    }
    let m2 = |x: isize, y: isize| -> i128 {
        if x < 0 || y < 0 || x >= w || y >= h {
            return 0;
        }
        let i = (y * w + x) as usize;
        (gx[i] as i128).pow(2) + (gy[i] as i128).pow(2)
    };

    let mut cand = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if m2(x, y) == 0 {
                continue;
            }
            // angle of the gradient in degrees, [0, 360)
            let a = (gy[i] as f64).atan2(gx[i] as f64).to_degrees().rem_euclid(360.0);
            let sector = ((a + 22.5) / 45.0).floor() as i32 % 8;
            let (dx, dy) = match sector {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                3 => (-1, 1),
                4 => (-1, 0),
                5 => (-1, -1),
                6 => (0, -1),
                _ => (1, -1),
            };
            cand[i] = m2(x, y) > m2(x - dx, y - dy) && m2(x, y) >= m2(x + dx, y + dy);
        }
    }

    let max2 = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| m2(x, y)).max().unwrap() as f64;
    let lo = config.low_threshold.powi(2) * max2;
    let hi = config.high_threshold.powi(2) * max2;
    let mut edge: Vec<bool> = (0..(w * h) as usize)
        .map(|i| cand[i] && m2(i as isize % w, i as isize / w) as f64 >= hi)
        .collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if edge[i] || !cand[i] || (m2(x, y) as f64) < lo {
                    continue;
                }
                let touches = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && nx < w && ny < h && edge[(ny * w + nx) as usize]
                    })
                });
                if touches {
                    edge[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    edge.iter().map(|&e| e as u8).collect()
}


pub fn random_blocky_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    // four flat quadrants plus mild noise
    let levels: Vec<u8> = (0..4).map(|_| rng.random_range(0..=255)).collect();
    let cx = rng.random_range(3..w - 3);
    let cy = rng.random_range(3..h - 3);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let q = (x >= cx) as usize + 2 * (y >= cy) as usize;
            let n: i32 = rng.random_range(-6..=6);
            (levels[q] as i32 + n).clamp(0, 255) as u8
        })
        .collect();
    GrayImage::new(w, h, data).unwrap()
}


pub fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize, classes: u32) -> LabelMap {
    LabelMap::from_fn(w, h, |_, _| rng.random_range(0..classes))
}

/// Per-class IoU by counting pixels directly, `None` where the class is in
/// neither map.
pub fn brute_force_iou(pred: &[LabelMap], truth: &[LabelMap], classes: usize) -> Vec<Option<f64>> {
    (0..classes as u32)
        .map(|c| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (p, t) in pred.iter().zip(truth) {
                for (&a, &b) in p.data.iter().zip(&t.data) {
                    inter += (a == c && b == c) as u64;
                    union += (a == c || b == c) as u64;
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Direct sliding-window convolution with edge-clamped reads.
pub fn reference_conv(input: &Tensor<f64>, kernel: &ConvKernel<f64>) -> Tensor<f64> {
    let (_, h, w) = input.shape();
    let (kh, kw) = kernel.kernel_size();
    let per_group_out = kernel.out_channels() / kernel.groups();
    let cin = kernel.in_per_group();
    Tensor::from_fn(kernel.out_channels(), h, w, |o, y, x| {
        let first_in = (o / per_group_out) * cin;
        let mut acc = kernel.bias[o];
        for i in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let sy = (y as isize + dy as isize - (kh / 2) as isize).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx as isize - (kw / 2) as isize).clamp(0, w as isize - 1) as usize;
                    acc += kernel.weights[((o * cin + i) * kh + dy) * kw + dx] * input.get(first_in + i, sy, sx);
                }
            }
        }
        acc
    })
}

/// Bilinear resampling evaluated from the half-pixel formula
/// `src = (dst + 0.5) · in / out - 0.5`, clamped to the grid.
pub fn reference_upsample(input: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let (_, h, w) = input.shape();
    let coord = |d: usize, n_in: usize, n_out: usize| {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    Tensor::from_fn(input.channels(), out_h, out_w, |c, y, x| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = input.get(c, y0, x0) * (1.0 - fx) + input.get(c, y0, x1) * fx;
        let bottom = input.get(c, y1, x0) * (1.0 - fx) + input.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

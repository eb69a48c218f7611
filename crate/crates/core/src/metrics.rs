//! Masked L2 losses, mean angular error, and SSIM.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ColorMap, Map, NormalMap, Pixel, ScalarMap};

/// Weights of the component losses in [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub albedo: f64,
    pub normal: f64,
    pub depth: f64,
    pub roughness: f64,
    pub reconstruction: f64,
    pub relighting: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            albedo: 1.0,
            normal: 2.0,
            depth: 1.0,
            roughness: 1.0,
            reconstruction: 1.0,
            relighting: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub albedo: f64,
    pub normal: f64,
    pub depth: f64,
    pub roughness: f64,
    pub reconstruction: f64,
    pub relighting: f64,
}

/// Weighted sum of the component losses. The depth term is counted once.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.albedo * c.albedo
        + w.normal * c.normal
        + w.depth * c.depth
        + w.roughness * c.roughness
        + w.reconstruction * c.reconstruction
        + w.relighting * c.relighting
}

/// `(1 / sum M) * sum_{masked pixels} sum_channels (est - truth)^2`.
///
/// The normalizer counts masked pixels, not pixel-channel entries.
pub fn masked_mse<P: Pixel>(estimate: &Map<P>, truth: &Map<P>, mask: &ScalarMap) -> Result<f64> {
    estimate.check_same_dims(truth)?;
    estimate.check_same_dims(mask)?;
    let mut sum = 0.0;
    let mut count = 0.0;
    for ((e, t), &m) in estimate.data().iter().zip(truth.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        count += m;
        for c in 0..P::CHANNELS {
            let d = (e.channel(c) - t.channel(c)) * m;
            sum += d * d;
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count)
}

/// Forward-difference gradient pairs `(dx, dy)` and the mask of pixels where
/// both differences stay inside the object.
fn gradient_field(map: &ScalarMap, mask: &ScalarMap) -> (Map<Vector2<f64>>, ScalarMap) {
    let (w, h) = map.dims();
    let mut grads = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ok = x + 1 < w
                && y + 1 < h
                && mask.get(x, y) == 1.0
                && mask.get(x + 1, y) == 1.0
                && mask.get(x, y + 1) == 1.0;
            if ok {
                let v = map.get(x, y);
                grads.push(Vector2::new(map.get(x + 1, y) - v, map.get(x, y + 1) - v));
                valid.push(1.0);
            } else {
                grads.push(Vector2::zeros());
                valid.push(0.0);
            }
        }
    }
    (
        Map::new(w, h, grads).expect("one gradient per pixel"),
        Map::new(w, h, valid).expect("one flag per pixel"),
    )
}

/// Masked MSE between the forward-difference gradients of two roughness maps.
/// Differences that leave the mask are excluded.
pub fn roughness_gradient_loss(estimate: &ScalarMap, truth: &ScalarMap, mask: &ScalarMap) -> Result<f64> {
    estimate.check_same_dims(truth)?;
    estimate.check_same_dims(mask)?;
    let (ge, valid) = gradient_field(estimate, mask);
    let (gt, _) = gradient_field(truth, mask);
    masked_mse(&ge, &gt, &valid)
}

/// Per-pixel angle in degrees between two normal maps, masked pixels only,
/// in row-major order. Uses `atan2(|a x b|, a . b)`, which is exact for
/// identical directions and insensitive to small deviations from unit length.
pub fn angular_errors(estimate: &NormalMap, truth: &NormalMap, mask: &ScalarMap) -> Result<Vec<f64>> {
    estimate.check_same_dims(truth)?;
    estimate.check_same_dims(mask)?;
    Ok(estimate
        .data()
        .iter()
        .zip(truth.data())
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|((e, t), _)| e.cross(t).norm().atan2(e.dot(t)).to_degrees())
        .collect())
}

/// Mean angular error in degrees over masked pixels.
pub fn mean_angular_error(estimate: &NormalMap, truth: &NormalMap, mask: &ScalarMap) -> Result<f64> {
    let errs = angular_errors(estimate, truth, mask)?;
    if errs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *w = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable Gaussian filter over the valid region only; output is
/// `(w - 10) x (h - 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let e_aa = filter_valid(&aa, w, h, &k);
    let e_bb = filter_valid(&bb, w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03
/// and unit dynamic range, averaged over every channel of the pixels.
pub fn ssim<P: Pixel>(estimate: &Map<P>, truth: &Map<P>) -> Result<f64> {
    estimate.check_same_dims(truth)?;
    let (w, h) = estimate.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let mut sum = 0.0;
    for c in 0..P::CHANNELS {
        let a: Vec<f64> = estimate.data().iter().map(|p| p.channel(c)).collect();
        let b: Vec<f64> = truth.data().iter().map(|p| p.channel(c)).collect();
        sum += ssim_plane(&a, &b, w, h);
    }
    Ok(sum / P::CHANNELS as f64)
}

/// SSIM of two color images.
pub fn ssim_color(estimate: &ColorMap, truth: &ColorMap) -> Result<f64> {
    ssim(estimate, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vec3;

    fn ones(w: usize, h: usize) -> ScalarMap {
        Map::filled(w, h, 1.0)
    }

    #[test]
    fn mse_identity_and_hand_value() {
        let a = Map::from_fn(3, 2, |x, y| Vec3::new(x as f64, y as f64, 0.5));
        assert_eq!(masked_mse(&a, &a, &ones(3, 2)).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(1, 1, a.get(1, 1) + Vec3::new(1.0, 2.0, 0.0));
        // one pixel off by (1, 2, 0): squared error 5 over 6 masked pixels
        assert!((masked_mse(&b, &a, &ones(3, 2)).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let mut mask = ones(3, 2);
        mask.set(1, 1, 0.0);
        assert_eq!(masked_mse(&b, &a, &mask).unwrap(), 0.0);
    }

    #[test]
    fn mse_matches_brute_force() {
        let a = Map::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 11) as f64 / 11.0);
        let b = Map::from_fn(7, 5, |x, y| ((x * 13 + y * 7) % 5) as f64 / 5.0);
        let m = Map::from_fn(7, 5, |x, y| ((x + y) % 3 != 0) as u8 as f64);
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                if m.get(x, y) == 1.0 {
                    sum += (a.get(x, y) - b.get(x, y)).powi(2);
                    n += 1.0;
                }
            }
        }
        assert!((masked_mse(&a, &b, &m).unwrap() - sum / n).abs() < 1e-14);
    }

    #[test]
    fn empty_mask_and_mismatch_are_errors() {
        let a = Map::filled(4, 4, 0.2);
        assert!(matches!(
            masked_mse(&a, &a, &Map::filled(4, 4, 0.0)),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            masked_mse(&a, &Map::filled(4, 3, 0.2), &ones(4, 4)),
            Err(Error::DimensionMismatch { .. })
        ));
        let n = Map::filled(2, 2, Vec3::z());
        assert!(matches!(
            mean_angular_error(&n, &n, &Map::filled(2, 2, 0.0)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn ramp_gradient_loss() {
        let ramp = Map::from_fn(4, 4, |x, _| x as f64);
        let flat = Map::filled(4, 4, 0.0);
        // 3x3 valid pairs, each with gradient (1, 0)
        assert_eq!(roughness_gradient_loss(&ramp, &flat, &ones(4, 4)).unwrap(), 1.0);
        assert_eq!(roughness_gradient_loss(&ramp, &ramp, &ones(4, 4)).unwrap(), 0.0);
        // a constant offset has no gradient
        let shifted = ramp.map(|v| v + 0.25);
        assert_eq!(roughness_gradient_loss(&ramp, &shifted, &ones(4, 4)).unwrap(), 0.0);
        // differences that cross the mask edge are skipped
        let mut mask = ones(4, 4);
        mask.set(3, 0, 0.0);
        let step = Map::from_fn(4, 4, |x, y| if x == 3 && y == 0 { 9.0 } else { 0.0 });
        assert_eq!(roughness_gradient_loss(&step, &flat, &mask).unwrap(), 0.0);
    }

    #[test]
    fn angular_error_hand_values() {
        let z = Map::filled(2, 1, Vec3::z());
        let mut other = z.clone();
        other.set(1, 0, Vec3::x());
        assert_eq!(mean_angular_error(&z, &z, &ones(2, 1)).unwrap(), 0.0);
        assert!((mean_angular_error(&other, &z, &ones(2, 1)).unwrap() - 45.0).abs() < 1e-12);
        let flipped = z.map(|n| -n);
        assert!((mean_angular_error(&flipped, &z, &ones(2, 1)).unwrap() - 180.0).abs() < 1e-12);
    }

    fn ssim_pair() -> (ScalarMap, ScalarMap) {
        let a = Map::from_fn(24, 20, |x, y| 0.5 + 0.4 * (0.3 * x as f64 + 0.2 * y as f64).sin());
        let b = Map::from_fn(24, 20, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.35 * (0.31 * x + 0.2 * y + 0.1).sin() + 0.05 * (0.7 * x).cos()
        });
        (a, b)
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (a, b) = ssim_pair();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = Map::filled(10, 30, 0.5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_matches_reference_values() {
        // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1)
        let (a, b) = ssim_pair();
        assert!((ssim(&a, &b).unwrap() - 0.9122210390297554).abs() < 1e-9);

        let ca = Map::from_fn(24, 20, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            Vec3::new(
                a.get(x, y),
                0.3 + 0.2 * (0.25 * xf - 0.15 * yf).cos(),
                (0.1 + 0.02 * xf + 0.01 * yf).clamp(0.0, 1.0),
            )
        });
        let cb = Map::from_fn(24, 20, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            Vec3::new(
                b.get(x, y),
                0.32 + 0.18 * (0.25 * xf - 0.17 * yf).cos(),
                (0.12 + 0.019 * xf + 0.011 * yf).clamp(0.0, 1.0),
            )
        });
        assert!((ssim_color(&ca, &cb).unwrap() - 0.9519891936347106).abs() < 1e-9);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let normal_only = LossComponents {
            normal: 1.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&normal_only, &w), 2.0);
        let all = LossComponents {
            albedo: 1.0,
            normal: 1.0,
            depth: 1.0,
            roughness: 1.0,
            reconstruction: 1.0,
            relighting: 1.0,
        };
        assert_eq!(total_loss(&all, &w), 7.0);
    }
}

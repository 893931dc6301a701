//! Image and action metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CovarError, Result};
use crate::tensor::Tensor;

/// Reported for identical images instead of +∞.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Splits `a` and `b` (`…×3×H×W`, same shape) into per-frame slices.
fn frames<'a>(a: &'a Tensor<f32>, b: &'a Tensor<f32>) -> Result<(Vec<(&'a [f32], &'a [f32])>, [usize; 3])> {
    a.expect_same_shape(b)?;
    let s = a.shape();
    if s.len() < 3 {
        return Err(CovarError::Shape(format!("{s:?} is not a C×H×W frame set")));
    }
    let dims = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
    let per = dims.iter().product::<usize>().max(1);
    let pairs = a.data().chunks(per).zip(b.data().chunks(per)).collect();
    Ok((pairs, dims))
}

/// Peak signal-to-noise ratio with peak 1, computed per frame and averaged
/// over frames. Identical frames score [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (pairs, _) = frames(a, b)?;
    if pairs.is_empty() {
        return Err(CovarError::Shape("empty frame set".into()));
    }
    let total: f64 = pairs
        .iter()
        .map(|(x, y)| {
            let mse = x
                .iter()
                .zip(*y)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                / x.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Summed-area table with a zero border: `(h+1)×(w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y, x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn ssim_channel(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let at = |y: usize, x: usize| a[y * w + x] as f64;
    let bt = |y: usize, x: usize| b[y * w + x] as f64;
    let tables = [
        integral(h, w, at),
        integral(h, w, bt),
        integral(h, w, |y, x| at(y, x) * at(y, x)),
        integral(h, w, |y, x| bt(y, x) * bt(y, x)),
        integral(h, w, |y, x| at(y, x) * bt(y, x)),
    ];
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let box_sum = |s: &[f64], y: usize, x: usize| {
        let w1 = w + 1;
        s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
    };
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let [sa, sb, saa, sbb, sab] = tables.each_ref().map(|t| box_sum(t, y, x) / n);
            let (va, vb, cov) = (saa - sa * sa, sbb - sb * sb, sab - sa * sb);
            total += ((2.0 * sa * sb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((sa * sa + sb * sb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

/// Structural similarity with a 7×7 uniform window over valid positions,
/// population statistics, dynamic range 1. Averaged over windows, channels
/// and frames.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (pairs, [c, h, w]) = frames(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CovarError::Shape(format!(
            "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    if pairs.is_empty() {
        return Err(CovarError::Shape("empty frame set".into()));
    }
    let plane = h * w;
    let mut total = 0.0;
    for (x, y) in &pairs {
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            total += ssim_channel(&x[r.clone()], &y[r], h, w);
        }
    }
    Ok(total / (pairs.len() * c) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionErrors {
    pub mse: f64,
    /// Euclidean `(x, y)` distance at the last step.
    pub final_pos_error: f64,
}

pub fn action_errors(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<ActionErrors> {
    pred.expect_same_shape(gt)?;
    let s = gt.shape();
    if s.len() != 2 || s[0] == 0 || s[1] < 2 {
        return Err(CovarError::Shape(format!("{s:?} is not a T×L action sequence")));
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / pred.numel() as f64;
    let last = (s[0] - 1) * s[1];
    let (p, q) = (&pred.data()[last..], &gt.data()[last..]);
    let final_pos_error = ((p[0] as f64 - q[0] as f64).powi(2) + (p[1] as f64 - q[1] as f64).powi(2)).sqrt();
    Ok(ActionErrors { mse, final_pos_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window SSIM without summed-area tables.
    fn ssim_direct(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let s = a.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let k = SSIM_WINDOW;
        let mut acc = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let px = |t: &Tensor<f32>, y, x| t.data()[ch * h * w + y * w + x] as f64;
                    let win: Vec<(f64, f64)> = (y0..y0 + k)
                        .flat_map(|y| (x0..x0 + k).map(move |x| (y, x)))
                        .map(|(y, x)| (px(a, y, x), px(b, y, x)))
                        .collect();
                    let n = win.len() as f64;
                    let ma = win.iter().map(|p| p.0).sum::<f64>() / n;
                    let mb = win.iter().map(|p| p.1).sum::<f64>() / n;
                    let va = win.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                    let vb = win.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                    let cv = win.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                    acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    fn uniform(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        use rand::Rng;
        Tensor::from_fn(shape, |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_identity_and_analytic() {
        let a = Tensor::full([2, 3, 8, 8], 0.5f32);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = uniform([3, 16, 16], &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let zero = Tensor::zeros([3, 8, 8]);
        let one = Tensor::full([3, 8, 8], 1.0f32);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = uniform([3, 12, 10], &mut rng);
            let b = uniform([3, 12, 10], &mut rng);
            assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Tensor::zeros([3, 6, 6]);
        assert!(ssim(&a, &a).is_err());
        assert!(psnr(&a, &Tensor::zeros([3, 6, 5])).is_err());
    }

    #[test]
    fn action_error_cases() {
        let gt = Tensor::from_fn([4, 3], |i| i as f32 * 0.1);
        let e = action_errors(&gt, &gt).unwrap();
        assert_eq!((e.mse, e.final_pos_error), (0.0, 0.0));
        let mut p = gt.clone();
        p.data_mut()[9] += 0.3;
        p.data_mut()[10] += 0.4;
        let e = action_errors(&p, &gt).unwrap();
        assert!((e.final_pos_error - 0.5).abs() < 1e-6);
        let brute = (0.09 + 0.16) / 12.0;
        assert!((e.mse - brute).abs() < 1e-7);
    }
}

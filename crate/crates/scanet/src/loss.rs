//! Training objective (pixel Charbonnier + gradient-space L1 + gradient
//! branch supervision) and plain-valued image metrics (PSNR, SSIM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.1, gamma: 0.2, charbonnier_eps: 1e-3 }
    }
}

/// Scalar values of each term, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub pixel: f64,
    pub pixel_grad: f64,
    pub grad_branch: f64,
    pub total: f64,
}

/// mean(sqrt((a-b)^2 + eps^2)) — a smooth L1 surrogate.
pub fn charbonnier<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let diff = ops::sub(a, b)?;
    let inner = ops::add_scalar(&ops::square(&diff), T::from_f64(eps * eps));
    Ok(ops::mean(&ops::sqrt(&inner)))
}

/// L1 distance between the gradient maps of the two images.
pub fn pixel_grad_loss<T: Scalar>(denoised: &Tensor<T>, clean: &Tensor<T>) -> Result<Tensor<T>> {
    let gd = ops::grad_map(denoised);
    let gc = ops::grad_map(clean);
    Ok(ops::mean(&ops::abs(&ops::sub(&gd, &gc)?)))
}

/// MSE between the branch prediction and the clean image's gradient map.
pub fn grad_branch_loss<T: Scalar>(pred: &Tensor<T>, clean: &Tensor<T>) -> Result<Tensor<T>> {
    let target = ops::grad_map(clean);
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            ctx: "grad branch prediction vs target",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    Ok(ops::mean(&ops::square(&ops::sub(pred, &target)?)))
}

/// α·pixel + β·pixel-grad + γ·branch. The branch term is zero (and skipped)
/// when the model produced no gradient prediction.
pub fn total_loss<T: Scalar>(
    denoised: &Tensor<T>,
    clean: &Tensor<T>,
    pred_grad: Option<&Tensor<T>>,
    w: &LossWeights,
) -> Result<(Tensor<T>, LossReport)> {
    let pixel = charbonnier(denoised, clean, w.charbonnier_eps)?;
    let pgrad = pixel_grad_loss(denoised, clean)?;
    let mut report = LossReport {
        pixel: pixel.data()[0].as_f64(),
        pixel_grad: pgrad.data()[0].as_f64(),
        ..Default::default()
    };
    let mut total = ops::add(
        &ops::mul_scalar(&pixel, T::from_f64(w.alpha)),
        &ops::mul_scalar(&pgrad, T::from_f64(w.beta)),
    )?;
    if let Some(pred) = pred_grad {
        let branch = grad_branch_loss(pred, clean)?;
        report.grad_branch = branch.data()[0].as_f64();
        total = ops::add(&total, &ops::mul_scalar(&branch, T::from_f64(w.gamma)))?;
    }
    report.total = total.data()[0].as_f64();
    Ok((total, report))
}

/// Peak signal-to-noise ratio in dB for [0,1] images; +∞ when identical.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr requires equal-length buffers");
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WIN * SSIM_WIN)
        .map(|i| {
            let (y, x) = ((i / SSIM_WIN) as f64 - c, (i % SSIM_WIN) as f64 - c);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM over all valid (fully covered) 11×11 windows, averaged over
/// channels. Images are single-image [C,H,W] slices in row-major order.
pub fn ssim(a: &[f32], b: &[f32], channels: usize, h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), channels * h * w);
    assert_eq!(b.len(), a.len());
    assert!(
        h >= SSIM_WIN && w >= SSIM_WIN,
        "ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}"
    );
    let win = ssim_window();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let (c1, c2) = (c1, c2); // L = 1 for [0,1] images
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        for i in 0..=(h - SSIM_WIN) {
            for j in 0..=(w - SSIM_WIN) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wi in 0..SSIM_WIN {
                    for wj in 0..SSIM_WIN {
                        let g = win[wi * SSIM_WIN + wj];
                        let x = pa[(i + wi) * w + j + wj] as f64;
                        let y = pb[(i + wi) * w + j + wj] as f64;
                        mx += g * x;
                        my += g * y;
                        mxx += g * x * x;
                        myy += g * y * y;
                        mxy += g * x * y;
                    }
                }
                let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

use crate::error::{argument, Result};
use crate::image::{ImageBuffer, ImageKind};
use crate::metrics::{ssim_with_grad, SsimConfig};

/// `lambda_mse * MSE + lambda_ssim * (1 - SSIM)` and its gradient with
/// respect to every pixel of `pred`.
///
/// The SSIM term is skipped entirely when `lambda_ssim` is zero, which also
/// lifts the minimum image size.
pub fn composite_loss(
    pred: &ImageBuffer,
    target: &ImageBuffer,
    lambda_mse: f64,
    lambda_ssim: f64,
) -> Result<(f64, ImageBuffer)> {
    if !pred.same_shape(target) {
        return Err(argument(format!(
            "prediction {}x{}x{} does not match target {}x{}x{}",
            pred.width, pred.height, pred.channels, target.width, target.height, target.channels
        )));
    }
    if pred.data.iter().chain(&target.data).any(|v| !v.is_finite()) {
        return Err(argument("loss inputs must be finite"));
    }
    let n = pred.data.len() as f64;
    let mut grad = ImageBuffer::new(pred.width, pred.height, pred.channels, ImageKind::Radiance);
    let mut sq = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sq += d * d;
        *g = lambda_mse * 2.0 * d / n;
    }
    let mut loss = lambda_mse * sq / n;
    if lambda_ssim != 0.0 {
        let (s, sg) = ssim_with_grad(pred, target, &SsimConfig::default())?;
        loss += lambda_ssim * (1.0 - s);
        for (g, v) in grad.data.iter_mut().zip(sg) {
            *g -= lambda_ssim * v;
        }
    }
    Ok((loss, grad))
}

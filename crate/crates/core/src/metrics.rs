//! Image quality metrics.

use crate::blur::ssim;
use crate::image::Image;
use thiserror::Error;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn check(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.same_shape(b) && !a.is_empty() {
        Ok(())
    } else {
        Err(MetricError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images, channels pooled.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

pub fn ssim_value(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    ssim(a, b)
        .map(|(v, _)| v)
        .map_err(|e| MetricError::Shape(e.to_string()))
}

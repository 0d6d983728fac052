use crate::data::RasterImage;
use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in dB for a peak value of 1. Identical
/// images return `f64::INFINITY`.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

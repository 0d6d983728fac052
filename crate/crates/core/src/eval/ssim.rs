//! Structural similarity with an 11x11 Gaussian window (sigma 1.5),
//! K1 = 0.01, K2 = 0.03, data range 1, population covariances, symmetric
//! boundary extension, border of half a window excluded from the mean and
//! channels averaged.

use ndarray::{Array2, ArrayView2, Axis};

use crate::data::RasterImage;
use crate::error::{Error, Result};

const SIGMA: f64 = 1.5;
const TRUNCATE: f64 = 3.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let radius = (TRUNCATE * SIGMA + 0.5) as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x * x) as f64 / (SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric index: `d c b a | a b c d | d c b a`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn filter_axis(a: &Array2<f64>, k: &[f64], axis: usize) -> Array2<f64> {
    let r = (k.len() / 2) as i64;
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| {
                let off = j as i64 - r;
                let v = if axis == 0 {
                    a[[reflect(y as i64 + off, h), x]]
                } else {
                    a[[y, reflect(x as i64 + off, w)]]
                };
                kv * v
            })
            .sum()
    })
}

fn blur(a: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    filter_axis(&filter_axis(a, k, 0), k, 1)
}

/// SSIM of two single-channel planes.
pub fn ssim_plane(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let k = gaussian_kernel();
    let (a, b) = (a.to_owned(), b.to_owned());
    let ux = blur(&a, &k);
    let uy = blur(&b, &k);
    let uxx = blur(&(&a * &a), &k);
    let uyy = blur(&(&b * &b), &k);
    let uxy = blur(&(&a * &b), &k);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (h, w) = a.dim();
    let half = k.len() / 2;
    let pad = half.min((h - 1) / 2).min((w - 1) / 2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in pad..h - pad {
        for x in pad..w - pad {
            let (mx, my) = (ux[[y, x]], uy[[y, x]]);
            let vx = uxx[[y, x]] - mx * mx;
            let vy = uyy[[y, x]] - my * my;
            let vxy = uxy[[y, x]] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let c = a.shape().2;
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(a.pixels().index_axis(Axis(2), ch), b.pixels().index_axis(Axis(2), ch)))
        .sum();
    Ok(sum / c as f64)
}

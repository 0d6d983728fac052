//! Feature similarity on luminance: phase congruency (log-Gabor bank, 4
//! scales x 4 orientations) combined with Scharr gradient magnitude.
//! Luminance uses the 0..255 scale the similarity constants assume.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::data::RasterImage;
use crate::error::{Error, Result};

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ON_F: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

type Grid = Array2<Complex64>;

fn fft2(input: &Grid, inverse: bool) -> Grid {
    let (rows, cols) = input.dim();
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    let mut out = input.clone();
    for mut row in out.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        row_fft.process(&mut buf);
        row.assign(&ndarray::ArrayView1::from(&buf));
    }
    for mut col in out.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        col_fft.process(&mut buf);
        col.assign(&ndarray::ArrayView1::from(&buf));
    }
    if inverse {
        let n = (rows * cols) as f64;
        out.mapv_inplace(|v| v / n);
    }
    out
}

/// Frequency coordinates normalized to +-0.5 with the zero frequency
/// moved to index 0.
fn freq_range(n: usize) -> Vec<f64> {
    let centered: Vec<f64> = if n % 2 == 1 {
        let half = (n - 1) as f64 / 2.0;
        (0..n).map(|i| (i as f64 - half) / (n - 1) as f64).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    // ifftshift
    let shift = n / 2;
    (0..n).map(|i| centered[(i + shift) % n]).collect()
}

fn lowpass(rows: usize, cols: usize, cutoff: f64, order: i32) -> Array2<f64> {
    let (ys, xs) = (freq_range(rows), freq_range(cols));
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let radius = (xs[c] * xs[c] + ys[r] * ys[r]).sqrt();
        1.0 / (1.0 + (radius / cutoff).powi(2 * order))
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Phase congruency map of a luminance plane.
pub fn phase_congruency(im: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = im.dim();
    let image_fft = fft2(&im.mapv(|v| Complex64::new(v, 0.0)), false);
    let (ys, xs) = (freq_range(rows), freq_range(cols));
    let mut radius = Array2::from_shape_fn((rows, cols), |(r, c)| (xs[c] * xs[c] + ys[r] * ys[r]).sqrt());
    let theta = Array2::from_shape_fn((rows, cols), |(r, c)| (-ys[r]).atan2(xs[c]));
    radius[[0, 0]] = 1.0;
    let (sin_t, cos_t) = (theta.mapv(f64::sin), theta.mapv(f64::cos));
    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;
    let lp = lowpass(rows, cols, 0.45, 15);

    let log_gabor: Vec<Array2<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g = Array2::from_shape_fn((rows, cols), |(r, c)| {
                (-(radius[[r, c]] / fo).ln().powi(2) / denom).exp() * lp[[r, c]]
            });
            g[[0, 0]] = 0.0;
            g
        })
        .collect();

    let n = (rows * cols) as f64;
    let mut energy_all = Array2::<f64>::zeros((rows, cols));
    let mut an_all = Array2::<f64>::zeros((rows, cols));
    for o in 0..NORIENT {
        let angle = o as f64 * PI / NORIENT as f64;
        let spread = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let ds = sin_t[[r, c]] * angle.cos() - cos_t[[r, c]] * angle.sin();
            let dc = cos_t[[r, c]] * angle.cos() + sin_t[[r, c]] * angle.sin();
            let dtheta = ds.atan2(dc).abs();
            (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
        });
        let mut sum_e = Array2::<f64>::zeros((rows, cols));
        let mut sum_o = Array2::<f64>::zeros((rows, cols));
        let mut sum_an = Array2::<f64>::zeros((rows, cols));
        let mut responses = Vec::with_capacity(NSCALE);
        let mut spatial_filters = Vec::with_capacity(NSCALE);
        let mut em_n = 0.0;
        for (s, gabor) in log_gabor.iter().enumerate() {
            let filter = gabor * &spread;
            let spatial = fft2(&filter.mapv(|v| Complex64::new(v, 0.0)), true).mapv(|c| c.re * n.sqrt());
            spatial_filters.push(spatial);
            let eo = fft2(&(&image_fft * &filter.mapv(|v| Complex64::new(v, 0.0))), true);
            sum_an = sum_an + eo.mapv(|c| c.norm());
            sum_e = sum_e + eo.mapv(|c| c.re);
            sum_o = sum_o + eo.mapv(|c| c.im);
            if s == 0 {
                em_n = filter.mapv(|v| v * v).sum();
            }
            responses.push(eo);
        }
        let x_energy = Array2::from_shape_fn((rows, cols), |p| {
            (sum_e[p] * sum_e[p] + sum_o[p] * sum_o[p]).sqrt() + EPSILON
        });
        let mean_e = &sum_e / &x_energy;
        let mean_o = &sum_o / &x_energy;
        let mut energy = Array2::<f64>::zeros((rows, cols));
        for eo in &responses {
            for ((p, acc), c) in energy.indexed_iter_mut().zip(eo.iter()) {
                let (e, od) = (c.re, c.im);
                *acc += e * mean_e[p] + od * mean_o[p] - (e * mean_o[p] - od * mean_e[p]).abs();
            }
        }
        let median_e2n = median(responses[0].iter().map(|c| c.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = mean_e2n / em_n;
        let mut est_sum_an2 = 0.0;
        for f in &spatial_filters {
            est_sum_an2 += f.mapv(|v| v * v).sum();
        }
        let mut est_sum_ai_aj = 0.0;
        for si in 0..NSCALE - 1 {
            for sj in si + 1..NSCALE {
                est_sum_ai_aj += (&spatial_filters[si] * &spatial_filters[sj]).sum();
            }
        }
        let est_noise_energy2 = 2.0 * noise_power * est_sum_an2 + 4.0 * noise_power * est_sum_ai_aj;
        let tau = (est_noise_energy2 / 2.0).sqrt();
        let est_noise_energy = tau * (PI / 2.0).sqrt();
        let est_noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let t = (est_noise_energy + NOISE_K * est_noise_sigma) / 1.7;
        energy.mapv_inplace(|v| (v - t).max(0.0));
        energy_all = energy_all + energy;
        an_all = an_all + sum_an;
    }
    Array2::from_shape_fn((rows, cols), |p| {
        if an_all[p] > 0.0 {
            energy_all[p] / an_all[p]
        } else {
            0.0
        }
    })
}

/// 2-D convolution returning the central part, zero padded.
fn conv2_same(a: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let (kh, kw) = k.dim();
    let (oy, ox) = ((kh / 2) as i64, (kw / 2) as i64);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for u in 0..kh {
            for v in 0..kw {
                let sy = y as i64 + oy - u as i64;
                let sx = x as i64 + ox - v as i64;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += a[[sy as usize, sx as usize]] * k[[u, v]];
                }
            }
        }
        acc
    })
}

fn luminance(img: &RasterImage) -> Array2<f64> {
    let p = img.pixels();
    Array2::from_shape_fn((img.height(), img.width()), |(y, x)| {
        255.0 * (0.299 * p[[y, x, 0]] + 0.587 * p[[y, x, 1]] + 0.114 * p[[y, x, 2]])
    })
}

fn downsample(y: &Array2<f64>, f: usize) -> Array2<f64> {
    if f == 1 {
        return y.clone();
    }
    let avg = conv2_same(y, &Array2::from_elem((f, f), 1.0 / (f * f) as f64));
    let (h, w) = avg.dim();
    Array2::from_shape_fn((h.div_ceil(f), w.div_ceil(f)), |(r, c)| avg[[r * f, c * f]])
}

fn gradient_magnitude(y: &Array2<f64>) -> Array2<f64> {
    let dx = ndarray::arr2(&[[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0;
    let dy = ndarray::arr2(&[[3.0, 10.0, 3.0], [0.0, 0.0, 0.0], [-3.0, -10.0, -3.0]]) / 16.0;
    let ix = conv2_same(y, &dx);
    let iy = conv2_same(y, &dy);
    Array2::from_shape_fn(y.dim(), |p| (ix[p] * ix[p] + iy[p] * iy[p]).sqrt())
}

pub fn fsim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("fsim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let min_dim = a.height().min(a.width()) as f64;
    let f = ((min_dim / 256.0).round() as usize).max(1);
    let y1 = downsample(&luminance(a), f);
    let y2 = downsample(&luminance(b), f);
    let pc1 = phase_congruency(&y1);
    let pc2 = phase_congruency(&y2);
    let g1 = gradient_magnitude(&y1);
    let g2 = gradient_magnitude(&y2);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut grad_only = 0.0;
    for ((p, &p1), &p2) in pc1.indexed_iter().zip(pc2.iter()) {
        let pc_sim = (2.0 * p1 * p2 + T1) / (p1 * p1 + p2 * p2 + T1);
        let g_sim = (2.0 * g1[p] * g2[p] + T2) / (g1[p] * g1[p] + g2[p] * g2[p] + T2);
        let pcm = p1.max(p2);
        num += g_sim * pc_sim * pcm;
        den += pcm;
        grad_only += g_sim;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        // No phase structure anywhere (flat images): gradient term only.
        Ok(grad_only / pc1.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freq_range_even_and_odd() {
        assert_eq!(freq_range(4), vec![0.0, 0.25, -0.5, -0.25]);
        let odd = freq_range(5);
        assert_eq!(odd[0], 0.0);
        assert_eq!(odd[1], 0.25);
        assert_eq!(odd[3], -0.5);
    }

    #[test]
    fn fft_round_trip() {
        let a = Array2::from_shape_fn((6, 5), |(r, c)| Complex64::new((r * 5 + c) as f64, 0.0));
        let back = fft2(&fft2(&a, false), true);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn identical_and_flat() {
        let img = crate::data::synthetic::scene(3, 32, 32).unwrap().0;
        assert_eq!(fsim(&img, &img).unwrap(), 1.0);
        let flat = RasterImage::filled(16, 16, 0.3).unwrap();
        assert_eq!(fsim(&flat, &flat).unwrap(), 1.0);
    }

    #[test]
    fn median_even_count() {
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}

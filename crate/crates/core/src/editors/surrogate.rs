//! Tiny deterministic differentiable stand-ins for a diffusion editor.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Capabilities, EditBackend, EditParams};
use crate::data::PromptText;
use crate::error::Result;

const LATENT_FACTOR: usize = 8;

fn surrogate_caps() -> Capabilities {
    Capabilities {
        supports_masked_inpainting: true,
        supports_instruction_edit: false,
        differentiable: true,
        has_latent_encoder: true,
    }
}

/// `LATENT_FACTOR`-times average pooling, standing in for a VAE encoder.
fn pool_latent(image: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    let (ph, pw) = (
        h.div_ceil(LATENT_FACTOR) * LATENT_FACTOR - h,
        w.div_ceil(LATENT_FACTOR) * LATENT_FACTOR - w,
    );
    let mut x = image.clone();
    if ph > 0 {
        x = x.pad_with_same(2, 0, ph)?;
    }
    if pw > 0 {
        x = x.pad_with_same(3, 0, pw)?;
    }
    Ok(x.avg_pool2d(LATENT_FACTOR)?)
}

/// Per-channel mean of `values` over the protected pixels, broadcast to the
/// full image. Falls back to the plain image mean when nothing is protected.
fn protected_mean_fill(values: &Tensor, protected: &Tensor) -> Result<Tensor> {
    let area = protected.sum_keepdim((2, 3))?;
    let fill = if area.flatten_all()?.min(0)?.to_scalar::<f64>()? > 0.0 {
        values.mul(protected)?.sum_keepdim((2, 3))?.div(&area)?
    } else {
        values.mean_keepdim((2, 3))?
    };
    Ok(fill.broadcast_as(values.shape())?.contiguous()?)
}

/// Writes the spatial mean of the protected pixels into the editable region.
#[derive(Debug, Default, Clone, Copy)]
pub struct MeanFill;

impl EditBackend for MeanFill {
    fn id(&self) -> &str {
        "surrogate-mean"
    }

    fn capabilities(&self) -> Capabilities {
        surrogate_caps()
    }

    fn native_resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn raw_edit(&self, image: &Tensor, edit_region: &Tensor, _: &PromptText, _: &EditParams) -> Result<Tensor> {
        let protected = edit_region.affine(-1.0, 1.0)?;
        protected_mean_fill(image, &protected)
    }

    fn encode_latent(&self, image: &Tensor) -> Result<Tensor> {
        pool_latent(image)
    }

    fn parameter_checksum(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSurrogateParams {
    /// Slope of the saturating activation; the editor's sensitivity to the
    /// protected pixels peaks at `gain / 4` near `center`.
    pub gain: f64,
    pub center: f64,
    pub seed: u64,
    /// Magnitude of the prompt-dependent pre-activation offset.
    pub prompt_shift: f64,
}

impl Default for ConvSurrogateParams {
    fn default() -> Self {
        Self {
            gain: 40.0,
            center: 0.5,
            seed: 0,
            prompt_shift: 0.3,
        }
    }
}

/// Two-layer convolutional toy denoiser: a 3x3 smoothing layer followed by
/// a sigmoid and a 1x1 channel mix, then the protected-region mean of the
/// result is written into the editable region. The prompt enters as a
/// per-channel pre-activation offset.
#[derive(Debug, Clone)]
pub struct ConvSurrogate {
    params: ConvSurrogateParams,
    smooth: Tensor,
    mix: Tensor,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl ConvSurrogate {
    pub fn new(params: ConvSurrogateParams) -> Self {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut smooth = vec![0.0f64; 3 * 3 * 9];
        for o in 0..3 {
            let taps: Vec<f64> = (0..9).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect();
            let total: f64 = taps.iter().sum();
            for (k, t) in taps.iter().enumerate() {
                smooth[(o * 3 + o) * 9 + k] = t / total;
            }
        }
        let mut mix = vec![0.1f64; 9];
        for c in 0..3 {
            mix[c * 3 + c] = 0.8;
        }
        Self {
            params,
            smooth: Tensor::from_vec(smooth, (3, 3, 3, 3), &dev).expect("static shape"),
            mix: Tensor::from_vec(mix, (3, 3, 1, 1), &dev).expect("static shape"),
        }
    }

    pub fn params(&self) -> &ConvSurrogateParams {
        &self.params
    }

    fn prompt_offset(&self, prompt: &PromptText) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_str().as_bytes()));
        let s = self.params.prompt_shift;
        (0..3)
            .map(|_| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 })
            .collect()
    }
}

impl EditBackend for ConvSurrogate {
    fn id(&self) -> &str {
        "surrogate-conv"
    }

    fn capabilities(&self) -> Capabilities {
        surrogate_caps()
    }

    fn native_resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn raw_edit(&self, image: &Tensor, edit_region: &Tensor, prompt: &PromptText, _: &EditParams) -> Result<Tensor> {
        let protected = edit_region.affine(-1.0, 1.0)?;
        let visible = image.mul(&protected)?;
        let smoothed = visible.conv2d(&self.smooth.to_dtype(image.dtype())?, 1, 1, 1, 1)?;
        let offset = Tensor::from_vec(self.prompt_offset(prompt), (1, 3, 1, 1), image.device())?
            .to_dtype(image.dtype())?;
        let pre = smoothed
            .affine(self.params.gain, -self.params.gain * self.params.center)?
            .broadcast_add(&offset)?;
        let act = candle_core::Tensor::ones_like(&pre)?.div(&(pre.neg()?.exp()? + 1.0)?)?;
        let y = act.conv2d(&self.mix.to_dtype(image.dtype())?, 0, 1, 1, 1)?;
        protected_mean_fill(&y, &protected)
    }

    fn encode_latent(&self, image: &Tensor) -> Result<Tensor> {
        pool_latent(image)
    }

    fn parameter_checksum(&self) -> u64 {
        let mut h = fnv1a(&self.params.gain.to_le_bytes()) ^ fnv1a(&self.params.center.to_le_bytes());
        for t in [&self.smooth, &self.mix] {
            let vals = t
                .to_dtype(DType::F64)
                .and_then(|t| t.flatten_all())
                .and_then(|t| t.to_vec1::<f64>())
                .unwrap_or_default();
            for v in vals {
                h = (h ^ fnv1a(&v.to_le_bytes())).wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

//! Adapter contract over diffusion-style editors.
//!
//! Every backend receives the *editable* region (the complement of the
//! protected mask) and may only write there: [`edit`] and
//! [`edit_with_gradient`] composite the protected pixels back from the
//! input, so `output * M == input * M` holds bit-for-bit for any backend.

mod registry;
mod surrogate;

use candle_core::{Device, Tensor, Var};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{nchw_to_array, PromptText, RasterImage, RegionMask};
use crate::error::{Error, Result};

pub use registry::{BackendFactory, BackendRegistry};
pub use surrogate::{ConvSurrogate, ConvSurrogateParams, MeanFill};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_masked_inpainting: bool,
    pub supports_instruction_edit: bool,
    pub differentiable: bool,
    /// Exposes a latent encoder (needed by the encoder PGD attack).
    pub has_latent_encoder: bool,
}

/// Sampler controls shared by every backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            steps: 4,
            guidance: 7.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: RasterImage,
    /// Where the editor may write (`~M`).
    pub edit_region: RegionMask,
    pub prompt: PromptText,
    pub params: EditParams,
}

impl EditRequest {
    pub fn new(image: RasterImage, edit_region: RegionMask, prompt: PromptText, params: EditParams) -> Result<Self> {
        let r = Self {
            image,
            edit_region,
            prompt,
            params,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.edit_region.ensure_matches(&self.image)?;
        if self.params.steps == 0 {
            return Err(Error::InvalidArgument("edit steps must be at least 1".into()));
        }
        if !(self.params.guidance >= 0.0) {
            return Err(Error::InvalidArgument("guidance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub image: RasterImage,
    pub backend_id: String,
    /// Whether the output was produced on a graph that reaches the input.
    pub differentiable: bool,
}

pub trait EditBackend: Send {
    fn id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// `None` for resolution-agnostic backends.
    fn native_resolution(&self) -> Option<(usize, usize)>;

    /// Raw editor output for an NCHW image and editable-region mask of the
    /// same shape. Callers composite the result; implementations do not
    /// need to preserve the protected region themselves.
    fn raw_edit(&self, image: &Tensor, edit_region: &Tensor, prompt: &PromptText, params: &EditParams) -> Result<Tensor>;

    /// Latent code of an image, when the backend has an encoder.
    fn encode_latent(&self, _image: &Tensor) -> Result<Tensor> {
        Err(Error::Capability {
            backend: self.id().to_string(),
            what: "latent encoding".into(),
        })
    }

    /// Digest of the frozen editor parameters.
    fn parameter_checksum(&self) -> u64;
}

fn check_mode(backend: &dyn EditBackend, region: &Tensor) -> Result<()> {
    let caps = backend.capabilities();
    if !caps.supports_masked_inpainting {
        let min = region.min_all()?.to_scalar::<f64>()?;
        if min < 1.0 {
            return Err(Error::Capability {
                backend: backend.id().to_string(),
                what: "masked inpainting".into(),
            });
        }
    }
    Ok(())
}

/// Differentiable edit on tensors: editor output inside `edit_region`,
/// input pixels elsewhere, clamped to `[0, 1]`.
pub fn edit_tensor(
    backend: &dyn EditBackend,
    image: &Tensor,
    edit_region: &Tensor,
    prompt: &PromptText,
    params: &EditParams,
) -> Result<Tensor> {
    if image.dims() != edit_region.dims() {
        return Err(Error::shape(format!(
            "edit region {:?} does not match image {:?}",
            edit_region.dims(),
            image.dims()
        )));
    }
    check_mode(backend, edit_region)?;
    let raw = backend.raw_edit(image, edit_region, prompt, params)?;
    if raw.dims() != image.dims() {
        return Err(Error::BackendFailure {
            backend: backend.id().to_string(),
            reason: format!("returned shape {:?} for input {:?}", raw.dims(), image.dims()),
        });
    }
    let raw = raw.clamp(0f64, 1f64)?;
    let keep = edit_region.affine(-1.0, 1.0)?;
    Ok((raw.mul(edit_region)? + image.mul(&keep)?)?)
}

pub fn edit(backend: &dyn EditBackend, request: &EditRequest) -> Result<EditResult> {
    request.validate()?;
    if request.edit_region.sum() == 0.0 {
        return Ok(EditResult {
            image: request.image.clone(),
            backend_id: backend.id().to_string(),
            differentiable: false,
        });
    }
    let dev = Device::Cpu;
    let x = request.image.to_tensor(&dev)?;
    let r = request.edit_region.to_tensor(&dev)?;
    let out = edit_tensor(backend, &x, &r, &request.prompt, &request.params)?.detach();
    Ok(EditResult {
        image: RasterImage::from_tensor(&out)?,
        backend_id: backend.id().to_string(),
        differentiable: false,
    })
}

/// An edit whose output keeps its graph back to the input pixels.
pub struct GradientEdit {
    pub result: EditResult,
    input: Var,
    output: Tensor,
}

impl GradientEdit {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Gradient of a scalar functional of the output with respect to the
    /// input pixels, in `(H, W, C)` layout.
    pub fn input_gradient(&self, functional: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<Array3<f64>> {
        let scalar = functional(&self.output)?;
        let grads = scalar.backward()?;
        match grads.get(&self.input) {
            Some(g) => nchw_to_array(g),
            None => Ok(Array3::zeros(self.result.image.shape())),
        }
    }
}

pub fn edit_with_gradient(backend: &dyn EditBackend, request: &EditRequest) -> Result<GradientEdit> {
    request.validate()?;
    if !backend.capabilities().differentiable {
        return Err(Error::Capability {
            backend: backend.id().to_string(),
            what: "gradient propagation".into(),
        });
    }
    let dev = Device::Cpu;
    let input = Var::from_tensor(&request.image.to_tensor(&dev)?)?;
    let r = request.edit_region.to_tensor(&dev)?;
    let output = edit_tensor(backend, input.as_tensor(), &r, &request.prompt, &request.params)?;
    Ok(GradientEdit {
        result: EditResult {
            image: RasterImage::from_tensor(&output)?,
            backend_id: backend.id().to_string(),
            differentiable: true,
        },
        input,
        output,
    })
}

/// Settings handed to backend factories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditorConfig {
    pub id: String,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Directory with pretrained weights; falls back to the
    /// `IMMUNITY_WEIGHTS_DIR` environment variable.
    pub weights_dir: Option<std::path::PathBuf>,
    /// Pre-activation gain of the `surrogate-conv` editor.
    pub surrogate_gain: f64,
    /// Operating point of the `surrogate-conv` sigmoid.
    pub surrogate_center: f64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            id: "surrogate-mean".into(),
            steps: 4,
            guidance: 7.5,
            seed: 0,
            weights_dir: None,
            surrogate_gain: 40.0,
            surrogate_center: 0.5,
        }
    }
}

impl EditorConfig {
    pub fn params(&self) -> EditParams {
        EditParams {
            steps: self.steps,
            guidance: self.guidance,
            seed: self.seed,
        }
    }

    pub fn weights_dir(&self) -> Option<std::path::PathBuf> {
        self.weights_dir
            .clone()
            .or_else(|| std::env::var_os("IMMUNITY_WEIGHTS_DIR").map(Into::into))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(image: RasterImage, region: RegionMask, seed: u64) -> EditRequest {
        EditRequest::new(
            image,
            region,
            PromptText::new("ignored").unwrap(),
            EditParams {
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        let b = MeanFill;
        let img = RasterImage::filled(8, 8, 0.5).unwrap();
        let req = request(img, RegionMask::full(8, 8, true), 3);
        assert_eq!(edit(&b, &req).unwrap(), edit(&b, &req).unwrap());
        let conv = ConvSurrogate::new(ConvSurrogateParams::default());
        assert_eq!(edit(&conv, &req).unwrap(), edit(&conv, &req).unwrap());
    }

    #[test]
    fn empty_region_is_noop() {
        let img = crate::data::synthetic::scene(1, 16, 16).unwrap().0;
        let req = request(img.clone(), RegionMask::full(16, 16, false), 0);
        assert_eq!(edit(&MeanFill, &req).unwrap().image, img);
    }

    #[test]
    fn mean_fill_closed_form() {
        // Left half protected at 0.2, right half editable at 0.9.
        let img = RasterImage::from_fn(8, 8, |(_, x, _)| if x < 4 { 0.2 } else { 0.9 }).unwrap();
        let region = RegionMask::from_fn(8, 8, |_, x| x >= 4);
        let out = edit(&MeanFill, &request(img.clone(), region, 0)).unwrap().image;
        for ((y, x, c), v) in out.pixels().indexed_iter() {
            if x < 4 {
                assert_eq!(*v, img.pixels()[[y, x, c]]);
            } else {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn protected_region_passthrough() {
        let (img, mask) = crate::data::synthetic::scene(4, 24, 24).unwrap();
        let region = mask.complement();
        let conv = ConvSurrogate::new(ConvSurrogateParams::default());
        let backends: [&dyn EditBackend; 2] = [&MeanFill, &conv];
        for b in backends {
            let out = edit(b, &request(img.clone(), region.clone(), 0)).unwrap().image;
            for ((y, x, c), v) in out.pixels().indexed_iter() {
                if mask.is_on(y, x) {
                    assert_eq!(*v, img.pixels()[[y, x, c]], "{}", b.id());
                }
            }
        }
    }

    #[test]
    fn gradient_needs_differentiable_backend() {
        struct Frozen;
        impl EditBackend for Frozen {
            fn id(&self) -> &str {
                "frozen"
            }
            fn capabilities(&self) -> Capabilities {
                Capabilities {
                    supports_masked_inpainting: true,
                    supports_instruction_edit: false,
                    differentiable: false,
                    has_latent_encoder: false,
                }
            }
            fn native_resolution(&self) -> Option<(usize, usize)> {
                None
            }
            fn raw_edit(&self, image: &Tensor, _: &Tensor, _: &PromptText, _: &EditParams) -> Result<Tensor> {
                Ok(image.clone())
            }
            fn parameter_checksum(&self) -> u64 {
                0
            }
        }
        let img = RasterImage::filled(8, 8, 0.5).unwrap();
        let req = request(img, RegionMask::full(8, 8, true), 0);
        assert!(matches!(edit_with_gradient(&Frozen, &req), Err(Error::Capability { .. })));
        assert!(edit(&Frozen, &req).is_ok());
    }
}

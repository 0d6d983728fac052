//! Feed-forward noise generator and the masked apply-and-clamp step.

pub mod checkpoint;
mod unetpp;

use std::path::Path;
use std::time::Duration;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{nchw_to_array, RasterImage, RegionMask};
use crate::error::{Error, Result};
use crate::profile;
use checkpoint::{Container, TensorEntry};
use unetpp::UNetPlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImmunizerConfig {
    pub depth: usize,
    pub base_width: usize,
    /// Bound of the output activation; every noise element lies in
    /// `[-eps_max, eps_max]`.
    pub eps_max: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ImmunizerConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
            eps_max: 0.125,
            seed: 0,
        }
    }
}

impl ImmunizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.depth == 0 || self.depth > 8 {
            errs.push(format!("immunizer.depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_width == 0 {
            errs.push("immunizer.base_width must be positive".to_string());
        }
        if !(self.eps_max > 0.0 && self.eps_max <= 1.0) {
            errs.push(format!("immunizer.eps_max must be in (0, 1], got {}", self.eps_max));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Per-pixel perturbation shaped like the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmunizationNoise {
    values: Array3<f64>,
}

impl ImmunizationNoise {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("noise contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            values: Array3::zeros(shape),
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `clamp(I + noise * M, 0, 1)`; identical to the source wherever `M = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmunizedImage(RasterImage);

impl ImmunizedImage {
    /// Wraps an image produced by some other immunization route (baselines,
    /// counter-attacks).
    pub fn from_raster(image: RasterImage) -> Self {
        Self(image)
    }

    pub fn image(&self) -> &RasterImage {
        &self.0
    }

    pub fn into_image(self) -> RasterImage {
        self.0
    }
}

impl std::ops::Deref for ImmunizedImage {
    type Target = RasterImage;
    fn deref(&self) -> &RasterImage {
        &self.0
    }
}

pub fn apply_immunization(
    image: &RasterImage,
    noise: &ImmunizationNoise,
    mask: &RegionMask,
) -> Result<ImmunizedImage> {
    if noise.values.dim() != image.shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match image shape {:?}",
            noise.values.dim(),
            image.shape()
        )));
    }
    mask.ensure_matches(image)?;
    let mut out = image.pixels().clone();
    Zip::from(&mut out)
        .and(noise.values())
        .and(mask.values())
        .for_each(|o, &n, &m| {
            if m != 0.0 {
                *o = (*o + n * m).clamp(0.0, 1.0);
            }
        });
    Ok(ImmunizedImage(RasterImage::new(out)?))
}

/// Differentiable counterpart of [`apply_immunization`] on NCHW tensors.
pub fn apply_immunization_tensor(image: &Tensor, noise: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok((image + noise.mul(mask)?)?.clamp(0f64, 1f64)?)
}

/// Output of a profiled immunization call.
#[derive(Debug, Clone)]
pub struct ImmunizationRun {
    pub image: ImmunizedImage,
    pub duration: Duration,
    pub peak_mem_mib: Option<f64>,
}

/// Anything that turns `(image, mask)` into an immunized image: the trained
/// model, the optimization baselines, or an identity stand-in.
pub trait Immunize: Send + Sync {
    fn name(&self) -> &str;
    fn immunize(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizedImage>;
}

/// Leaves images untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityImmunizer;

impl Immunize for IdentityImmunizer {
    fn name(&self) -> &str {
        "identity"
    }

    fn immunize(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizedImage> {
        mask.ensure_matches(image)?;
        Ok(ImmunizedImage(image.clone()))
    }
}

/// Runs an immunizer while recording wall-clock time and peak memory.
pub fn profiled(im: &dyn Immunize, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizationRun> {
    let (res, duration, peak_mem_mib) = profile::measure(|| im.immunize(image, mask));
    Ok(ImmunizationRun {
        image: res?,
        duration,
        peak_mem_mib,
    })
}

/// The noise-generator network plus its configuration.
#[derive(Debug, Clone)]
pub struct ImmunizerModel {
    config: ImmunizerConfig,
    net: UNetPlusPlus,
    run_id: String,
    device: Device,
    dtype: DType,
}

impl ImmunizerModel {
    pub fn new(config: ImmunizerConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let net = UNetPlusPlus::new(config.depth, config.base_width, 3, 3, config.seed, &device)?;
        Ok(Self {
            config,
            net,
            run_id: "untrained".to_string(),
            device,
            dtype: DType::F64,
        })
    }

    pub fn config(&self) -> &ImmunizerConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn set_run_id(&mut self, id: impl Into<String>) {
        self.run_id = id.into();
    }

    /// Compute dtype for the forward pass. Parameters always stay `f64`;
    /// `F32` gives the reduced-precision path.
    pub fn set_compute_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
    }

    pub fn parameters(&self) -> Vec<Var> {
        self.net.params.iter().map(|p| p.var.clone()).collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.net.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Bounded noise for an NCHW batch, differentiable with respect to the
    /// parameters. Inputs of any spatial size are edge-padded to a multiple
    /// of `2^depth` and the output is cropped back.
    pub fn noise_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("immunizer expects 3 channels, got {c}")));
        }
        let unit = 1usize << self.net.depth();
        let (ph, pw) = (h.div_ceil(unit) * unit - h, w.div_ceil(unit) * unit - w);
        let mut xp = x.clone();
        if ph > 0 {
            xp = xp.pad_with_same(2, 0, ph)?;
        }
        if pw > 0 {
            xp = xp.pad_with_same(3, 0, pw)?;
        }
        let raw = self.net.forward(&xp, self.dtype)?.to_dtype(DType::F64)?;
        let raw = raw.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok((raw.tanh()? * self.config.eps_max)?)
    }

    pub fn generate_noise(&self, image: &RasterImage) -> Result<ImmunizationNoise> {
        let x = image.to_tensor(&self.device)?;
        let n = self.noise_tensor(&x)?.detach();
        ImmunizationNoise::new(nchw_to_array(&n)?)
    }

    /// Single forward pass: noise generation followed by masked apply and clamp.
    pub fn immunize_profiled(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizationRun> {
        profiled(self, image, mask)
    }

    /// Stable digest of every parameter value.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.net.params {
            for v in p.var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        Ok(h)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "immunizer",
            "depth": self.config.depth,
            "base_width": self.config.base_width,
            "eps_max": self.config.eps_max,
            "seed": self.config.seed,
            "run_id": self.run_id,
        })
    }

    pub(crate) fn to_entries(&self) -> Result<Vec<(TensorEntry, Vec<f64>)>> {
        self.net
            .params
            .iter()
            .map(|p| {
                Ok((
                    TensorEntry {
                        name: format!("model.{}", p.name),
                        shape: p.var.dims().to_vec(),
                    },
                    p.var.as_tensor().flatten_all()?.to_vec1::<f64>()?,
                ))
            })
            .collect()
    }

    pub(crate) fn to_container(&self) -> Result<Container> {
        Ok(Container {
            meta: self.meta(),
            tensors: self.to_entries()?,
        })
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Version(format!("checkpoint header lacks `{k}`")))
        };
        if field("kind")? != "immunizer" {
            return Err(Error::Version("checkpoint does not hold an immunizer".into()));
        }
        let parse = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Version(format!("checkpoint field `{k}` is not numeric")))
        };
        let config = ImmunizerConfig {
            depth: parse("depth")? as usize,
            base_width: parse("base_width")? as usize,
            eps_max: parse("eps_max")?,
            seed: parse("seed")? as u64,
        };
        config.validate().map_err(|e| Error::Version(e.to_string()))?;
        let mut model = Self::new(config)?;
        if let Some(id) = field("run_id")?.as_str() {
            model.run_id = id.to_string();
        }
        for p in &model.net.params {
            let key = format!("model.{}", p.name);
            let (entry, data) = c
                .get(&key)
                .ok_or_else(|| Error::Version(format!("checkpoint lacks tensor `{key}`")))?;
            if entry.shape != p.var.dims() {
                return Err(Error::Version(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    entry.shape,
                    p.var.dims()
                )));
            }
            p.var
                .set(&Tensor::from_vec(data.clone(), entry.shape.as_slice(), &model.device)?)?;
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Immunize for ImmunizerModel {
    fn name(&self) -> &str {
        "immunizer"
    }

    fn immunize(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizedImage> {
        mask.ensure_matches(image)?;
        let noise = self.generate_noise(image)?;
        apply_immunization(image, &noise, mask)
    }
}

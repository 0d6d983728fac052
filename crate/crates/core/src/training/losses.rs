//! Imperceptibility and edit-failure losses.
//!
//! Both are masked mean absolute values normalized by the number of mask
//! elements (channels included):
//!
//! * `noise = |(I_im - I) * M|_1 / sum(M)`
//! * `edit  = |I_edit * (1 - M)|_1 / sum(1 - M)`

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{RasterImage, RegionMask};
use crate::editors::EditResult;
use crate::error::{Error, Result};
use crate::immunizer::ImmunizedImage;

fn mask_sum(mask: &Tensor) -> Result<f64> {
    Ok(mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Differentiable noise loss on tensors of any (matching) shape.
pub fn noise_loss_tensor(immunized: &Tensor, original: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if immunized.dims() != original.dims() || mask.dims() != original.dims() {
        return Err(Error::shape("noise loss operands differ in shape"));
    }
    let area = mask_sum(mask)?;
    if area <= 0.0 {
        return Err(Error::DegenerateMask("protected region is empty"));
    }
    Ok((immunized.sub(original)?.mul(mask)?.abs()?.sum_all()? / area)?)
}

/// Differentiable edit loss; `mask` is the protected region `M`.
pub fn edit_loss_tensor(edited: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if edited.dims() != mask.dims() {
        return Err(Error::shape("edit loss operands differ in shape"));
    }
    let region = mask.affine(-1.0, 1.0)?;
    let area = mask_sum(&region)?;
    if area <= 0.0 {
        return Err(Error::DegenerateMask("editable region is empty"));
    }
    Ok((edited.mul(&region)?.abs()?.sum_all()? / area)?)
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

pub fn noise_loss(immunized: &ImmunizedImage, original: &RasterImage, mask: &RegionMask) -> Result<f64> {
    let dev = candle_core::Device::Cpu;
    scalar(noise_loss_tensor(
        &immunized.to_tensor(&dev)?,
        &original.to_tensor(&dev)?,
        &mask.to_tensor(&dev)?,
    )?)
}

pub fn edit_loss(edited: &EditResult, mask: &RegionMask) -> Result<f64> {
    let dev = candle_core::Device::Cpu;
    mask.ensure_matches(&edited.image)?;
    scalar(edit_loss_tensor(&edited.image.to_tensor(&dev)?, &mask.to_tensor(&dev)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the noise term.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 4.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        let w = Self { alpha };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!(
                "loss.alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn total_loss(l_noise: f64, l_edit: f64, w: LossWeights) -> f64 {
    w.alpha * l_noise + l_edit
}

/// Coefficients actually applied by the training loop. Unlike
/// [`LossWeights`], either term may be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub noise_weight: f64,
    pub edit_weight: f64,
}

impl From<LossWeights> for Objective {
    fn from(w: LossWeights) -> Self {
        Self {
            noise_weight: w.alpha,
            edit_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoNoiseLoss,
    NoEditLoss,
}

impl AblationMode {
    pub fn objective(self, w: LossWeights) -> Objective {
        match self {
            AblationMode::Full => w.into(),
            AblationMode::NoNoiseLoss => Objective {
                noise_weight: 0.0,
                edit_weight: 1.0,
            },
            AblationMode::NoEditLoss => Objective {
                noise_weight: w.alpha,
                edit_weight: 0.0,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoNoiseLoss => "no_noise_loss",
            AblationMode::NoEditLoss => "no_edit_loss",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn val(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn noise_loss_cases() {
        let orig = t(vec![0.3; 12], &[3, 2, 2]);
        assert_eq!(val(noise_loss_tensor(&orig, &orig, &t(vec![1.0; 12], &[3, 2, 2])).unwrap()), 0.0);

        let imm = t(vec![0.4; 12], &[3, 2, 2]);
        let l = val(noise_loss_tensor(&imm, &orig, &t(vec![1.0; 12], &[3, 2, 2])).unwrap());
        assert!((l - 0.1).abs() < 1e-12);

        // Half of the elements masked; outside the mask the diff is large.
        let mask: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let imm: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.5 } else { 0.9 }).collect();
        let l = val(noise_loss_tensor(&t(imm, &[3, 2, 2]), &orig, &t(mask, &[3, 2, 2])).unwrap());
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn edit_loss_cases() {
        let mask: Vec<f64> = (0..12).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let mask = t(mask, &[3, 2, 2]);
        let zeros_bg: Vec<f64> = (0..12).map(|i| if i < 4 { 0.7 } else { 0.0 }).collect();
        assert_eq!(val(edit_loss_tensor(&t(zeros_bg, &[3, 2, 2]), &mask).unwrap()), 0.0);
        let ones_bg: Vec<f64> = (0..12).map(|i| if i < 4 { 0.7 } else { 1.0 }).collect();
        assert_eq!(val(edit_loss_tensor(&t(ones_bg, &[3, 2, 2]), &mask).unwrap()), 1.0);
        // Eight editable elements: four at 0.4 and four at 0.
        let half: Vec<f64> = (0..12).map(|i| if (4..8).contains(&i) { 0.4 } else { 0.0 }).collect();
        let l = val(edit_loss_tensor(&t(half, &[3, 2, 2]), &mask).unwrap());
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks() {
        let x = t(vec![0.5; 12], &[3, 2, 2]);
        assert!(matches!(
            noise_loss_tensor(&x, &x, &t(vec![0.0; 12], &[3, 2, 2])),
            Err(Error::DegenerateMask(_))
        ));
        assert!(matches!(
            edit_loss_tensor(&x, &t(vec![1.0; 12], &[3, 2, 2])),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, w), 0.0);
        assert!((total_loss(0.1, 0.5, w) - 0.9).abs() < 1e-12);
        assert_eq!(total_loss(0.25, 0.0, w), 1.0);
        assert!(LossWeights::new(0.0).is_err());
        assert!(LossWeights::new(f64::NAN).is_err());
    }

    #[test]
    fn ablation_objectives() {
        let w = LossWeights::default();
        assert_eq!(AblationMode::NoNoiseLoss.objective(w).noise_weight, 0.0);
        assert_eq!(AblationMode::NoEditLoss.objective(w).edit_weight, 0.0);
        assert_eq!(AblationMode::Full.objective(w), Objective { noise_weight: 4.0, edit_weight: 1.0 });
    }
}

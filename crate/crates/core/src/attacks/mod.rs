//! Per-image optimization baselines (random noise, projected gradient
//! descent against the editor's encoder or the full edit) and
//! counter-attacks that try to strip a perturbation before editing.

mod counter;

use std::sync::Mutex;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{nchw_to_array, PromptText, RasterImage, RegionMask};
use crate::editors::{edit_tensor, EditBackend, EditParams};
use crate::error::{Error, Result};
use crate::immunizer::{apply_immunization_tensor, ImmunizedImage, Immunize};

pub use counter::{
    counter_attack, jpeg_round_trip, robustness_protocol, CounterAttackSpec, Denoiser, DenoiserRegistry,
    GaussianDenoiser, MedianDenoiser, RobustnessReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LInf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationBudget {
    pub kappa: f64,
    pub norm: Norm,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self {
            kappa: 16.0 / 255.0,
            norm: Norm::LInf,
        }
    }
}

impl PerturbationBudget {
    pub fn new(kappa: f64, norm: Norm) -> Result<Self> {
        let b = Self { kappa, norm };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa <= 1.0) {
            return Err(Error::config(format!("attack.kappa must be in [0, 1], got {}", self.kappa)));
        }
        Ok(())
    }

    /// Projects `delta` onto the budget ball in place.
    pub fn project(&self, delta: &mut [f64]) {
        match self.norm {
            Norm::LInf => {
                for d in delta.iter_mut() {
                    *d = d.clamp(-self.kappa, self.kappa);
                }
            }
            Norm::L2 => {
                let n = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                if n > self.kappa {
                    let s = self.kappa / n;
                    for d in delta.iter_mut() {
                        *d *= s;
                    }
                }
            }
        }
    }

    pub fn norm_of(&self, delta: &[f64]) -> f64 {
        match self.norm {
            Norm::LInf => delta.iter().fold(0.0, |m, d| m.max(d.abs())),
            Norm::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdTarget {
    EncoderLatent,
    FullEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub steps: usize,
    /// `None` means a tenth of the budget.
    pub step_size: Option<f64>,
    pub target: PgdTarget,
    /// Constant the attacked output is driven toward.
    pub target_value: f64,
    /// Prompt used by the full-edit attack.
    pub prompt: String,
    pub editor: EditParams,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: None,
            target: PgdTarget::EncoderLatent,
            target_value: 0.0,
            prompt: "a photo".into(),
            editor: EditParams::default(),
        }
    }
}

impl PgdConfig {
    pub fn step_size(&self, budget: &PerturbationBudget) -> f64 {
        self.step_size.unwrap_or(budget.kappa / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("attack.steps must be at least 1".to_string());
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("attack.step_size must be positive, got {s}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Projected gradient descent on a flat perturbation.
///
/// Each iteration steps against the gradient (its sign for `l_inf`), zeroes
/// entries where `mask` is 0, and projects onto the budget. `objective`
/// returns `J(delta)` and its gradient; `observer` sees every iterate.
pub fn pgd_optimize(
    mut delta: Vec<f64>,
    mask: &[f64],
    budget: &PerturbationBudget,
    steps: usize,
    step_size: f64,
    objective: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<Vec<f64>> {
    if mask.len() != delta.len() {
        return Err(Error::shape(format!("mask of {} for delta of {}", mask.len(), delta.len())));
    }
    for it in 0..steps {
        let (j, grad) = objective(&delta)?;
        if grad.len() != delta.len() {
            return Err(Error::shape("gradient length differs from delta"));
        }
        for ((d, g), m) in delta.iter_mut().zip(&grad).zip(mask) {
            let dir = match budget.norm {
                Norm::LInf => {
                    if *g > 0.0 {
                        1.0
                    } else if *g < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Norm::L2 => *g,
            };
            *d = (*d - step_size * dir) * m;
        }
        budget.project(&mut delta);
        observer(it, &delta, j);
    }
    Ok(delta)
}

/// Uniform noise in `[-kappa, kappa]` inside the mask.
#[derive(Debug, Clone, Copy)]
pub struct RandomNoise {
    pub budget: PerturbationBudget,
    pub seed: u64,
}

impl RandomNoise {
    pub fn new(budget: PerturbationBudget, seed: u64) -> Self {
        Self { budget, seed }
    }
}

pub fn random_noise_immunize(
    image: &RasterImage,
    mask: &RegionMask,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<ImmunizedImage> {
    mask.ensure_matches(image)?;
    budget.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = budget.kappa;
    let mut px = image.pixels().clone();
    for (p, m) in px.iter_mut().zip(mask.values().iter()) {
        let n: f64 = if k > 0.0 { rng.gen_range(-k..=k) } else { 0.0 };
        if *m != 0.0 {
            *p = (*p + n).clamp(0.0, 1.0);
        }
    }
    Ok(ImmunizedImage::from_raster(RasterImage::new(px)?))
}

impl Immunize for RandomNoise {
    fn name(&self) -> &str {
        "random"
    }

    fn immunize(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizedImage> {
        random_noise_immunize(image, mask, &self.budget, self.seed)
    }
}

fn mean_sq_distance(t: &Tensor, target: f64, weight: Option<&Tensor>) -> Result<Tensor> {
    let d = t.affine(1.0, -target)?.sqr()?;
    Ok(match weight {
        Some(w) => {
            let area = w.sum_all()?.to_scalar::<f64>()?.max(1.0);
            (d.mul(w)?.sum_all()? / area)?
        }
        None => d.mean_all()?,
    })
}

/// Attack objective for one image: builds `x + delta * M`, clamps, runs the
/// attacked component and measures the squared distance to the target.
fn attack_objective(
    backend: &dyn EditBackend,
    x: &Tensor,
    m: &Tensor,
    prompt: &PromptText,
    cfg: &PgdConfig,
    delta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let var = Var::from_tensor(&Tensor::from_vec(delta.to_vec(), x.dims(), x.device())?)?;
    let adv = apply_immunization_tensor(x, var.as_tensor(), m)?;
    let j = match cfg.target {
        PgdTarget::EncoderLatent => mean_sq_distance(&backend.encode_latent(&adv)?, cfg.target_value, None)?,
        PgdTarget::FullEdit => {
            let region = m.affine(-1.0, 1.0)?;
            let edited = edit_tensor(backend, &adv, &region, prompt, &cfg.editor)?;
            mean_sq_distance(&edited, cfg.target_value, Some(&region))?
        }
    };
    let grads = j.backward()?;
    let g = match grads.get(&var) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; delta.len()],
    };
    Ok((j.to_scalar::<f64>()?, g))
}

pub fn check_pgd_capability(backend: &dyn EditBackend, target: PgdTarget) -> Result<()> {
    let caps = backend.capabilities();
    let (ok, what) = match target {
        PgdTarget::EncoderLatent => (caps.has_latent_encoder && caps.differentiable, "a differentiable latent encoder"),
        PgdTarget::FullEdit => (caps.differentiable, "a differentiable edit"),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Capability {
            backend: backend.id().to_string(),
            what: what.into(),
        })
    }
}

/// Runs PGD against `backend` and reports every iterate to `observer`.
pub fn pgd_immunize_observed(
    image: &RasterImage,
    mask: &RegionMask,
    backend: &dyn EditBackend,
    budget: &PerturbationBudget,
    cfg: &PgdConfig,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<ImmunizedImage> {
    mask.ensure_matches(image)?;
    budget.validate()?;
    cfg.validate()?;
    check_pgd_capability(backend, cfg.target)?;
    let prompt = PromptText::new(cfg.prompt.clone())?;
    let dev = Device::Cpu;
    let x = image.to_tensor(&dev)?;
    let m = mask.to_tensor(&dev)?;
    let m_flat = m.flatten_all()?.to_vec1::<f64>()?;
    let delta = pgd_optimize(
        vec![0.0; m_flat.len()],
        &m_flat,
        budget,
        cfg.steps,
        cfg.step_size(budget),
        &mut |d| attack_objective(backend, &x, &m, &prompt, cfg, d),
        observer,
    )?;
    let delta = Tensor::from_vec(delta, x.dims(), &dev)?;
    let out = apply_immunization_tensor(&x, &delta, &m)?;
    let px = nchw_to_array(&out)?;
    // Pixels outside the mask are copied so they match the input exactly.
    let mut px = px;
    for ((p, o), mv) in px.iter_mut().zip(image.pixels().iter()).zip(mask.values().iter()) {
        if *mv == 0.0 {
            *p = *o;
        }
    }
    Ok(ImmunizedImage::from_raster(RasterImage::new(px)?))
}

pub fn pgd_immunize(
    image: &RasterImage,
    mask: &RegionMask,
    backend: &dyn EditBackend,
    budget: &PerturbationBudget,
    cfg: &PgdConfig,
) -> Result<ImmunizedImage> {
    pgd_immunize_observed(image, mask, backend, budget, cfg, &mut |_, _, _| {})
}

/// PGD baseline behind the [`Immunize`] interface. The backend sits behind
/// a lock because editor adapters are not required to be `Sync`.
pub struct PgdImmunizer {
    backend: Mutex<Box<dyn EditBackend>>,
    pub budget: PerturbationBudget,
    pub cfg: PgdConfig,
    name: String,
}

impl PgdImmunizer {
    pub fn new(backend: Box<dyn EditBackend>, budget: PerturbationBudget, cfg: PgdConfig) -> Result<Self> {
        budget.validate()?;
        cfg.validate()?;
        check_pgd_capability(backend.as_ref(), cfg.target)?;
        let name = match cfg.target {
            PgdTarget::EncoderLatent => "pgd-encoder",
            PgdTarget::FullEdit => "pgd-full",
        }
        .to_string();
        Ok(Self {
            backend: Mutex::new(backend),
            budget,
            cfg,
            name,
        })
    }
}

impl Immunize for PgdImmunizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn immunize(&self, image: &RasterImage, mask: &RegionMask) -> Result<ImmunizedImage> {
        let backend = self.backend.lock().unwrap_or_else(|e| e.into_inner());
        pgd_immunize(image, mask, backend.as_ref(), &self.budget, &self.cfg)
    }
}

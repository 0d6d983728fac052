//! Experiment recipes that train several immunizers and compare them:
//! loss ablation, alpha sweep, and prompt-agnosticism.

use serde::{Deserialize, Serialize};

use crate::data::{PromptText, RasterImage, RegionMask, SampleTuple, SplitTag};
use crate::editors::{EditBackend, EditParams};
use crate::error::{Error, Result};
use crate::eval::{edit_background, fmt_opt, render_table, sample_params, ssim, MetricReport, TextScorer};
use crate::immunizer::{ImmunizerConfig, ImmunizerModel, Immunize};
use crate::training::{ablation_run, edit_loss_tensor, AblationMode, LossWeights, SampleSource, TrainConfig, Trainer};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// Trains and evaluates the full objective and both single-term variants.
#[allow(clippy::too_many_arguments)]
pub fn ablation_table(
    immunizer: ImmunizerConfig,
    train_set: &dyn SampleSource,
    eval_set: &dyn SampleSource,
    backend: &dyn EditBackend,
    cfg: &TrainConfig,
    weights: LossWeights,
    params: &EditParams,
    scorer: Option<&dyn TextScorer>,
) -> Vec<AblationRow> {
    [AblationMode::NoNoiseLoss, AblationMode::NoEditLoss, AblationMode::Full]
        .into_iter()
        .map(|mode| {
            match ablation_run(mode, immunizer, train_set, eval_set, backend, cfg, weights, params, scorer) {
                Ok(mut r) => {
                    r.report.method = mode.as_str().to_string();
                    AblationRow {
                        mode,
                        report: Some(r.report),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("ablation {} failed: {e}", mode.as_str());
                    AblationRow {
                        mode,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

/// SSIM of the edits and of the noise, seen and unseen.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let headers: Vec<String> = ["Method", "SSIM seen", "SSIM unseen", "SSIM (Noise) seen", "SSIM (Noise) unseen"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| match &r.report {
            Some(rep) => {
                let [s, u] = rep.summaries();
                vec![
                    r.mode.as_str().to_string(),
                    fmt_opt(s.ssim_edit, 3),
                    fmt_opt(u.ssim_edit, 3),
                    fmt_opt(s.ssim_noise, 3),
                    fmt_opt(u.ssim_noise, 3),
                ]
            }
            None => {
                let mut v = vec![r.mode.as_str().to_string()];
                v.extend(std::iter::repeat("failed".to_string()).take(4));
                v
            }
        })
        .collect();
    render_table(&headers, &body)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub ssim_edit: Option<f64>,
    pub psnr_edit: Option<f64>,
    pub ssim_noise: Option<f64>,
    pub error: Option<String>,
}

/// One full-objective run per alpha; failures are recorded per row.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    values: &[f64],
    immunizer: ImmunizerConfig,
    train_set: &dyn SampleSource,
    eval_set: &dyn SampleSource,
    backend: &dyn EditBackend,
    cfg: &TrainConfig,
    params: &EditParams,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one alpha value"));
    }
    Ok(values
        .iter()
        .map(|&alpha| {
            let res = LossWeights::new(alpha).and_then(|w| {
                ablation_run(AblationMode::Full, immunizer, train_set, eval_set, backend, cfg, w, params, None)
            });
            match res {
                Ok(r) => {
                    let all = r.report.overall();
                    SweepRow {
                        alpha,
                        ssim_edit: all.ssim_edit,
                        psnr_edit: all.psnr_edit,
                        ssim_noise: all.ssim_noise,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("alpha {alpha} failed: {e}");
                    SweepRow {
                        alpha,
                        ssim_edit: None,
                        psnr_edit: None,
                        ssim_noise: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let headers: Vec<String> = ["Method", "SSIM", "PSNR", "SSIM (Noise)"].iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("alpha = {}", r.alpha),
                fmt_opt(r.ssim_edit, 3),
                fmt_opt(r.psnr_edit, 2),
                fmt_opt(r.ssim_noise, 3),
            ]
        })
        .collect();
    render_table(&headers, &body)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt: String,
    pub split: SplitTag,
    pub edit_loss: f64,
    pub ssim_edit: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance (0 for a single value).
    pub variance: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let variance = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { count: n, mean, variance }
    }
}

/// Standard deviation pooled over two groups.
pub fn pooled_std(a: &Distribution, b: &Distribution) -> f64 {
    let dof = (a.count + b.count).saturating_sub(2);
    if dof == 0 {
        return 0.0;
    }
    let ss = (a.count.saturating_sub(1)) as f64 * a.variance + (b.count.saturating_sub(1)) as f64 * b.variance;
    (ss / dof as f64).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptAgnosticReport {
    pub rows: Vec<PromptRow>,
    pub seen_edit_loss: Distribution,
    pub unseen_edit_loss: Distribution,
    pub seen_ssim: Distribution,
    pub unseen_ssim: Distribution,
    pub pooled_std_edit_loss: f64,
    /// `|mean_seen - mean_unseen| < 2 * pooled std` on the edit loss.
    pub agnostic: bool,
}

fn prompts(list: &[String]) -> Result<Vec<PromptText>> {
    list.iter().map(|p| PromptText::new(p.clone())).collect()
}

/// Trains on one image paired with every seen prompt, then scores the
/// edit of the immunized image under each seen and unseen prompt.
#[allow(clippy::too_many_arguments)]
pub fn prompt_agnostic(
    image: &RasterImage,
    mask: &RegionMask,
    seen: &[String],
    unseen: &[String],
    immunizer: ImmunizerConfig,
    backend: &dyn EditBackend,
    cfg: &TrainConfig,
    weights: LossWeights,
    params: &EditParams,
) -> Result<PromptAgnosticReport> {
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::config("both prompt lists must be non-empty"));
    }
    let overlap: Vec<&String> = seen.iter().filter(|p| unseen.contains(p)).collect();
    if !overlap.is_empty() {
        return Err(Error::Config(
            overlap.iter().map(|p| format!("prompt `{p}` appears in both lists")).collect(),
        ));
    }
    let seen_p = prompts(seen)?;
    let unseen_p = prompts(unseen)?;
    let train_set: Vec<SampleTuple> = seen_p
        .iter()
        .enumerate()
        .map(|(i, p)| SampleTuple::new(format!("p{i:03}"), image.clone(), mask.clone(), p.clone(), SplitTag::Seen))
        .collect::<Result<_>>()?;
    weights.validate()?;
    let mut t = Trainer::new(ImmunizerModel::new(immunizer)?, backend, cfg.clone(), weights.into())?;
    t.run(&train_set)?;
    let model = t.into_model();
    let immunized = model.immunize(image, mask)?;
    let dev = candle_core::Device::Cpu;
    let m = mask.to_tensor(&dev)?;
    let mut rows = Vec::new();
    for (i, (p, split)) in seen_p
        .iter()
        .map(|p| (p, SplitTag::Seen))
        .chain(unseen_p.iter().map(|p| (p, SplitTag::Unseen)))
        .enumerate()
    {
        let ep = sample_params(params, i);
        let edited_orig = edit_background(backend, image, mask, p, &ep)?;
        let edited_imm = edit_background(backend, immunized.image(), mask, p, &ep)?;
        let l = edit_loss_tensor(&edited_imm.to_tensor(&dev)?, &m)?.to_scalar::<f64>()?;
        rows.push(PromptRow {
            prompt: p.as_str().to_string(),
            split,
            edit_loss: l,
            ssim_edit: ssim(&edited_orig, &edited_imm)?,
        });
    }
    let pick = |split: SplitTag, f: fn(&PromptRow) -> f64| {
        Distribution::of(&rows.iter().filter(|r| r.split == split).map(f).collect::<Vec<_>>())
    };
    let seen_edit_loss = pick(SplitTag::Seen, |r| r.edit_loss);
    let unseen_edit_loss = pick(SplitTag::Unseen, |r| r.edit_loss);
    let pooled = pooled_std(&seen_edit_loss, &unseen_edit_loss);
    let agnostic = (seen_edit_loss.mean - unseen_edit_loss.mean).abs() < 2.0 * pooled;
    Ok(PromptAgnosticReport {
        seen_ssim: pick(SplitTag::Seen, |r| r.ssim_edit),
        unseen_ssim: pick(SplitTag::Unseen, |r| r.ssim_edit),
        rows,
        seen_edit_loss,
        unseen_edit_loss,
        pooled_std_edit_loss: pooled,
        agnostic,
    })
}

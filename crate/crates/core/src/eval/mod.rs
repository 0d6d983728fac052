//! Image-quality metrics and the evaluation harness that scores how badly
//! edits of immunized images fail.

mod clip;
mod fsim;
mod psnr;
mod report;
mod ssim;

use serde::{Deserialize, Serialize};

use crate::data::{PromptText, RasterImage, RegionMask, SampleTuple};
use crate::editors::{edit, EditBackend, EditParams, EditRequest};
use crate::error::{Error, Result};
use crate::immunizer::{profiled, ImmunizedImage, Immunize};
use crate::training::SampleSource;

pub use clip::{clip_t, cosine, load_scorer, ScorerInfo, TextScorer};
pub use fsim::{fsim, phase_congruency};
pub use psnr::psnr;
pub use report::{
    mean_present, psnr_mean, render_comparison, render_table, MetricReport, MetricRow, ReportLine,
    SampleFailure, SplitSummary,
};
pub(crate) use report::fmt_opt;
pub use ssim::{ssim, ssim_plane};

/// Editor parameters for sample `index`: the seed is offset by the index
/// and shared by the edit of the original and of the immunized image.
pub fn sample_params(params: &EditParams, index: usize) -> EditParams {
    EditParams {
        seed: params.seed.wrapping_add(index as u64),
        ..*params
    }
}

/// Edits the region outside the protected mask.
pub fn edit_background(
    backend: &dyn EditBackend,
    image: &RasterImage,
    mask: &RegionMask,
    prompt: &PromptText,
    params: &EditParams,
) -> Result<RasterImage> {
    let req = EditRequest::new(image.clone(), mask.complement(), prompt.clone(), *params)?;
    Ok(edit(backend, &req)?.image)
}

/// Scores one sample. `attack` is applied to the immunized image before it
/// is edited; the imperceptibility score compares the original with what
/// the editor actually receives.
pub fn evaluate_sample(
    sample: &SampleTuple,
    immunizer: &dyn Immunize,
    backend: &dyn EditBackend,
    params: &EditParams,
    scorer: Option<&dyn TextScorer>,
    attack: &dyn Fn(&ImmunizedImage) -> Result<RasterImage>,
) -> Result<MetricRow> {
    let run = profiled(immunizer, &sample.image, &sample.mask)?;
    let received = attack(&run.image)?;
    let edited_orig = edit_background(backend, &sample.image, &sample.mask, &sample.prompt, params)?;
    let edited_imm = edit_background(backend, &received, &sample.mask, &sample.prompt, params)?;
    let clip = match scorer {
        Some(s) => match clip_t(&edited_imm, &sample.prompt, s) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("CLIP-T unavailable for {}: {e}", sample.id);
                None
            }
        },
        None => None,
    };
    Ok(MetricRow {
        sample_id: sample.id.clone(),
        split: sample.split,
        ssim_edit: Some(ssim(&edited_orig, &edited_imm)?),
        psnr_edit: Some(psnr(&edited_orig, &edited_imm)?),
        fsim_edit: Some(fsim(&edited_orig, &edited_imm)?),
        ssim_noise: Some(ssim(&sample.image, &received)?),
        clip_t: clip,
        runtime_ms: Some(run.duration.as_secs_f64() * 1000.0),
        peak_mem_mib: run.peak_mem_mib,
    })
}

/// Like [`evaluate_method`] with a transformation between immunization and
/// editing. Failed samples are recorded and skipped.
pub fn evaluate_with_attack(
    immunizer: &dyn Immunize,
    source: &dyn SampleSource,
    backend: &dyn EditBackend,
    params: &EditParams,
    scorer: Option<&dyn TextScorer>,
    attack: &dyn Fn(&ImmunizedImage) -> Result<RasterImage>,
) -> Result<MetricReport> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = MetricReport::new(immunizer.name(), backend.id());
    for i in 0..source.len() {
        let sample = match source.get(i) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("sample #{i} could not be loaded: {e}");
                report.failures.push(SampleFailure {
                    sample_id: format!("#{i}"),
                    error: e.to_string(),
                });
                continue;
            }
        };
        match evaluate_sample(&sample, immunizer, backend, &sample_params(params, i), scorer, attack) {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                log::warn!("sample {} failed: {e}", sample.id);
                report.failures.push(SampleFailure {
                    sample_id: sample.id,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}

/// Edits each sample twice (original and immunized, same editor seed) and
/// compares the results; also scores imperceptibility, prompt alignment
/// and immunization cost.
pub fn evaluate_method(
    immunizer: &dyn Immunize,
    source: &dyn SampleSource,
    backend: &dyn EditBackend,
    params: &EditParams,
    scorer: Option<&dyn TextScorer>,
) -> Result<MetricReport> {
    evaluate_with_attack(immunizer, source, backend, params, scorer, &|im| Ok(im.image().clone()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSummary {
    pub frames: usize,
    pub prompts: usize,
    /// Mean over finite per-(frame, prompt) PSNR values; `+inf` when every
    /// pair is identical.
    #[serde(skip)]
    pub mean_psnr: Option<f64>,
    pub psnr_inf_count: usize,
    pub total_runtime_s: f64,
}

impl VideoSummary {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain struct");
        v["mean_psnr"] = match self.mean_psnr {
            Some(x) if x.is_infinite() => serde_json::json!("inf"),
            Some(x) => serde_json::json!(x),
            None => serde_json::Value::Null,
        };
        v
    }
}

pub struct VideoOutcome {
    pub summary: VideoSummary,
    pub immunized: Vec<ImmunizedImage>,
}

pub fn check_frames(frames: &[RasterImage], masks: &[RegionMask]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::FrameMismatch("no frames".into()));
    }
    if frames.len() != masks.len() {
        return Err(Error::FrameMismatch(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    for (i, (f, m)) in frames.iter().zip(masks).enumerate() {
        if m.shape() != f.shape() {
            return Err(Error::FrameMismatch(format!(
                "frame {i} is {:?} but its mask is {:?}",
                f.shape(),
                m.shape()
            )));
        }
    }
    Ok(())
}

/// Per-frame immunization (one forward pass each) followed, when prompts
/// are given, by per-frame edits of the original and immunized frames with
/// the same editor seed.
pub fn video_evaluate(
    frames: &[RasterImage],
    masks: &[RegionMask],
    prompts: &[PromptText],
    immunizer: &dyn Immunize,
    backend: &dyn EditBackend,
    params: &EditParams,
) -> Result<VideoOutcome> {
    check_frames(frames, masks)?;
    let mut immunized = Vec::with_capacity(frames.len());
    let mut total = 0.0;
    let mut scores = Vec::new();
    for (frame, mask) in frames.iter().zip(masks) {
        let run = profiled(immunizer, frame, mask)?;
        total += run.duration.as_secs_f64();
        for prompt in prompts {
            let a = edit_background(backend, frame, mask, prompt, params)?;
            let b = edit_background(backend, &run.image, mask, prompt, params)?;
            scores.push(Some(psnr(&a, &b)?));
        }
        immunized.push(run.image);
    }
    let (mean_psnr, psnr_inf_count) = psnr_mean(scores);
    Ok(VideoOutcome {
        summary: VideoSummary {
            frames: immunized.len(),
            prompts: prompts.len(),
            mean_psnr,
            psnr_inf_count,
            total_runtime_s: total,
        },
        immunized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SplitTag};
    use crate::editors::MeanFill;
    use crate::immunizer::IdentityImmunizer;

    #[test]
    fn identity_immunizer_scores_perfectly() {
        let samples: Vec<SampleTuple> = (0..3)
            .map(|i| synthetic::sample(i, 16, "a beach", if i < 2 { SplitTag::Seen } else { SplitTag::Unseen }).unwrap())
            .collect();
        let r = evaluate_method(&IdentityImmunizer, &samples, &MeanFill, &EditParams::default(), None).unwrap();
        assert_eq!(r.rows.len(), 3);
        for row in &r.rows {
            assert_eq!(row.ssim_edit, Some(1.0));
            assert_eq!(row.ssim_noise, Some(1.0));
            assert_eq!(row.psnr_edit, Some(f64::INFINITY));
            assert_eq!(row.clip_t, None);
        }
        assert_eq!(r.summary(SplitTag::Seen).rows, 2);
    }

    #[test]
    fn video_counts_and_sentinel() {
        let (frames, masks): (Vec<_>, Vec<_>) = (0..4).map(|i| synthetic::scene(i, 16, 16).unwrap()).unzip();
        let prompts = vec![PromptText::new("a street").unwrap()];
        let out = video_evaluate(&frames, &masks, &prompts, &IdentityImmunizer, &MeanFill, &EditParams::default()).unwrap();
        assert_eq!(out.summary.frames, 4);
        assert_eq!(out.summary.mean_psnr, Some(f64::INFINITY));
        assert!(matches!(
            video_evaluate(&frames, &masks[..3], &prompts, &IdentityImmunizer, &MeanFill, &EditParams::default()),
            Err(Error::FrameMismatch(_))
        ));
    }
}

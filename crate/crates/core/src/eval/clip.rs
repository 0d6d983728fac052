//! Text-image alignment score: 100 x cosine similarity between the
//! embeddings of a contrastive text-image model.

use serde::{Deserialize, Serialize};

use crate::data::{PromptText, RasterImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub model_id: String,
    pub embedding_dim: usize,
}

pub trait TextScorer: Send + Sync {
    fn model_id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn embed_image(&self, image: &RasterImage) -> Result<Vec<f64>>;
    fn embed_text(&self, prompt: &PromptText) -> Result<Vec<f64>>;

    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            model_id: self.model_id().to_string(),
            embedding_dim: self.embedding_dim(),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn clip_t(image: &RasterImage, prompt: &PromptText, scorer: &dyn TextScorer) -> Result<f64> {
    let i = scorer.embed_image(image)?;
    let t = scorer.embed_text(prompt)?;
    if i.len() != scorer.embedding_dim() || t.len() != scorer.embedding_dim() {
        return Err(Error::ScorerUnavailable(format!(
            "{} returned embeddings of length {} / {}, expected {}",
            scorer.model_id(),
            i.len(),
            t.len(),
            scorer.embedding_dim()
        )));
    }
    Ok(100.0 * cosine(&i, &t)?)
}

/// No contrastive scorer ships with the crate; callers with one implement
/// [`TextScorer`] and pass it in. This reports the absence so that reports
/// mark CLIP-T as missing.
pub fn load_scorer(weights_dir: Option<&std::path::Path>) -> Result<Box<dyn TextScorer>> {
    Err(Error::ScorerUnavailable(match weights_dir {
        Some(d) => format!("no built-in scorer for weights in {}", d.display()),
        None => "no scorer configured".into(),
    }))
}

//! JPEG re-encoding, denoiser passes, and the sweep that scores
//! immunization after each of them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{RasterImage, SplitTag};
use crate::editors::{EditBackend, EditParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with_attack, fmt_opt, render_table, MetricReport, TextScorer};
use crate::immunizer::{ImmunizedImage, Immunize};
use crate::training::SampleSource;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterAttackSpec {
    Jpeg { quality: u8 },
    Denoise { denoiser_id: String },
}

impl CounterAttackSpec {
    pub fn jpeg(quality: u8) -> Result<Self> {
        let s = CounterAttackSpec::Jpeg { quality };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CounterAttackSpec::Jpeg { quality } if !(1..=100).contains(quality) => Err(Error::config(format!(
                "jpeg quality must be in 1..=100, got {quality}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CounterAttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CounterAttackSpec::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            CounterAttackSpec::Denoise { denoiser_id } => write!(f, "denoise:{denoiser_id}"),
        }
    }
}

/// Parses `jpeg`, `jpeg:<quality>` or `denoise:<id>`.
impl FromStr for CounterAttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let spec = match (kind, arg) {
            ("jpeg", None) => CounterAttackSpec::Jpeg { quality: 75 },
            ("jpeg", Some(q)) => CounterAttackSpec::Jpeg {
                quality: q
                    .parse()
                    .map_err(|_| Error::config(format!("bad jpeg quality `{q}`")))?,
            },
            ("denoise", Some(id)) if !id.is_empty() => CounterAttackSpec::Denoise {
                denoiser_id: id.to_string(),
            },
            _ => {
                return Err(Error::config(format!(
                    "bad counter-attack `{s}`; expected jpeg[:<quality>] or denoise:<id>"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Encodes as JPEG at `quality` and decodes again.
pub fn jpeg_round_trip(image: &RasterImage, quality: u8) -> Result<RasterImage> {
    CounterAttackSpec::jpeg(quality)?;
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::InvalidArgument(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(&buf), ImageFormat::Jpeg)
        .map_err(|e| Error::InvalidArgument(format!("jpeg decode: {e}")))?
        .to_rgb8();
    RasterImage::from_rgb8(&decoded)
}

pub trait Denoiser: Send + Sync {
    fn id(&self) -> &str;
    fn denoise(&self, image: &RasterImage) -> Result<RasterImage>;
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur with edge replication.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDenoiser {
    pub sigma: f64,
}

impl Default for GaussianDenoiser {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl Denoiser for GaussianDenoiser {
    fn id(&self) -> &str {
        "gaussian"
    }

    fn denoise(&self, image: &RasterImage) -> Result<RasterImage> {
        let r = (3.0 * self.sigma).ceil().max(1.0) as i64;
        let k: Vec<f64> = (-r..=r)
            .map(|x| (-(x * x) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();
        let src = image.pixels();
        let (h, w, c) = image.shape();
        let rows = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            k.iter()
                .enumerate()
                .map(|(j, kv)| kv * src[[clamp_index(y as i64 + j as i64 - r, h), x, ch]])
                .sum::<f64>()
        });
        let out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            k.iter()
                .enumerate()
                .map(|(j, kv)| kv * rows[[y, clamp_index(x as i64 + j as i64 - r, w), ch]])
                .sum::<f64>()
        });
        RasterImage::from_clamped(out)
    }
}

/// Per-channel 3x3 median with edge replication.
#[derive(Debug, Clone, Copy, Default)]
pub struct MedianDenoiser;

impl Denoiser for MedianDenoiser {
    fn id(&self) -> &str {
        "median"
    }

    fn denoise(&self, image: &RasterImage) -> Result<RasterImage> {
        let src = image.pixels();
        let (h, w, c) = image.shape();
        let out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            let mut v = [0.0; 9];
            let mut i = 0;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    v[i] = src[[clamp_index(y as i64 + dy, h), clamp_index(x as i64 + dx, w), ch]];
                    i += 1;
                }
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[4]
        });
        RasterImage::new(out)
    }
}

pub struct DenoiserRegistry {
    denoisers: BTreeMap<String, Box<dyn Denoiser>>,
}

impl Default for DenoiserRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl DenoiserRegistry {
    pub fn empty() -> Self {
        Self {
            denoisers: BTreeMap::new(),
        }
    }

    /// `gaussian` and `median`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(GaussianDenoiser::default())).expect("fresh registry");
        r.register(Box::new(MedianDenoiser)).expect("fresh registry");
        r
    }

    pub fn register(&mut self, d: Box<dyn Denoiser>) -> Result<()> {
        let id = d.id().to_string();
        if self.denoisers.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.denoisers.insert(id, d);
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.denoisers.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn Denoiser> {
        self.denoisers
            .get(id)
            .map(|d| d.as_ref())
            .ok_or_else(|| Error::UnknownDenoiser(id.to_string()))
    }
}

pub fn counter_attack(image: &ImmunizedImage, spec: &CounterAttackSpec, denoisers: &DenoiserRegistry) -> Result<RasterImage> {
    spec.validate()?;
    let out = match spec {
        CounterAttackSpec::Jpeg { quality } => jpeg_round_trip(image.image(), *quality)?,
        CounterAttackSpec::Denoise { denoiser_id } => denoisers.get(denoiser_id)?.denoise(image.image())?,
    };
    if out.shape() != image.shape() {
        return Err(Error::shape(format!(
            "counter-attack {spec} changed shape {:?} -> {:?}",
            image.shape(),
            out.shape()
        )));
    }
    Ok(out)
}

/// One report per arm: the unattacked arm first, then one per spec.
#[derive(Debug, Clone, Default)]
pub struct RobustnessReport {
    pub arms: Vec<(String, MetricReport)>,
}

impl RobustnessReport {
    pub fn arm(&self, name: &str) -> Option<&MetricReport> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    /// SSIM of the edits, SSIM of the noise and CLIP-T, each for seen and
    /// unseen samples.
    pub fn render(&self) -> String {
        let mut headers = vec!["Method".to_string()];
        for m in ["SSIM", "SSIM (Noise)", "CLIP-T"] {
            headers.push(format!("{m} seen"));
            headers.push(format!("{m} unseen"));
        }
        let rows: Vec<Vec<String>> = self
            .arms
            .iter()
            .map(|(name, r)| {
                let s = r.summary(SplitTag::Seen);
                let u = r.summary(SplitTag::Unseen);
                vec![
                    name.clone(),
                    fmt_opt(s.ssim_edit, 3),
                    fmt_opt(u.ssim_edit, 3),
                    fmt_opt(s.ssim_noise, 3),
                    fmt_opt(u.ssim_noise, 3),
                    fmt_opt(s.clip_t, 2),
                    fmt_opt(u.clip_t, 2),
                ]
            })
            .collect();
        render_table(&headers, &rows)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (name, r) in &self.arms {
            for line in r.lines() {
                let mut v = serde_json::to_value(&line)?;
                v["arm"] = serde_json::Value::String(name.clone());
                out.push_str(&serde_json::to_string(&v)?);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// Immunize, counter-attack, edit and score every sample for each spec.
/// Sample failures are recorded per arm without stopping the sweep.
pub fn robustness_protocol(
    immunizer: &dyn Immunize,
    source: &dyn SampleSource,
    backend: &dyn EditBackend,
    params: &EditParams,
    specs: &[CounterAttackSpec],
    denoisers: &DenoiserRegistry,
    scorer: Option<&dyn TextScorer>,
) -> Result<RobustnessReport> {
    for s in specs {
        s.validate()?;
    }
    let mut arms = Vec::with_capacity(specs.len() + 1);
    let base = evaluate_with_attack(immunizer, source, backend, params, scorer, &|im| Ok(im.image().clone()))?;
    arms.push((immunizer.name().to_string(), base));
    for spec in specs {
        let mut r = evaluate_with_attack(immunizer, source, backend, params, scorer, &|im| {
            counter_attack(im, spec, denoisers)
        })?;
        let name = format!("{} w/ {spec}", immunizer.name());
        r.method = name.clone();
        arms.push((name, r));
    }
    Ok(RobustnessReport { arms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> RasterImage {
        RasterImage::from_fn(32, 32, |(y, x, c)| (x as f64 + y as f64 + 4.0 * c as f64) / 80.0).unwrap()
    }

    fn mae(a: &RasterImage, b: &RasterImage) -> f64 {
        a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.pixels().len() as f64
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("jpeg".parse::<CounterAttackSpec>().unwrap(), CounterAttackSpec::Jpeg { quality: 75 });
        assert_eq!("jpeg:50".parse::<CounterAttackSpec>().unwrap().to_string(), "jpeg:50");
        assert_eq!("denoise:median".parse::<CounterAttackSpec>().unwrap().to_string(), "denoise:median");
        assert!("jpeg:0".parse::<CounterAttackSpec>().is_err());
        assert!("jpeg:101".parse::<CounterAttackSpec>().is_err());
        assert!("blur".parse::<CounterAttackSpec>().is_err());
    }

    #[test]
    fn jpeg_quality_ordering_and_determinism() {
        let img = ramp();
        let q100 = jpeg_round_trip(&img, 100).unwrap();
        let max_dev = img.pixels().iter().zip(q100.pixels()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_dev <= 0.05, "{max_dev}");
        assert!(mae(&img, &jpeg_round_trip(&img, 50).unwrap()) >= mae(&img, &jpeg_round_trip(&img, 95).unwrap()));
        assert_eq!(jpeg_round_trip(&img, 60).unwrap(), jpeg_round_trip(&img, 60).unwrap());
    }

    #[test]
    fn denoisers_keep_shape_and_range() {
        let img = ImmunizedImage::from_raster(ramp());
        let reg = DenoiserRegistry::with_defaults();
        for id in reg.ids() {
            let spec = CounterAttackSpec::Denoise { denoiser_id: id };
            let out = counter_attack(&img, &spec, &reg).unwrap();
            assert_eq!(out.shape(), img.shape());
        }
        let bad = CounterAttackSpec::Denoise {
            denoiser_id: "dncnn".into(),
        };
        assert!(matches!(counter_attack(&img, &bad, &reg), Err(Error::UnknownDenoiser(_))));
    }
}

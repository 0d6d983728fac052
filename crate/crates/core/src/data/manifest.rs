use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{load_image, load_mask, PromptText, RasterImage, RegionMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Seen,
    Unseen,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Seen => "seen",
            SplitTag::Unseen => "unseen",
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub prompt: String,
    pub split: SplitTag,
}

/// A loaded `(image, mask, prompt)` training/evaluation atom.
#[derive(Debug, Clone)]
pub struct SampleTuple {
    pub id: String,
    pub image: RasterImage,
    pub mask: RegionMask,
    pub prompt: PromptText,
    pub split: SplitTag,
}

impl SampleTuple {
    pub fn new(
        id: impl Into<String>,
        image: RasterImage,
        mask: RegionMask,
        prompt: PromptText,
        split: SplitTag,
    ) -> Result<Self> {
        mask.ensure_matches(&image)?;
        Ok(Self {
            id: id.into(),
            image,
            mask,
            prompt,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
    /// Directory that relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, seed: u64) -> Result<Self> {
        let m = Self {
            records,
            seed,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate record id `{}`", r.id)));
            }
            PromptText::new(r.prompt.clone())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ArtifactMissing(path.display().to_string()));
        }
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::config(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(rec);
        }
        let mut m = Self::new(records, 0)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads a record, resizing image (bicubic) and mask (nearest) to
    /// `resolution` when given.
    pub fn load_sample(&self, rec: &ManifestRecord, resolution: Option<(usize, usize)>) -> Result<SampleTuple> {
        let mut image = load_image(&self.resolve(&rec.image_path))?;
        if let Some((h, w)) = resolution {
            image = image.resized(h, w)?;
        }
        let mask = load_mask(&self.resolve(&rec.mask_path), image.shape(), false)?;
        SampleTuple::new(
            rec.id.clone(),
            image,
            mask,
            PromptText::new(rec.prompt.clone())?,
            rec.split,
        )
    }

    pub fn with_split(&self, tag: SplitTag) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.split == tag).cloned().collect(),
            seed: self.seed,
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Deterministic shuffled partition. The first part receives
/// `floor(ratio * N)` records tagged `seen`, the rest are tagged `unseen`.
pub fn split_manifest(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = manifest.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The epsilon absorbs representation error in products like 0.8 * 5.
    let cut = ((ratio * n as f64) + 1e-9).floor() as usize;
    let part = |idx: &[usize], tag: SplitTag| DatasetManifest {
        records: idx
            .iter()
            .map(|&i| ManifestRecord {
                split: tag,
                ..manifest.records[i].clone()
            })
            .collect(),
        seed,
        base_dir: manifest.base_dir.clone(),
    };
    Ok((part(&order[..cut], SplitTag::Seen), part(&order[cut..], SplitTag::Unseen)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| ManifestRecord {
                    id: format!("s{i:04}"),
                    image_path: format!("img/{i}.png").into(),
                    mask_path: format!("mask/{i}.png").into(),
                    prompt: "a beach at sunset".into(),
                    split: SplitTag::Seen,
                })
                .collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        for (n, want) in [(1000, 800), (5, 4), (10, 8)] {
            let (a, b) = split_manifest(&toy_manifest(n), 0.8, 7).unwrap();
            assert_eq!(a.len(), want);
            assert_eq!(b.len(), n - want);
            assert!(a.records.iter().all(|r| r.split == SplitTag::Seen));
            assert!(b.records.iter().all(|r| r.split == SplitTag::Unseen));
            let ids: HashSet<_> = a.records.iter().map(|r| &r.id).collect();
            assert!(b.records.iter().all(|r| !ids.contains(&r.id)));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let m = toy_manifest(10);
        assert_eq!(split_manifest(&m, 0.8, 3).unwrap(), split_manifest(&m, 0.8, 3).unwrap());
        assert_ne!(split_manifest(&m, 0.8, 3).unwrap().0, split_manifest(&m, 0.8, 4).unwrap().0);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_manifest(&DatasetManifest::default(), 0.8, 0),
            Err(Error::EmptyDataset)
        ));
        assert!(split_manifest(&toy_manifest(3), 1.0, 0).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = toy_manifest(2);
        m.records[1].id = m.records[0].id.clone();
        assert!(DatasetManifest::new(m.records, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = toy_manifest(4);
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"split\":\"seen\""));
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.base_dir, dir.path());
    }
}

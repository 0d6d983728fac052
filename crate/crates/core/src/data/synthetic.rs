//! Procedural scenes for desk-scale runs: a textured foreground blob (the
//! protected subject) over a smooth background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    save_image, DatasetManifest, ManifestRecord, PromptText, RasterImage, RegionMask, SampleTuple,
    SplitTag,
};
use crate::error::Result;

/// Scene parameters drawn from `seed`.
pub fn scene(seed: u64, height: usize, width: usize) -> Result<(RasterImage, RegionMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = rng.gen_range(0.4..0.6) * height as f64;
    let cx = rng.gen_range(0.4..0.6) * width as f64;
    let ry = rng.gen_range(0.25..0.35) * height as f64;
    let rx = rng.gen_range(0.18..0.28) * width as f64;
    let base: [f64; 3] = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    let bg: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let freq = rng.gen_range(0.2..0.6);
    let inside = |y: usize, x: usize| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    };
    let mask = RegionMask::from_fn(height, width, inside);
    let image = RasterImage::from_fn(height, width, |(y, x, c)| {
        let (yf, xf) = (y as f64, x as f64);
        if inside(y, x) {
            let tex = 0.08 * ((xf * freq).sin() * (yf * freq * 0.7 + c as f64).cos());
            (base[c] + tex).clamp(0.0, 1.0)
        } else {
            let ramp = 0.3 * (xf / width as f64 - 0.5) + 0.2 * (yf / height as f64 - 0.5);
            (bg[c] + ramp).clamp(0.0, 1.0)
        }
    })?;
    Ok((image, mask))
}

pub fn sample(seed: u64, size: usize, prompt: &str, split: SplitTag) -> Result<SampleTuple> {
    let (image, mask) = scene(seed, size, size)?;
    SampleTuple::new(format!("toy{seed:04}"), image, mask, PromptText::new(prompt)?, split)
}

pub const PROMPTS: [&str; 6] = [
    "a person standing on a beach at sunset",
    "a person in a snowy forest",
    "a person in front of a city skyline at night",
    "a person walking through a flower field",
    "a person inside a modern office",
    "a person on a mountain trail",
];

/// Writes `count` scenes plus masks under `dir` and returns the manifest
/// (all records tagged `seen`; split afterwards if needed).
pub fn write_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (image, mask) = scene(seed.wrapping_add(i as u64), size, size)?;
        let image_path = format!("images/{i:05}.png");
        let mask_path = format!("masks/{i:05}.png");
        save_image(&image, &dir.join(&image_path))?;
        mask.save(&dir.join(&mask_path))?;
        records.push(ManifestRecord {
            id: format!("toy{i:05}"),
            image_path: image_path.into(),
            mask_path: mask_path.into(),
            prompt: PROMPTS[i % PROMPTS.len()].to_string(),
            split: SplitTag::Seen,
        });
    }
    let mut m = DatasetManifest::new(records, seed)?;
    m.base_dir = dir.to_path_buf();
    m.save(&dir.join("manifest.jsonl"))?;
    Ok(m)
}

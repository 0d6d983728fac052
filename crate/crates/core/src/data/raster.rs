use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops, ColorType, DynamicImage, ImageBuffer, Rgb};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Smallest height/width any pipeline accepts.
pub const MIN_SIDE: usize = 8;
pub const CHANNELS: usize = 3;

/// An RGB image stored as `(height, width, channel)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pixels: Array3<f64>,
}

impl RasterImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::shape(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    /// Builds an image by clamping arbitrary finite values into `[0, 1]`.
    pub fn from_clamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, CHANNELS), value))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, CHANNELS), f))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    /// `(1, 3, H, W)` tensor in NCHW layout.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        array_to_nchw(&self.pixels, device)
    }

    /// Inverse of [`RasterImage::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_clamped(nchw_to_array(t)?)
    }

    /// Rescales to `(height, width)` with a bicubic (Catmull-Rom) filter.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let (h, w, _) = self.shape();
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    self.pixels[[y, x, 0]] as f32,
                    self.pixels[[y, x, 1]] as f32,
                    self.pixels[[y, x, 2]] as f32,
                ])
            });
        let out = imageops::resize(
            &buf,
            width as u32,
            height as u32,
            imageops::FilterType::CatmullRom,
        );
        Self::from_clamped(Array3::from_shape_fn((height, width, CHANNELS), |(y, x, c)| {
            out.get_pixel(x as u32, y as u32).0[c] as f64
        }))
    }

    /// 8-bit RGB quantization used for PNG/JPEG output.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.shape();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| quantize(self.pixels[[y, x, c]])))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(Array3::from_shape_fn(
            (h as usize, w as usize, CHANNELS),
            |(y, x, c)| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
        ))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn array_to_nchw(a: &Array3<f64>, device: &Device) -> Result<Tensor> {
    let (h, w, c) = a.dim();
    let chw = a.view().permuted_axes([2, 0, 1]);
    let data: Vec<f64> = chw.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), device)?)
}

pub(crate) fn nchw_to_array(t: &Tensor) -> Result<Array3<f64>> {
    let t = t.to_dtype(DType::F64)?;
    let t = match t.rank() {
        4 => {
            if t.dim(0)? != 1 {
                return Err(Error::shape("expected a batch of one"));
            }
            t.squeeze(0)?
        }
        3 => t,
        r => return Err(Error::shape(format!("expected rank 3 or 4 tensor, got {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    let chw = Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
}

/// Binary region mask replicated over the three color channels.
/// `1` marks the protected region, `0` the background.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    values: Array3<f64>,
}

impl RegionMask {
    pub fn from_plane(plane: &Array2<bool>) -> Self {
        let (h, w) = plane.dim();
        Self {
            values: Array3::from_shape_fn((h, w, CHANNELS), |(y, x, _)| {
                if plane[[y, x]] {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::from_plane(&Array2::from_shape_fn((height, width), |(y, x)| f(y, x)))
    }

    pub fn full(height: usize, width: usize, on: bool) -> Self {
        Self::from_fn(height, width, |_, _| on)
    }

    /// Validates a 3-channel array of exact zeros and ones with identical planes.
    pub fn from_values(values: Array3<f64>) -> Result<Self> {
        let (_, _, c) = values.dim();
        if c != CHANNELS {
            return Err(Error::shape(format!("mask must have 3 channels, got {c}")));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let first = values.index_axis(Axis(2), 0);
        for ch in 1..c {
            if values.index_axis(Axis(2), ch) != first {
                return Err(Error::InvalidArgument(
                    "mask channel planes differ".into(),
                ));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn plane(&self) -> Array2<bool> {
        self.values.index_axis(Axis(2), 0).mapv(|v| v == 1.0)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    /// Sum over every element, channels included.
    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.mapv(|v| 1.0 - v),
        }
    }

    pub fn is_on(&self, y: usize, x: usize) -> bool {
        self.values[[y, x, 0]] == 1.0
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        array_to_nchw(&self.values, device)
    }

    /// Nearest-neighbour resample of the binary plane.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let plane = self.plane();
        Self::from_plane(&resize_nearest(&plane, height, width))
    }

    pub fn ensure_matches(&self, image: &RasterImage) -> Result<()> {
        if self.shape() != image.shape() {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match image shape {:?}",
                self.shape(),
                image.shape()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.shape();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.is_on(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub(crate) fn resize_nearest<T: Clone>(plane: &Array2<T>, height: usize, width: usize) -> Array2<T> {
    let (sh, sw) = plane.dim();
    if (sh, sw) == (height, width) {
        return plane.clone();
    }
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * sh as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * sw as f64 / width as f64).floor() as usize;
        plane[[sy.min(sh - 1), sx.min(sw - 1)]].clone()
    })
}

/// A non-empty editing instruction or scene description.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("prompt is empty".into()));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for PromptText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::ArtifactMissing(path.display().to_string()));
    }
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Reads an 8-bit RGB PNG or JPEG and scales values into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    let img = decode(path)?;
    match img.color() {
        ColorType::Rgb8 => RasterImage::from_rgb8(img.as_rgb8().expect("rgb8")),
        ColorType::Rgb16 | ColorType::Rgb32F => Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "expected 8-bit samples".into(),
        }),
        other => Err(Error::shape(format!(
            "{} has {} channels, expected 3",
            path.display(),
            other.channel_count()
        ))),
    }
}

pub fn save_image(image: &RasterImage, path: &Path) -> Result<()> {
    image.to_rgb8().save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a single-channel mask, binarizes at 0.5, resizes with nearest
/// neighbour to `target` and replicates it over the channels. In strict mode
/// a resize that changes the aspect ratio is rejected.
pub fn load_mask(path: &Path, target: (usize, usize, usize), strict: bool) -> Result<RegionMask> {
    let img = decode(path)?;
    if img.color().channel_count() != 1 {
        return Err(Error::shape(format!(
            "mask {} has {} channels, expected 1",
            path.display(),
            img.color().channel_count()
        )));
    }
    let (th, tw, tc) = target;
    if tc != CHANNELS {
        return Err(Error::shape(format!("mask target needs 3 channels, got {tc}")));
    }
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    let (h, w) = (h as usize, w as usize);
    if strict && h * tw != w * th {
        return Err(Error::shape(format!(
            "mask {h}x{w} cannot be resized to {th}x{tw} without changing aspect ratio"
        )));
    }
    let plane = Array2::from_shape_fn((h, w), |(y, x)| {
        luma.get_pixel(x as u32, y as u32).0[0] as f64 >= 0.5
    });
    Ok(RegionMask::from_plane(&resize_nearest(&plane, th, tw)))
}

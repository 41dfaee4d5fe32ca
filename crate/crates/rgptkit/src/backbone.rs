//! Image preparation and the frozen visual backbone.
//!
//! Images are scaled so the longer side hits `input_size`, anchored at the
//! top-left corner of a square canvas, and the remainder is filled with a
//! constant. The backbone then cuts the square into non-overlapping patches,
//! flattens each, applies one fixed seeded linear projection, and normalizes
//! every cell to zero mean and unit variance. The projection is generated
//! once from the seed and never updated, so encoding is a pure function of
//! (pixels, config).

use std::io::Cursor;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::seed;

/// An RGB image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    /// (height, width, 3)
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::EmptyImage(format!("{h}x{w}")));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        Ok(Image {
            id: id.into(),
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Build from packed 8-bit RGB rows (len must be w*h*3).
    pub fn from_rgb8(id: impl Into<String>, h: usize, w: usize, data: &[u8]) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "rgb8 buffer has {} bytes, expected {}",
                data.len(),
                h * w * 3
            )));
        }
        let pixels =
            Array3::from_shape_fn((h, w, 3), |(i, j, k)| data[(i * w + j) * 3 + k] as f64 / 255.0);
        Image::new(id, pixels)
    }

    /// Crop a pixel rectangle, clamped to the image bounds. Coordinates are
    /// half-open: rows y0..y1, columns x0..x1.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Image> {
        let (h, w, _) = self.pixels.dim();
        let y1 = y1.min(h);
        let x1 = x1.min(w);
        if y0 >= y1 || x0 >= x1 {
            return Err(Error::EmptyImage(format!(
                "crop {y0}..{y1} x {x0}..{x1} of {h}x{w}"
            )));
        }
        let view = self
            .pixels
            .slice(ndarray::s![y0..y1, x0..x1, ..])
            .to_owned();
        Image::new(format!("{}#crop", self.id), view)
    }

    /// Encode as PNG bytes (8-bit RGB).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w, _) = self.pixels.dim();
        let mut raw = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for k in 0..3 {
                    let v = (self.pixels[[i, j, k]] * 255.0).round().clamp(0.0, 255.0);
                    raw.push(v as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer length matches dimensions");
        let mut out = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn from_png_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Data(format!("png decode: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_rgb8(id, h, w, img.as_raw())
    }
}

/// Resampling filter used when scaling images before padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    Bilinear,
    Nearest,
}

impl Resample {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(Resample::Bilinear),
            "nearest" => Some(Resample::Nearest),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resample::Bilinear => "bilinear",
            Resample::Nearest => "nearest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Stub,
    External,
}

impl BackboneKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stub" => Some(BackboneKind::Stub),
            "external" => Some(BackboneKind::External),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Stub => "stub",
            BackboneKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Side length of the prepared square image, in pixels.
    pub input_size: usize,
    /// Side length of one square patch; must divide `input_size`.
    pub patch_size: usize,
    /// Channels of the output feature grid.
    pub feature_dim: usize,
    /// Seed for the frozen projection (shared global seed).
    pub seed: u64,
    pub resample: Resample,
    /// Value written into padded pixels.
    pub fill: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Stub,
            input_size: 336,
            patch_size: 14,
            feature_dim: 64,
            seed: 0,
            resample: Resample::Bilinear,
            fill: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("input_size and patch_size must be >= 1".into()));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Cells per side of the backbone output grid.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }
}

/// A dense (h, w, d) feature grid plus the pixel stride of one cell
/// relative to the prepared image. The stride is fractional after
/// upsampling (a ×4 refinement of a stride-14 map has stride 3.5), but
/// `h * stride` always recovers the prepared side length.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Array3<f64>,
    pub stride: f64,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn dim(&self) -> usize {
        self.grid.dim().2
    }
}

/// Scale to fit the longer side, anchor top-left, pad with the fill value.
pub fn prepare_image(image: &Image, cfg: &BackboneConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w, _) = image.pixels.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyImage(format!("{h}x{w}")));
    }
    let side = cfg.input_size;
    let scale = side as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, side);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, side);
    let resized = match cfg.resample {
        Resample::Bilinear => nn::resize_bilinear(&image.pixels, nh, nw),
        Resample::Nearest => nn::resize_nearest(&image.pixels, nh, nw),
    };
    let mut canvas = Array3::from_elem((side, side, 3), cfg.fill);
    canvas
        .slice_mut(ndarray::s![..nh, ..nw, ..])
        .assign(&resized);
    Image::new(image.id.clone(), canvas)
}

/// Anything that maps a prepared image to a feature grid. The default
/// implementation is the seeded stub; adapters to heavyweight pretrained
/// encoders implement the same trait.
pub trait ImageEncoder: Send + Sync {
    fn encode_image(&self, image: &Image) -> Result<FeatureMap>;

    /// Checksum over the encoder's internal tensors. Used to verify the
    /// encoder stays bit-identical across training steps.
    fn frozen_checksum(&self) -> u64;
}

/// Deterministic patch-projection backbone. Construction draws one Gaussian
/// projection matrix from the seed; encoding never mutates state.
pub struct Backbone {
    cfg: BackboneConfig,
    /// (patch_size^2 * 3, feature_dim), fixed after construction.
    projection: Array2<f64>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == BackboneKind::External {
            return Err(Error::Config(
                "backbone.kind = external requires an adapter implementing ImageEncoder".into(),
            ));
        }
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let mut rng = seed::sub_rng(cfg.seed, &["backbone", "projection"]);
        let std = 1.0 / (patch_dim as f64).sqrt();
        let mut projection = Array2::zeros((patch_dim, cfg.feature_dim));
        nn::fill_normal(projection.as_slice_mut().unwrap(), std, &mut rng);
        Ok(Backbone { cfg, projection })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Prepare then encode in one call.
    pub fn prepare_and_encode(&self, image: &Image) -> Result<FeatureMap> {
        let prepared = prepare_image(image, &self.cfg)?;
        self.encode_image(&prepared)
    }
}

impl ImageEncoder for Backbone {
    fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w, _) = image.pixels.dim();
        let side = self.cfg.input_size;
        if h != side || w != side {
            return Err(Error::Shape(format!(
                "encode_image expects a prepared {side}x{side} image, got {h}x{w}"
            )));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid_side();
        let d = self.cfg.feature_dim;
        let patch_dim = p * p * 3;
        let mut grid = Array3::zeros((g, g, d));
        let mut patch = vec![0.0; patch_dim];
        for ci in 0..g {
            for cj in 0..g {
                let mut idx = 0;
                for py in 0..p {
                    for px in 0..p {
                        for k in 0..3 {
                            patch[idx] = image.pixels[[ci * p + py, cj * p + px, k]];
                            idx += 1;
                        }
                    }
                }
                for dc in 0..d {
                    let mut acc = 0.0;
                    for (f, &v) in patch.iter().enumerate() {
                        acc += v * self.projection[[f, dc]];
                    }
                    grid[[ci, cj, dc]] = acc;
                }
                // Per-cell standardization keeps cells on a common scale so
                // pooled features are comparable across image content.
                let cell = grid.slice(ndarray::s![ci, cj, ..]);
                let mean = cell.sum() / d as f64;
                let var = cell.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + 1e-6).sqrt();
                for dc in 0..d {
                    grid[[ci, cj, dc]] = (grid[[ci, cj, dc]] - mean) * rstd;
                }
            }
        }
        Ok(FeatureMap {
            grid,
            stride: p as f64,
        })
    }

    fn frozen_checksum(&self) -> u64 {
        nn::checksum_f64(self.projection.iter().cloned())
    }
}

/// Source of images addressed by a string reference (usually a file name).
pub trait ImageProvider: Send + Sync {
    fn load_image(&self, image_ref: &str) -> Result<Image>;
}

/// Procedurally generated images: a smooth background gradient plus a few
/// solid rectangles, all derived from (seed, image_ref). Useful wherever a
/// corpus is referenced but no real files exist on disk.
pub struct SyntheticImages {
    seed: u64,
}

impl SyntheticImages {
    pub fn new(seed: u64) -> Self {
        SyntheticImages { seed }
    }
}

impl ImageProvider for SyntheticImages {
    fn load_image(&self, image_ref: &str) -> Result<Image> {
        let mut rng = seed::sub_rng(self.seed, &["synthetic-image", image_ref]);
        // Non-square dims exercise the scale-and-pad path.
        let h = 240 + rng.random_range(0..281usize);
        let w = 240 + rng.random_range(0..401usize);
        let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let slope_y: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let slope_x: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mut pixels = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for k in 0..3 {
                    let v = 0.25 + 0.5 * base[k]
                        + 0.25 * slope_y[k] * (i as f64 / h as f64)
                        + 0.25 * slope_x[k] * (j as f64 / w as f64);
                    pixels[[i, j, k]] = v.clamp(0.0, 1.0);
                }
            }
        }
        let rects = 2 + rng.random_range(0..3usize);
        for _ in 0..rects {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let rh = 1 + rng.random_range(0..(h / 2).max(1));
            let rw = 1 + rng.random_range(0..(w / 2).max(1));
            let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            for i in y0..(y0 + rh).min(h) {
                for j in x0..(x0 + rw).min(w) {
                    for k in 0..3 {
                        pixels[[i, j, k]] = color[k];
                    }
                }
            }
        }
        Image::new(image_ref, pixels)
    }
}

/// Loads PNG files from a directory; the image reference is the path
/// relative to the root.
pub struct DirImages {
    root: PathBuf,
}

impl DirImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImages { root: root.into() }
    }
}

impl ImageProvider for DirImages {
    fn load_image(&self, image_ref: &str) -> Result<Image> {
        let path = self.root.join(image_ref);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Data(format!("cannot read image {}: {e}", path.display()))
        })?;
        Image::from_png_bytes(image_ref, &bytes)
    }
}

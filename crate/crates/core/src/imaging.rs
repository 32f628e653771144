//! Image I/O, global-view downsampling, region cropping and patch-grid
//! arithmetic.
//!
//! Everything here is a pure function over immutable inputs. The pipeline and
//! the reference model share these helpers so that token counts reported by
//! the metrics harness agree with what the model actually consumes.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regions::BoundingBox;

/// Smallest accepted global-view resolution.
pub const MIN_GLOBAL_RESOLUTION: u32 = 16;
/// Default long-side cap applied to local slices.
pub const DEFAULT_SLICE_CAP: u32 = 448;
/// Overhang (in pixels) a crop box may have before it is rejected.
pub const CROP_CLAMP_SLACK: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image file not found: {0}")]
    NotFound(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("failed to encode image: {0}")]
    Encode(String),
    #[error("invalid image dimensions {width}x{height} for buffer of {len} bytes")]
    InvalidDimensions { width: u32, height: u32, len: usize },
    #[error("global resolution {0} is below the minimum of {MIN_GLOBAL_RESOLUTION}")]
    ResolutionTooSmall(u32),
    #[error("crop box {box_:?} lies outside the {width}x{height} image")]
    BoxOutOfBounds {
        box_: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("crop box {0:?} has zero area after clamping")]
    DegenerateBox(BoundingBox),
    #[error("slice cap must be at least 1 pixel")]
    InvalidCap,
}

/// An 8-bit RGB raster stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub const CHANNELS: u32 = 3;

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize * Self::CHANNELS as usize;
        if width == 0 || height == 0 || pixels.len() != expected {
            return Err(ImagingError::InvalidDimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Solid-colour image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        Self::CHANNELS
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma (BT.601) as floating point, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Gaussian blur with standard deviation `sigma` pixels.
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        Image::from_rgb_image(imageops::blur(&self.to_rgb_image(), sigma))
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    fn from_rgb_image(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self {
            width,
            height,
            pixels: img.into_raw(),
        }
    }

    /// Decode PNG or JPEG bytes. Grayscale and alpha inputs become RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let dynamic = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb_image(dynamic.to_rgb8()))
    }

    /// Encode as PNG. Output is byte-identical for identical pixels.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new_with_quality(
            Cursor::new(&mut out),
            image::codecs::png::CompressionType::Default,
            image::codecs::png::FilterType::NoFilter,
        )
        .write_image(
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, ImagingError> {
        let mut out = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
            .write_image(
                &self.pixels,
                self.width,
                self.height,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Load a PNG or JPEG file as RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.exists() {
        return Err(ImagingError::NotFound(display));
    }
    let bytes = std::fs::read(path).map_err(|source| ImagingError::Io {
        path: display.clone(),
        source,
    })?;
    Image::decode(&bytes).map_err(|e| match e {
        ImagingError::Decode { message, .. } => ImagingError::Decode {
            path: display,
            message,
        },
        other => other,
    })
}

/// Low-resolution square view of the whole source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalView {
    pub image: Image,
    pub source_width: u32,
    pub source_height: u32,
    pub resolution: u32,
}

/// Bilinear resample to `resolution`×`resolution`. Aspect ratio is not
/// preserved; the view mirrors a fixed square model input.
pub fn downsample_global(img: &Image, resolution: u32) -> Result<GlobalView, ImagingError> {
    if resolution < MIN_GLOBAL_RESOLUTION {
        return Err(ImagingError::ResolutionTooSmall(resolution));
    }
    Ok(GlobalView {
        image: resize_bilinear(img, resolution, resolution),
        source_width: img.width,
        source_height: img.height,
        resolution,
    })
}

/// Triangle-filter resize; returns the input unchanged at equal size.
pub fn resize_bilinear(img: &Image, width: u32, height: u32) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let resized = imageops::resize(&img.to_rgb_image(), width, height, FilterType::Triangle);
    Image::from_rgb_image(resized)
}

/// A local slice cut from the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCrop {
    pub image: Image,
    pub source_box: BoundingBox,
    /// Long-side cap ratio actually applied (1.0 when under the cap).
    pub scale: f64,
}

/// Integer pixel rectangle covered by a box after clamping.
///
/// Boxes may overhang the image by up to [`CROP_CLAMP_SLACK`] pixels.
pub fn pixel_rect(
    bbox: &BoundingBox,
    width: u32,
    height: u32,
) -> Result<(u32, u32, u32, u32), ImagingError> {
    let (w, h) = (width as f64, height as f64);
    let out_of_bounds = bbox.x_min < -CROP_CLAMP_SLACK
        || bbox.y_min < -CROP_CLAMP_SLACK
        || bbox.x_max > w + CROP_CLAMP_SLACK
        || bbox.y_max > h + CROP_CLAMP_SLACK;
    if out_of_bounds {
        return Err(ImagingError::BoxOutOfBounds {
            box_: *bbox,
            width,
            height,
        });
    }
    let x0 = bbox.x_min.max(0.0).floor() as u32;
    let y0 = bbox.y_min.max(0.0).floor() as u32;
    let x1 = (bbox.x_max.min(w).ceil() as u32).min(width);
    let y1 = (bbox.y_max.min(h).ceil() as u32).min(height);
    if x1 <= x0 || y1 <= y0 {
        return Err(ImagingError::DegenerateBox(*bbox));
    }
    Ok((x0, y0, x1 - x0, y1 - y0))
}

/// Dimensions after applying the long-side cap, and the ratio used.
pub fn capped_dims(width: u32, height: u32, cap: u32) -> (u32, u32, f64) {
    let long = width.max(height);
    if long <= cap {
        return (width, height, 1.0);
    }
    let scale = cap as f64 / long as f64;
    let shrink = |v: u32| ((v as f64 * scale).round() as u32).clamp(1, cap);
    if width >= height {
        (cap, shrink(height), scale)
    } else {
        (shrink(width), cap, scale)
    }
}

/// Crop `bbox` at native resolution, downscaling so the long side is at most
/// `cap`.
pub fn crop_region(img: &Image, bbox: &BoundingBox, cap: u32) -> Result<SliceCrop, ImagingError> {
    if cap == 0 {
        return Err(ImagingError::InvalidCap);
    }
    let (x, y, w, h) = pixel_rect(bbox, img.width, img.height)?;
    let native = imageops::crop_imm(&img.to_rgb_image(), x, y, w, h).to_image();
    let native = Image::from_rgb_image(native);
    let (cw, ch, scale) = capped_dims(w, h, cap);
    let image = if scale < 1.0 {
        resize_bilinear(&native, cw, ch)
    } else {
        native
    };
    Ok(SliceCrop {
        image,
        source_box: *bbox,
        scale,
    })
}

/// Patch grid of an image under zero-padding to a multiple of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub rows: u32,
    pub cols: u32,
}

impl PatchGrid {
    pub fn for_dims(width: u32, height: u32, patch_size: u32) -> Self {
        assert!(patch_size >= 1, "patch size must be at least 1");
        Self {
            patch_size,
            rows: height.div_ceil(patch_size),
            cols: width.div_ceil(patch_size),
        }
    }

    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of visual tokens for a `w`×`h` image at patch size `p`.
pub fn patch_token_count(width: u32, height: u32, patch_size: u32) -> u64 {
    let grid = PatchGrid::for_dims(width, height, patch_size);
    grid.rows as u64 * grid.cols as u64
}

/// Laplacian variance of the grayscale image (4-neighbour kernel over
/// interior pixels). Zero for constant images.
pub fn laplacian_variance(img: &Image) -> f64 {
    let (w, h) = (img.width as usize, img.height as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let gray = img.grayscale();
    let at = |x: usize, y: usize| gray[y * w + x];
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            n += 1.0;
            let delta = lap - mean;
            mean += delta / n;
            m2 += delta * (lap - mean);
        }
    }
    m2 / n
}

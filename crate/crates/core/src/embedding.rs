//! Sample embeddings.
//!
//! Raw samples enter as images (channel-major pixel grids) or as
//! already-extracted feature vectors. Two embeddings are computed here:
//!
//! - identity: channel-major flatten of the pixel grid, d = C*H*W
//! - frequency: channelwise 2-D FFT, centered with the zero-frequency bin
//!   in the middle, log1p of the magnitude spectrum, same d = C*H*W
//!
//! Externally computed feature vectors (supervised or self-supervised
//! backbones) are ingested through the tensor format in `fpte` and carry
//! their own space tag.
//!
//! Standardization is opt-in and always derives its statistics from the
//! reference set, never from the set being transformed.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Which feature space a set of vectors lives in. Distances are only
/// meaningful within a single tag; mixing tags is a caller error that
/// downstream code rejects via manifest checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    Rgb,
    Freq,
    Sl,
    Ssl,
    Other,
}

impl std::fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SpaceTag::Rgb => "rgb",
            SpaceTag::Freq => "freq",
            SpaceTag::Sl => "sl",
            SpaceTag::Ssl => "ssl",
            SpaceTag::Other => "other",
        };
        f.write_str(s)
    }
}

/// A single image, channel-major: `pixels[c*h*w + y*w + x]`.
#[derive(Debug, Clone)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidConfig(format!(
                "zero-size image: {channels}x{height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                expected: channels * height * width,
                actual: pixels.len(),
            });
        }
        if let Some(pos) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / (height * width),
                col: pos % (height * width),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// One channel plane, row-major.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.pixels[c * plane..(c + 1) * plane]
    }
}

/// A set of embedded samples. Sample ids are the row indices (0..N),
/// which keeps them unique and ascending by construction.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    space_tag: SpaceTag,
    source_label: String,
    points: FeatureMatrix,
}

impl EmbeddingSet {
    pub fn new(space_tag: SpaceTag, source_label: impl Into<String>, points: FeatureMatrix) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::EmptySet {
                what: "embedding set",
            });
        }
        if points.dim() == 0 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be at least 1".into(),
            ));
        }
        if let Some((row, col)) = points.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            space_tag,
            source_label: source_label.into(),
            points,
        })
    }

    #[inline]
    pub fn space_tag(&self) -> SpaceTag {
        self.space_tag
    }

    #[inline]
    pub fn source_label(&self) -> &str {
        &self.source_label
    }

    #[inline]
    pub fn points(&self) -> &FeatureMatrix {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn into_points(self) -> FeatureMatrix {
        self.points
    }
}

// ===========================================================================
// Embedding maps
// ===========================================================================

/// Channel-major flatten. The storage order of `Image` already is the
/// output order, so this is a copy; it exists as a named map so both
/// embeddings share one calling convention.
pub fn embed_identity(image: &Image) -> Vec<f32> {
    image.pixels.clone()
}

/// Channelwise 2-D FFT, centered, log1p magnitude. Output dimension is
/// C*H*W, matching `embed_identity`. Spatial dims of 1x1 carry no
/// frequency content and are rejected.
pub fn embed_fft(image: &Image) -> Result<Vec<f32>> {
    let (h, w) = (image.height, image.width);
    if h == 1 && w == 1 {
        return Err(Error::InvalidConfig(
            "frequency embedding needs spatial extent, got 1x1".into(),
        ));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut out = Vec::with_capacity(image.channels * h * w);
    let mut buf = vec![Complex::new(0.0f64, 0.0f64); h * w];
    let mut transposed = vec![Complex::new(0.0f64, 0.0f64); h * w];
    for c in 0..image.channels {
        let plane = image.channel(c);
        for (dst, &src) in buf.iter_mut().zip(plane.iter()) {
            *dst = Complex::new(src as f64, 0.0);
        }
        // Row pass, then transpose so the column pass also runs on
        // contiguous memory, then transpose back.
        row_fft.process(&mut buf);
        transpose(&buf, &mut transposed, h, w);
        col_fft.process(&mut transposed);
        transpose(&transposed, &mut buf, w, h);

        for r in 0..h {
            for col in 0..w {
                let src_r = (r + (h + 1) / 2) % h;
                let src_c = (col + (w + 1) / 2) % w;
                let mag = buf[src_r * w + src_c].norm();
                out.push(mag.ln_1p() as f32);
            }
        }
    }
    Ok(out)
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Embeds a batch of images into one set. All images must share C, H, W.
/// Work fans out across threads; results are assembled in input order, so
/// the output does not depend on the thread count.
pub fn embed_images(
    images: &[Image],
    space: SpaceTag,
    source_label: impl Into<String>,
) -> Result<EmbeddingSet> {
    if images.is_empty() {
        return Err(Error::EmptySet { what: "image batch" });
    }
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::DimensionMismatch {
                expected: c * h * w,
                actual: img.channels * img.height * img.width,
            });
        }
    }
    let rows: Vec<Vec<f32>> = match space {
        SpaceTag::Rgb => images.par_iter().map(embed_identity).collect(),
        SpaceTag::Freq => {
            let embedded: Result<Vec<Vec<f32>>> = images.par_iter().map(embed_fft).collect();
            embedded?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "space {other} is ingested from tensors, not computed from images"
            )))
        }
    };
    let points = FeatureMatrix::from_rows(&rows)?;
    EmbeddingSet::new(space, source_label, points)
}

// ===========================================================================
// Standardization
// ===========================================================================

/// Per-dimension location/scale statistics, always fit on the reference
/// set. Scale uses the unbiased (N-1) standard deviation and is floored
/// at 1e-8 when applied, so constant dimensions map to zero instead of
/// dividing by zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(reference: &EmbeddingSet) -> Result<Self> {
        let m = reference.points();
        if m.rows() < 2 {
            return Err(Error::ClassTooSmall {
                label: reference.source_label().to_string(),
                count: m.rows(),
                needed: 2,
            });
        }
        let d = m.dim();
        let n = m.rows() as f64;
        let mut mean = vec![0.0f64; d];
        for row in m.iter_rows() {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v as f64;
            }
        }
        for v in &mut mean {
            *v /= n;
        }
        let mut var = vec![0.0f64; d];
        for row in m.iter_rows() {
            for ((acc, &mu), &v) in var.iter_mut().zip(&mean).zip(row) {
                let diff = v as f64 - mu;
                *acc += diff * diff;
            }
        }
        let std = var.into_iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// (x - mean) / max(std, 1e-8), dimension-wise.
    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: set.dim(),
            });
        }
        let mut out = FeatureMatrix::zeros(set.len(), set.dim());
        for i in 0..set.len() {
            let src = set.points().row(i);
            let dst = out.row_mut(i);
            for (j, &v) in src.iter().enumerate() {
                let scale = self.std[j].max(1e-8);
                dst[j] = ((v as f64 - self.mean[j]) / scale) as f32;
            }
        }
        EmbeddingSet::new(set.space_tag(), set.source_label(), out)
    }
}

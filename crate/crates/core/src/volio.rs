//! Volume storage, slice extraction, padding and intensity normalization.
//!
//! Volumes are persisted in the `MQCV` container: a 30-byte little-endian
//! header followed by the raw `f32` voxels.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MQCV"
//! 4       2     version (u16) = 1
//! 6       12    dims nx, ny, nz (u32 x3)
//! 18      12    spacing sx, sy, sz in mm (f32 x3)
//! 30      4*N   voxels (f32), N = nx*ny*nz
//! ```
//!
//! Voxels are stored as a row-major `[nz][ny][nx]` array, i.e. voxel
//! `(x, y, z)` lives at `(z * ny + y) * nx + x`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MQCV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Error)]
pub enum VolError {
    #[error("bad magic: expected \"MQCV\"")]
    BadMagic,
    #[error("unsupported MQCV version {0}")]
    VersionUnsupported(u16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("non-finite voxel at index {0}")]
    NonFiniteVoxel(usize),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("slice index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("target {target_h}x{target_w} smaller than image {h}x{w}")]
    TargetTooSmall {
        h: usize,
        w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("slice count {count} exceeds depth {depth}")]
    CountExceedsDepth { count: usize, depth: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, VolError>;

/// A 3-D scalar voxel grid with spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolError::Invalid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolError::Invalid(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(VolError::Invalid(format!(
                "voxel count {} does not match dims {dims:?}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolError::NonFiniteVoxel(i));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let mut voxels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Extent of the volume along the axis an orientation slices through.
    pub fn extent(&self, orientation: Orientation) -> usize {
        match orientation {
            Orientation::Axial => self.dims[2],
            Orientation::Coronal => self.dims[1],
            Orientation::Sagittal => self.dims[0],
        }
    }

    /// Replaces every axial plane with `f(z, plane)`. The closure must return
    /// a plane of the same size.
    pub fn map_axial(&self, mut f: impl FnMut(usize, SliceImage) -> SliceImage) -> Result<Volume> {
        let [nx, ny, nz] = self.dims;
        let mut voxels = Vec::with_capacity(self.voxels.len());
        for z in 0..nz {
            let plane = extract_slice(self, Orientation::Axial, z)?;
            let out = f(z, plane);
            if out.height() != ny || out.width() != nx {
                return Err(VolError::Invalid("axial map changed plane size".into()));
            }
            voxels.extend_from_slice(out.pixels());
        }
        Volume::new(self.dims, self.spacing, voxels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

/// A 2-D float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    pub orientation: Orientation,
    pub source_index: usize,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(VolError::Invalid(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            orientation: Orientation::Axial,
            source_index: 0,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
            orientation: Orientation::Axial,
            source_index: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Same geometry and provenance, new pixel values.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self {
            pixels,
            ..self.clone()
        }
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum()
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = fs::read(path)?;
    decode_volume(&bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(VolError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(VolError::VersionUnsupported(version));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6) as usize, u32_at(10) as usize, u32_at(14) as usize];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| VolError::Invalid(format!("dims {dims:?} overflow")))?;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(VolError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    let voxels: Vec<f32> = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(VolError::NonFiniteVoxel(i));
    }
    Volume::new(dims, spacing, voxels)
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.voxels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in volume.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&encode_volume(volume))?;
    file.flush()?;
    Ok(())
}

/// Axial slices index z (rows = y, cols = x), coronal slices index y
/// (rows = z, cols = x), sagittal slices index x (rows = z, cols = y).
pub fn extract_slice(volume: &Volume, orientation: Orientation, index: usize) -> Result<SliceImage> {
    let [nx, ny, nz] = volume.dims;
    let extent = volume.extent(orientation);
    if index >= extent {
        return Err(VolError::IndexOutOfRange { index, extent });
    }
    let mut img = match orientation {
        Orientation::Axial => {
            let start = volume.index(0, 0, index);
            SliceImage::new(ny, nx, volume.voxels[start..start + nx * ny].to_vec())?
        }
        Orientation::Coronal => SliceImage::from_fn(nz, nx, |z, x| volume.get(x, index, z)),
        Orientation::Sagittal => SliceImage::from_fn(nz, ny, |z, y| volume.get(index, y, z)),
    };
    img.orientation = orientation;
    img.source_index = index;
    Ok(img)
}

/// Centers `image` on a zero background of the target size. Odd leftover
/// padding goes to the bottom/right.
pub fn pad_to(image: &SliceImage, target_h: usize, target_w: usize) -> Result<SliceImage> {
    let (h, w) = (image.height, image.width);
    if h > target_h || w > target_w {
        return Err(VolError::TargetTooSmall {
            h,
            w,
            target_h,
            target_w,
        });
    }
    if h == target_h && w == target_w {
        return Ok(image.clone());
    }
    let top = (target_h - h) / 2;
    let left = (target_w - w) / 2;
    let mut pixels = vec![0.0f32; target_h * target_w];
    for r in 0..h {
        let dst = (top + r) * target_w + left;
        pixels[dst..dst + w].copy_from_slice(&image.pixels[r * w..(r + 1) * w]);
    }
    Ok(SliceImage {
        height: target_h,
        width: target_w,
        pixels,
        orientation: image.orientation,
        source_index: image.source_index,
    })
}

/// Nearest-rank percentile (`q` in [0, 1]) of an already sorted slice.
pub fn nearest_rank(sorted: &[f32], q: f64) -> f32 {
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

pub(crate) fn sorted_copy(values: &[f32]) -> Vec<f32> {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    v
}

/// Maps the 1st percentile of the pixels to 0 and the 99th to 1, then
/// clamps to [0, 1]. Percentiles are nearest-rank over all pixels, which
/// makes the map idempotent. When the two percentiles coincide the image
/// min/max are used instead; a constant image maps to zeros.
pub fn normalize_intensity(image: &SliceImage) -> SliceImage {
    if image.pixels.iter().all(|&p| p == 0.0) {
        return image.clone();
    }
    let sorted = sorted_copy(&image.pixels);
    let (mut lo, mut hi) = (nearest_rank(&sorted, 0.01), nearest_rank(&sorted, 0.99));
    if hi <= lo {
        lo = sorted[0];
        hi = sorted[sorted.len() - 1];
    }
    if hi <= lo {
        return image.with_pixels(vec![0.0; image.pixels.len()]);
    }
    let scale = hi - lo;
    let pixels = image
        .pixels
        .iter()
        .map(|&p| ((p - lo) / scale).clamp(0.0, 1.0))
        .collect();
    image.with_pixels(pixels)
}

/// Normalizes then pads; the standard preparation of any slice before it
/// reaches the encoder.
pub fn prepare_slice(image: &SliceImage, target_h: usize, target_w: usize) -> Result<SliceImage> {
    pad_to(&normalize_intensity(image), target_h, target_w)
}

/// Axial indices of the `count` slices centered on `nz / 2`.
pub fn center_indices(nz: usize, count: usize) -> Result<std::ops::Range<usize>> {
    if count > nz {
        return Err(VolError::CountExceedsDepth { count, depth: nz });
    }
    let start = nz / 2 - count / 2;
    Ok(start..start + count)
}

/// The `count` center axial slices, normalized and padded to `target`.
pub fn center_slices(volume: &Volume, count: usize, target: (usize, usize)) -> Result<Vec<SliceImage>> {
    center_indices(volume.dims[2], count)?
        .map(|z| prepare_slice(&extract_slice(volume, Orientation::Axial, z)?, target.0, target.1))
        .collect()
}

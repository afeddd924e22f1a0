//! PNG encoding of the on-disk formats: 16-bit millimeter depth, 8-bit RGB and
//! 8-bit masks (nonzero = transparent).

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, ImageReader, Limits, Luma, Rgb};

use crate::depth::{DepthMap, RgbImage, TransparentMask};
use crate::error::{FdctError, Result};

/// Largest accepted image side in pixels.
pub const MAX_SIDE: u32 = 8192;

fn decode(bytes: &[u8]) -> Result<image::DynamicImage> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(256 << 20);
    reader.limits(limits);
    reader
        .decode()
        .map_err(|e| FdctError::Input(format!("png decode: {e}")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| FdctError::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| FdctError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Raw 16-bit values of a single-channel PNG.
pub fn decode_depth_mm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    match decode(bytes)? {
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok((h as usize, w as usize, img.into_raw()))
        }
        other => Err(FdctError::Input(format!(
            "depth png must be 16-bit single channel, got {:?}",
            other.color()
        ))),
    }
}

/// Depth in meters from a millimeter PNG.
pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let (h, w, mm) = decode_depth_mm(bytes)?;
    DepthMap::new(
        h,
        w,
        mm.into_iter().map(|v| f64::from(v) / 1000.0).collect(),
    )
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = decode(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let values = img
        .into_raw()
        .into_iter()
        .map(|v| f32::from(v) / 255.0)
        .collect();
    RgbImage::new(h as usize, w as usize, values)
}

pub fn decode_mask(bytes: &[u8]) -> Result<TransparentMask> {
    let img = decode(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    TransparentMask::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    with_path(path, decode_depth(&read(path)?))
}

pub fn read_depth_mm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    with_path(path, decode_depth_mm(&read(path)?))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    with_path(path, decode_rgb(&read(path)?))
}

pub fn read_mask(path: &Path) -> Result<TransparentMask> {
    with_path(path, decode_mask(&read(path)?))
}

/// Header-only size check, `(height, width)`.
pub fn read_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| FdctError::io(path, e))?
        .into_dimensions()
        .map_err(|e| FdctError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok((h as usize, w as usize))
}

/// Meters to millimeters, rounded and saturated to the u16 range.
pub fn depth_to_mm(d: &DepthMap) -> Vec<u16> {
    d.values()
        .iter()
        .map(|v| (v * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect()
}

pub fn encode_depth(d: &DepthMap) -> Result<Vec<u8>> {
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(d.width() as u32, d.height() as u32, depth_to_mm(d))
            .ok_or_else(|| FdctError::Dimension("depth buffer size".into()))?;
    encode(img)
}

fn encode<I: Into<image::DynamicImage>>(img: I) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.into()
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| FdctError::Input(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| FdctError::io(path, e))
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    write(path, encode_depth(d)?)
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let raw = rgb
        .values()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(rgb.width() as u32, rgb.height() as u32, raw)
            .ok_or_else(|| FdctError::Dimension("rgb buffer size".into()))?;
    write(path, encode(img)?)
}

pub fn write_mask(path: &Path, mask: &TransparentMask) -> Result<()> {
    let raw = mask
        .values()
        .iter()
        .map(|&v| if v { 255u8 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .ok_or_else(|| FdctError::Dimension("mask buffer size".into()))?;
    write(path, encode(img)?)
}

/// 8-bit grayscale rendering of a depth map over `[0, max]`, for previews.
pub fn write_depth_preview(path: &Path, d: &DepthMap, max: f64) -> Result<()> {
    let raw = d
        .values()
        .iter()
        .map(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(d.width() as u32, d.height() as u32, raw)
            .ok_or_else(|| FdctError::Dimension("preview buffer size".into()))?;
    write(path, encode(img)?)
}

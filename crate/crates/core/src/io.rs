//! PNG encoding and atomic file writes.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use ::image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::image::{BinaryMask, RgbImage};
use crate::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<::image::DynamicImage> {
    let bytes = read_bytes(path)?;
    ::image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn encode<P, C>(buf: &ImageBuffer<P, C>) -> Vec<u8>
where
    P: ::image::PixelWithColorType,
    [P::Subpixel]: ::image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
    out.into_inner()
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("sized buffer");
    encode(&buf)
}

pub fn encode_gray_png(width: usize, height: usize, data: Vec<u8>) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, data).expect("sized buffer");
    encode(&buf)
}

pub fn encode_gray16_png(width: usize, height: usize, data: Vec<u16>) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, data).expect("sized buffer");
    encode(&buf)
}

/// Mask stored as 8-bit grayscale, 0 / 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    encode_gray_png(mask.width(), mask.height(), mask.data().iter().map(|&v| v * 255).collect())
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img))
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

/// Any nonzero gray level reads as foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(w as usize, h as usize, img.into_raw().into_iter().map(|v| (v != 0) as u8).collect())
}

pub fn read_gray16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = decode(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

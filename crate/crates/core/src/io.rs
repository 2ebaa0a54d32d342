//! File formats: DF2D deformation fields, FM2D feature maps, LAWT parameter
//! checkpoints, and grayscale PNG/PGM images.
//!
//! All binary formats are little-endian with 32-bit float payloads.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::grid::{DeformationField2D, Image2D};

const DF2D_MAGIC: &[u8; 4] = b"DF2D";
const FM2D_MAGIC: &[u8; 4] = b"FM2D";
const LAWT_MAGIC: &[u8; 4] = b"LAWT";

fn malformed(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

struct Reader<'a> {
    format: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(format: &'static str, buf: &'a [u8]) -> Self {
        Self { format, buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(self.format, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(malformed(self.format, "bad magic bytes"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| malformed(self.format, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(self.format, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_df2d(field: &DeformationField2D) -> Vec<u8> {
    let (h, w) = field.shape();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(DF2D_MAGIC);
    put_u32(&mut out, h);
    put_u32(&mut out, w);
    put_f32s(&mut out, field.u());
    put_f32s(&mut out, field.v());
    out
}

pub fn decode_df2d(bytes: &[u8]) -> Result<DeformationField2D> {
    let mut r = Reader::new("DF2D", bytes);
    r.magic(DF2D_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let u = r.f32s(h * w)?;
    let v = r.f32s(h * w)?;
    r.finish()?;
    DeformationField2D::new(h, w, u, v)
}

pub fn write_df2d(path: impl AsRef<Path>, field: &DeformationField2D) -> Result<()> {
    write_bytes(path.as_ref(), &encode_df2d(field))
}

pub fn read_df2d(path: impl AsRef<Path>) -> Result<DeformationField2D> {
    decode_df2d(&read_bytes(path.as_ref())?)
}

/// Feature map layout: magic `FM2D`, u32 channels, u32 height, u32 width,
/// then channel-major f32 values.
pub fn encode_fm2d(channels: usize, height: usize, width: usize, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(FM2D_MAGIC);
    put_u32(&mut out, channels);
    put_u32(&mut out, height);
    put_u32(&mut out, width);
    put_f32s(&mut out, data);
    out
}

pub fn decode_fm2d(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = Reader::new("FM2D", bytes);
    r.magic(FM2D_MAGIC)?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let data = r.f32s(c * h * w)?;
    r.finish()?;
    Ok((c, h, w, data))
}

/// A named tensor in a parameter checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_lawt(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LAWT_MAGIC);
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, &t.data);
    }
    out
}

pub fn decode_lawt(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new("LAWT", bytes);
    r.magic(LAWT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| malformed("LAWT", "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f32s(numel)?;
        tensors.push(NamedTensor { name, shape, data });
    }
    r.finish()?;
    Ok(tensors)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(|e| Error::io(path, e))
}

/// Loads a grayscale PNG or binary PGM, scaling 8-bit values by 1/255 and
/// 16-bit values by 1/65535.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory(&bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => other.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    Image2D::new(h, w, data)
}

fn to_u16(image: &Image2D) -> Vec<u16> {
    image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect()
}

/// Writes a 16-bit grayscale PNG; values are clamped to `[0, 1]`.
pub fn save_png16(path: impl AsRef<Path>, image: &Image2D) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, to_u16(image))
            .expect("buffer matches dimensions");
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, ImageFormat::Png)?;
    write_bytes(path, bytes.get_ref())
}

/// Writes an 8-bit binary PGM (P5).
pub fn save_pgm8(path: impl AsRef<Path>, image: &Image2D) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_bytes(path.as_ref(), &bytes)
}

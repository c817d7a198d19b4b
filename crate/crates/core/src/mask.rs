use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const DUMP_MAGIC: &[u8; 8] = b"SDRMASK1";

/// Single-channel occupancy raster, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl MaskImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        MaskImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        MaskImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("mask value {v} at {i} outside [0, 1]")));
        }
        Ok(MaskImage { width, height, data })
    }

    /// Trusted constructor for renderer output, which is in [0, 1] by construction.
    pub(crate) fn from_coverage(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        MaskImage { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        MaskImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn same_size(&self, other: &MaskImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::SizeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn require_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(index) => Err(Error::NonBinaryMask {
                index,
                value: self.data[index],
            }),
        }
    }

    /// Sum of occupancy.
    pub fn area(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn binarized(&self, threshold: f64) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn inverted(&self) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    /// Box-average resample followed by a 0.5 threshold; binary in, binary out.
    pub fn resampled_binary(&self, width: usize, height: usize) -> MaskImage {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        MaskImage::from_fn(width, height, |x, y| {
            let x0 = (x as f64 * sx).floor() as usize;
            let x1 = (((x + 1) as f64 * sx).ceil() as usize).clamp(x0 + 1, self.width);
            let y0 = (y as f64 * sy).floor() as usize;
            let y1 = (((y + 1) as f64 * sy).ceil() as usize).clamp(y0 + 1, self.height);
            let mut sum = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    sum += self.get(xx, yy);
                }
            }
            let mean = sum / ((x1 - x0) * (y1 - y0)) as f64;
            if mean >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer size matches");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Read an 8-bit PNG; values are scaled to [0, 1].
    pub fn read_png(path: &Path) -> Result<MaskImage> {
        let img = image::open(path)
            .map_err(|e| Error::parse(path.display().to_string(), e))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(MaskImage {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    /// Lossless dump: 8-byte magic, u32 width, u32 height, then f64 values, all little-endian.
    pub fn write_raw(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw(r: &mut impl Read) -> Result<MaskImage> {
        let ctx = "raw mask dump";
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::parse(ctx, e))?;
        if &magic != DUMP_MAGIC {
            return Err(Error::parse(ctx, "bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| Error::parse(ctx, e))?;
        let width = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|e| Error::parse(ctx, e))?;
        let height = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(width * height);
        let mut buf = [0u8; 8];
        for _ in 0..width * height {
            r.read_exact(&mut buf).map_err(|e| Error::parse(ctx, e))?;
            data.push(f64::from_le_bytes(buf));
        }
        MaskImage::from_vec(width, height, data)
    }
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    a.same_size(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

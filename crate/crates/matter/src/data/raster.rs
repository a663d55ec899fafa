//! Multi-spectral raster type and its on-disk format.
//!
//! MSR1 layout: one ASCII header line `MSR1 <bands> <height> <width>\n`
//! followed by bands*height*width little-endian f32 values, band-sequential,
//! each band row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralImage {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MultiSpectralImage {
    /// Pixel values must be finite and non-negative.
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::data(format!(
                "image dimensions must be positive, got {bands}x{height}x{width}"
            )));
        }
        if data.len() != bands * height * width {
            return Err(Error::data(format!(
                "image {bands}x{height}x{width} wants {} values, buffer holds {}",
                bands * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::data(format!(
                "image values must be finite and >= 0, found {bad}"
            )));
        }
        Ok(Self { bands, height, width, data })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// A single band has no cross-band structure for cosine similarity to
    /// use; callers may warn but proceed.
    pub fn single_band(&self) -> bool {
        self.bands == 1
    }

    #[inline]
    pub fn pixel(&self, band: usize, y: usize, x: usize) -> f32 {
        debug_assert!(band < self.bands && y < self.height && x < self.width);
        self.data[(band * self.height + y) * self.width + x]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.data[band * self.height * self.width..][..self.height * self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.bands, self.height, self.width], self.data.clone())
            .expect("image dims are a valid tensor shape")
    }
}

pub fn write_msr1(path: &Path, img: &MultiSpectralImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "MSR1 {} {} {}\n", img.bands(), img.height(), img.width())?;
    for v in img.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_msr1(path: &Path) -> Result<MultiSpectralImage> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::data(format!("{}: truncated header", path.display())));
        }
        if byte[0] == b'\n' {
            break;
        }
        if header.len() >= 128 {
            return Err(Error::data(format!("{}: header line too long", path.display())));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::data(format!("{}: header is not UTF-8", path.display())))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("MSR1") {
        return Err(Error::data(format!("{}: bad magic, expected MSR1", path.display())));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .ok_or_else(|| Error::data(format!("{}: header missing dimensions", path.display())))?
            .parse::<usize>()
            .map_err(|_| Error::data(format!("{}: non-integer dimension in header", path.display())))
    };
    let (bands, height, width) = (dim()?, dim()?, dim()?);
    if bands == 0 || height == 0 || width == 0 {
        return Err(Error::data(format!("{}: zero dimension in header", path.display())));
    }
    let count = bands
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::data(format!("{}: dimensions overflow", path.display())))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::data(format!("{}: truncated payload, wanted {count} values", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::data(format!("{}: trailing bytes after payload", path.display())));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MultiSpectralImage::new(bands, height, width, data)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(bands: usize, h: usize, w: usize) -> MultiSpectralImage {
        let n = bands * h * w;
        MultiSpectralImage::new(bands, h, w, (0..n).map(|i| i as f32 * 0.5).collect()).unwrap()
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.msr1");
        let img = ramp(3, 4, 5);
        write_msr1(&path, &img).unwrap();
        let back = read_msr1(&path).unwrap();
        assert_eq!(img, back);
        // Byte-identical on rewrite.
        let bytes1 = std::fs::read(&path).unwrap();
        write_msr1(&path, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_is_human_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.msr1");
        write_msr1(&path, &ramp(2, 3, 4)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"MSR1 2 3 4\n"));
        assert_eq!(bytes.len(), 11 + 2 * 3 * 4 * 4);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msr1");

        std::fs::write(&path, b"MSRX 1 1 1\n\x00\x00\x00\x00").unwrap();
        assert!(read_msr1(&path).is_err());

        std::fs::write(&path, b"MSR1 1 2 2\n\x00\x00\x00\x00").unwrap();
        let err = read_msr1(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut ok = b"MSR1 1 1 1\n".to_vec();
        ok.extend_from_slice(&1.0f32.to_le_bytes());
        ok.push(0);
        std::fs::write(&path, &ok).unwrap();
        assert!(read_msr1(&path).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn rejects_negative_and_non_finite_values() {
        assert!(MultiSpectralImage::new(1, 1, 2, vec![0.0, -1.0]).is_err());
        assert!(MultiSpectralImage::new(1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(MultiSpectralImage::new(1, 1, 2, vec![0.0, f32::INFINITY]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.msr1");
        let mut bytes = b"MSR1 1 1 1\n".to_vec();
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_msr1(&path).is_err());
    }

    #[test]
    fn single_band_is_flagged_not_fatal() {
        let img = ramp(1, 2, 2);
        assert!(img.single_band());
        assert!(!ramp(2, 2, 2).single_band());
    }
}

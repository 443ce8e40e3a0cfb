use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SRS1";
const HEADER_LEN: usize = 4 + 1 + 12;

/// Element types storable in a raster file.
pub trait RasterSample: Copy + Default {
    const CODE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl RasterSample for f32 {
    const CODE: u8 = 0;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl RasterSample for u8 {
    const CODE: u8 = 1;
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// `H × W × C` raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: RasterSample> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Little-endian `{"SRS1", dtype, H, W, C}` header then samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * T::SIZE);
        out.extend_from_slice(MAGIC);
        out.push(T::CODE);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.put(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Dataset("raster header missing or bad magic".into()));
        }
        if bytes[4] != T::CODE {
            return Err(Error::Dataset(format!(
                "raster dtype code {} does not match expected {}",
                bytes[4],
                T::CODE
            )));
        }
        let dim = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (h, w, c) = (dim(5), dim(9), dim(13));
        let n = h * w * c;
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * T::SIZE {
            return Err(Error::Dataset(format!(
                "raster body has {} bytes, expected {}",
                body.len(),
                n * T::SIZE
            )));
        }
        let data = body.chunks_exact(T::SIZE).map(T::take).collect();
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

//! Image cubes: a `bands x pixels` matrix with spatial shape, plus the
//! `SFC1` binary file format.
//!
//! Pixels are stored row-major inside each band and bands are stored one
//! after the other, so `data[b * n_pixels + r * width + c]` is the value of
//! band `b` at row `r`, column `c`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFC1";
const HEADER_LEN: usize = 4 + 3 * 8 + 1;

/// A single 2-D band, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("grid dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Multi-band image. Immutable once built; every constructor checks that the
/// payload matches the declared shape and that all entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCube {
    n_bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    band_labels: Option<Vec<String>>,
}

impl ImageCube {
    pub fn new(n_bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if n_bands == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "cube dimensions must be positive, got {n_bands}x{height}x{width}"
            )));
        }
        let expected = n_bands * height * width;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "cube {n_bands}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cube construction (entry {pos} is {})",
                data[pos]
            )));
        }
        Ok(ImageCube {
            n_bands,
            height,
            width,
            data,
            band_labels: None,
        })
    }

    pub fn zeros(n_bands: usize, height: usize, width: usize) -> Self {
        ImageCube {
            n_bands,
            height,
            width,
            data: vec![0.0; n_bands * height * width],
            band_labels: None,
        }
    }

    /// Builds a cube from one row-major grid per band.
    pub fn from_grids(grids: &[Grid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::shape("at least one band is required"))?;
        let (h, w) = (first.rows, first.cols);
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if g.rows != h || g.cols != w {
                return Err(Error::shape("all band grids must have the same size"));
            }
            data.extend_from_slice(&g.data);
        }
        ImageCube::new(grids.len(), h, w, data)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_bands {
            return Err(Error::shape(format!(
                "{} band labels for {} bands",
                labels.len(),
                self.n_bands
            )));
        }
        self.band_labels = Some(labels);
        Ok(self)
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band_labels(&self) -> Option<&[String]> {
        self.band_labels.as_deref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, i: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn bands(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_pixels())
    }

    /// Spectrum of pixel `j` (row-major pixel index).
    pub fn pixel(&self, j: usize) -> Vec<f64> {
        let n = self.n_pixels();
        (0..self.n_bands).map(|b| self.data[b * n + j]).collect()
    }

    pub fn same_shape(&self, other: &ImageCube) -> bool {
        self.n_bands == other.n_bands && self.height == other.height && self.width == other.width
    }

    pub fn band_as_grid(&self, i: usize) -> Result<Grid> {
        if i >= self.n_bands {
            return Err(Error::invalid(format!(
                "band index {i} out of range for {} bands",
                self.n_bands
            )));
        }
        Ok(Grid {
            rows: self.height,
            cols: self.width,
            data: self.band(i).to_vec(),
        })
    }

    pub fn grids(&self) -> Vec<Grid> {
        (0..self.n_bands)
            .map(|i| Grid {
                rows: self.height,
                cols: self.width,
                data: self.band(i).to_vec(),
            })
            .collect()
    }

    /// Applies `f` to every entry, keeping shape and labels.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ImageCube> {
        let mut out = ImageCube::new(
            self.n_bands,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )?;
        out.band_labels = self.band_labels.clone();
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_bands as u64).to_le_bytes());
        out.extend_from_slice(&(self.height as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        match &self.band_labels {
            None => out.push(0),
            Some(labels) => {
                out.push(1);
                let json = serde_json::to_vec(labels).expect("labels serialize");
                out.extend_from_slice(&(json.len() as u32).to_le_bytes());
                out.extend_from_slice(&json);
            }
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let read_u64 = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let n_bands = read_u64(4);
        let height = read_u64(12);
        let width = read_u64(20);
        if n_bands == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "zero dimension in header {n_bands}x{height}x{width}"
            )));
        }
        let mut offset = 28;
        let labels = match bytes[offset] {
            0 => {
                offset += 1;
                None
            }
            1 => {
                offset += 1;
                if bytes.len() < offset + 4 {
                    return Err(Error::Format("truncated label length".into()));
                }
                let len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
                offset += 4;
                if bytes.len() < offset + len {
                    return Err(Error::Format("truncated label block".into()));
                }
                let labels: Vec<String> = serde_json::from_slice(&bytes[offset..offset + len])
                    .map_err(|e| Error::Format(format!("label block: {e}")))?;
                offset += len;
                Some(labels)
            }
            f => return Err(Error::Format(format!("unknown label flag {f}"))),
        };
        let count = n_bands
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let payload = &bytes[offset..];
        if Some(payload.len()) != count.checked_mul(8) {
            return Err(Error::Corruption(format!(
                "header declares {count} values ({} bytes) but payload has {} bytes",
                count.saturating_mul(8),
                payload.len()
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corruption("payload contains non-finite values".into()));
        }
        let cube = ImageCube {
            n_bands: n_bands as usize,
            height: height as usize,
            width: width as usize,
            data,
            band_labels: None,
        };
        match labels {
            Some(l) => cube
                .with_labels(l)
                .map_err(|e| Error::Format(e.to_string())),
            None => Ok(cube),
        }
    }
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<ImageCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageCube::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_cube(cube: &ImageCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&cube.to_bytes())
        .map_err(|e| Error::io(path, e))
}

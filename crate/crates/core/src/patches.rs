//! Overlapping patch decomposition (`P*`) and count-normalized overlap-add
//! recomposition (`P`) of a single band. Patches wrap cyclically at the
//! image borders, so `P(P*(x)) = x` holds exactly everywhere.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cube::Grid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_side: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchGeometry {
    pub fn new(patch_side: usize, stride: usize, height: usize, width: usize) -> Result<Self> {
        let g = PatchGeometry {
            patch_side,
            stride,
            width,
            height,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.stride == 0 || self.stride > self.patch_side {
            return Err(Error::invalid(format!(
                "need 1 <= stride ({}) <= patch side ({})",
                self.stride, self.patch_side
            )));
        }
        if self.patch_side > self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "patch side {} exceeds image {}x{}",
                self.patch_side, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Pixels per patch.
    pub fn n_p(&self) -> usize {
        self.patch_side * self.patch_side
    }

    fn origins_along(&self, len: usize) -> usize {
        if self.patch_side == len {
            1
        } else {
            len.div_ceil(self.stride)
        }
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.origins_along(self.height), self.origins_along(self.width))
    }

    pub fn n_pat(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    /// Row-major pixel index of every entry of every patch; column `j` of the
    /// patch matrix reads `band[index[j * n_p + i]]` at row `i`.
    pub fn pixel_indices(&self) -> Vec<usize> {
        let (pr, pc) = self.patch_grid();
        let s = self.patch_side;
        let mut idx = Vec::with_capacity(self.n_pat() * self.n_p());
        for a in 0..pr {
            for b in 0..pc {
                let (r0, c0) = (a * self.stride, b * self.stride);
                for i in 0..s {
                    let r = (r0 + i) % self.height;
                    for j in 0..s {
                        idx.push(r * self.width + (c0 + j) % self.width);
                    }
                }
            }
        }
        idx
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.rows() != self.height || grid.cols() != self.width {
            return Err(Error::shape(format!(
                "geometry is {}x{}, band is {}x{}",
                self.height,
                self.width,
                grid.rows(),
                grid.cols()
            )));
        }
        Ok(())
    }
}

/// `P*`: `n_p x n_pat` matrix whose column `j` is patch `j`, vectorized
/// row-major, patches in row-major patch-grid order.
pub fn extract_patches(band: &Grid, geom: &PatchGeometry) -> Result<DMatrix<f64>> {
    geom.validate()?;
    geom.check_grid(band)?;
    Ok(extract_from_slice(band.as_slice(), geom, &geom.pixel_indices()))
}

pub(crate) fn extract_from_slice(band: &[f64], geom: &PatchGeometry, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_iterator(geom.n_p(), geom.n_pat(), idx.iter().map(|&p| band[p]))
}

/// `P`: averages overlapping patch entries back into a band.
pub fn average_patches(patches: &DMatrix<f64>, geom: &PatchGeometry) -> Result<Grid> {
    geom.validate()?;
    if patches.nrows() != geom.n_p() || patches.ncols() != geom.n_pat() {
        return Err(Error::shape(format!(
            "expected a {}x{} patch matrix, got {}x{}",
            geom.n_p(),
            geom.n_pat(),
            patches.nrows(),
            patches.ncols()
        )));
    }
    let idx = geom.pixel_indices();
    let counts = coverage_counts(geom);
    let data = average_into(patches.as_slice(), &idx, &counts, geom.height * geom.width);
    Grid::new(geom.height, geom.width, data)
}

pub(crate) fn average_into(values: &[f64], idx: &[usize], counts: &[u32], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for (&p, &v) in idx.iter().zip(values) {
        acc[p] += v;
    }
    acc.iter_mut().zip(counts).for_each(|(a, &c)| *a /= c as f64);
    acc
}

/// Number of patches covering each pixel, row-major.
pub fn coverage_counts(geom: &PatchGeometry) -> Vec<u32> {
    let mut counts = vec![0u32; geom.height * geom.width];
    for p in geom.pixel_indices() {
        counts[p] += 1;
    }
    counts
}

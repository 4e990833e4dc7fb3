//! PCA subspace of the hyperspectral pixels and the projection /
//! reconstruction maps between full spectral space and the subspace.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cube::{read_cube, write_cube, ImageCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// `m_lambda x dim`, orthonormal columns.
    h: DMatrix<f64>,
    /// All eigenvalues of the empirical covariance, descending.
    eigenvalues: Vec<f64>,
    /// Centering vector; all zeros when learned without centering.
    mean: Vec<f64>,
    centered: bool,
}

impl SubspaceBasis {
    pub fn from_parts(
        h: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        mean: Vec<f64>,
        centered: bool,
    ) -> Result<Self> {
        if h.nrows() != mean.len() || eigenvalues.len() != h.nrows() || h.ncols() == 0 {
            return Err(Error::shape("inconsistent subspace basis parts"));
        }
        if h.ncols() > h.nrows() {
            return Err(Error::shape("subspace dimension exceeds band count"));
        }
        Ok(SubspaceBasis {
            h,
            eigenvalues,
            mean,
            centered,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn n_bands(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn energy_fraction(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.dim()].iter().sum::<f64>() / total
    }

    /// `U = H^T (X - mean 1^T)`.
    pub fn project(&self, cube: &ImageCube) -> Result<ImageCube> {
        if cube.n_bands() != self.n_bands() {
            return Err(Error::shape(format!(
                "basis has {} bands, cube has {}",
                self.n_bands(),
                cube.n_bands()
            )));
        }
        let n = cube.n_pixels();
        let mut out = vec![0.0; self.dim() * n];
        for (b, band) in cube.bands().enumerate() {
            let m = self.mean[b];
            for k in 0..self.dim() {
                let hk = self.h[(b, k)];
                let dst = &mut out[k * n..(k + 1) * n];
                dst.iter_mut().zip(band).for_each(|(o, v)| *o += hk * (v - m));
            }
        }
        ImageCube::new(self.dim(), cube.height(), cube.width(), out)
    }

    /// `X = H U + mean 1^T`.
    pub fn reconstruct(&self, u: &ImageCube) -> Result<ImageCube> {
        if u.n_bands() != self.dim() {
            return Err(Error::shape(format!(
                "basis has dimension {}, cube has {} bands",
                self.dim(),
                u.n_bands()
            )));
        }
        let n = u.n_pixels();
        let mut out = vec![0.0; self.n_bands() * n];
        for b in 0..self.n_bands() {
            let dst = &mut out[b * n..(b + 1) * n];
            dst.iter_mut().for_each(|o| *o = self.mean[b]);
            for (k, band) in u.bands().enumerate() {
                let hk = self.h[(b, k)];
                dst.iter_mut().zip(band).for_each(|(o, v)| *o += hk * v);
            }
        }
        ImageCube::new(self.n_bands(), u.height(), u.width(), out)
    }

    /// Writes `H` as a `dim`-band cube of height 1 and width `m_lambda`, with
    /// mean and eigenvalues in a JSON sidecar.
    pub fn save(&self, cube_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (m, k) = (self.n_bands(), self.dim());
        let data: Vec<f64> = (0..k).flat_map(|c| (0..m).map(move |r| (r, c))).map(|(r, c)| self.h[(r, c)]).collect();
        write_cube(&ImageCube::new(k, 1, m, data)?, cube_path)?;
        let sidecar = BasisSidecar {
            mean: self.mean.clone(),
            eigenvalues: self.eigenvalues.clone(),
            energy_fraction: self.energy_fraction(),
            centered: self.centered,
        };
        let json_path = json_path.as_ref();
        fs::write(json_path, serde_json::to_vec_pretty(&sidecar)?)
            .map_err(|e| Error::io(json_path, e))
    }

    pub fn load(cube_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<Self> {
        let cube = read_cube(cube_path)?;
        let json_path = json_path.as_ref();
        let bytes = fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
        let sidecar: BasisSidecar = serde_json::from_slice(&bytes)?;
        let (k, m) = (cube.n_bands(), cube.width());
        let h = DMatrix::from_fn(m, k, |r, c| cube.band(c)[r]);
        SubspaceBasis::from_parts(h, sidecar.eigenvalues, sidecar.mean, sidecar.centered)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisSidecar {
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    energy_fraction: f64,
    centered: bool,
}

/// Empirical (1/n) covariance of the pixel spectra and the centering vector.
pub fn pixel_covariance(cube: &ImageCube, center: bool) -> (DMatrix<f64>, Vec<f64>) {
    let (m, n) = (cube.n_bands(), cube.n_pixels());
    let mean: Vec<f64> = if center {
        cube.bands().map(|b| b.iter().sum::<f64>() / n as f64).collect()
    } else {
        vec![0.0; m]
    };
    let centered: Vec<Vec<f64>> = cube
        .bands()
        .zip(&mean)
        .map(|(b, mu)| b.iter().map(|v| v - mu).collect())
        .collect();
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let s: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            cov[(i, j)] = s / n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (cov, mean)
}

pub fn learn_pca(hs: &ImageCube, dim: usize, center: bool) -> Result<SubspaceBasis> {
    let m = hs.n_bands();
    if dim == 0 || dim > m {
        return Err(Error::invalid(format!(
            "subspace dimension {dim} outside [1, {m}]"
        )));
    }
    if hs.n_pixels() < dim {
        return Err(Error::invalid(format!(
            "{} pixels cannot support a {dim}-dimensional subspace",
            hs.n_pixels()
        )));
    }
    let (cov, mean) = pixel_covariance(hs, center);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();

    let mut h = DMatrix::zeros(m, dim);
    for (k, &i) in order.iter().take(dim).enumerate() {
        let v = eig.eigenvectors.column(i);
        let mut lead = 0;
        for r in 1..m {
            if v[r].abs() > v[lead].abs() {
                lead = r;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            h[(r, k)] = sign * v[r];
        }
    }
    if eigenvalues[dim - 1] <= 1e-12 * eigenvalues[0].max(f64::MIN_POSITIVE) {
        log::warn!(
            "pixel covariance has rank below the requested subspace dimension {dim}; \
             trailing components carry no energy"
        );
    }
    SubspaceBasis::from_parts(h, eigenvalues, mean, center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(b: usize, h: usize, w: usize, seed: u64) -> ImageCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageCube::new(b, h, w, (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn max_abs_diff(a: &ImageCube, b: &ImageCube) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn orthonormal_and_sorted() {
        let x = random_cube(8, 6, 6, 1);
        let basis = learn_pca(&x, 4, true).unwrap();
        let gram = basis.h().transpose() * basis.h();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - e).abs() < 1e-10);
            }
        }
        assert!(basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        assert!(basis.eigenvalues().iter().all(|v| *v >= 0.0));
        // sign convention: largest-magnitude entry positive
        for k in 0..4 {
            let col = basis.h().column(k);
            let lead = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn eigenvalue_sum_is_covariance_trace() {
        let x = random_cube(6, 5, 7, 2);
        let basis = learn_pca(&x, 2, true).unwrap();
        let (cov, _) = pixel_covariance(&x, true);
        let s: f64 = basis.eigenvalues().iter().sum();
        assert!((s - cov.trace()).abs() <= 1e-8 * cov.trace());
    }

    #[test]
    fn rank_one_data_is_captured_exactly() {
        let dir = [0.2, 0.5, 0.1, 0.7];
        let offset = [1.0, 2.0, 3.0, 4.0];
        let t: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let data: Vec<f64> = (0..4).flat_map(|b| t.iter().map(move |s| offset[b] + s * dir[b])).collect();
        let x = ImageCube::new(4, 4, 5, data).unwrap();
        let basis = learn_pca(&x, 1, true).unwrap();
        assert!((basis.energy_fraction() - 1.0).abs() < 1e-12);
        let back = basis.reconstruct(&basis.project(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn projection_round_trips() {
        let x = random_cube(5, 4, 4, 3);
        let basis = learn_pca(&x, 3, true).unwrap();
        let u = random_cube(3, 4, 4, 4);
        let pu = basis.project(&basis.reconstruct(&u).unwrap()).unwrap();
        assert!(max_abs_diff(&pu, &u) < 1e-10);

        let mean_img = ImageCube::new(
            5,
            2,
            2,
            basis.mean().iter().flat_map(|m| std::iter::repeat(*m).take(4)).collect(),
        )
        .unwrap();
        assert!(basis.project(&mean_img).unwrap().data().iter().all(|v| v.abs() < 1e-14));

        let in_span = basis.reconstruct(&u).unwrap();
        let again = basis.reconstruct(&basis.project(&in_span).unwrap()).unwrap();
        assert!(max_abs_diff(&again, &in_span) < 1e-10);
        assert!(basis.project(&random_cube(4, 2, 2, 0)).is_err());
    }

    #[test]
    fn projection_contracts_centered_norm() {
        let x = random_cube(6, 5, 5, 5);
        let basis = learn_pca(&x, 2, true).unwrap();
        let u = basis.project(&x).unwrap();
        let centered: f64 = x
            .bands()
            .zip(basis.mean())
            .flat_map(|(b, m)| b.iter().map(move |v| (v - m).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!(u.frobenius_norm() <= centered + 1e-12);
    }

    #[test]
    fn uncentered_variant_uses_zero_mean() {
        let x = random_cube(4, 3, 3, 6);
        let basis = learn_pca(&x, 2, false).unwrap();
        assert!(basis.mean().iter().all(|m| *m == 0.0));
        assert!(!basis.centered());
    }

    #[test]
    fn invalid_dimensions() {
        let x = random_cube(4, 1, 2, 7);
        assert!(learn_pca(&x, 0, true).is_err());
        assert!(learn_pca(&x, 5, true).is_err());
        assert!(learn_pca(&x, 3, true).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = random_cube(5, 4, 4, 8);
        let basis = learn_pca(&x, 2, true).unwrap();
        let (c, j) = (dir.path().join("basis.sfc"), dir.path().join("basis.json"));
        basis.save(&c, &j).unwrap();
        assert_eq!(SubspaceBasis::load(&c, &j).unwrap(), basis);
    }
}

//! Fusion quality metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::{Error, Result};

fn check(x: &ImageCube, y: &ImageCube) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.n_bands(),
            x.height(),
            x.width(),
            y.n_bands(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// `||X - X_hat||_F^2 / (n m)`. Despite the name this is a mean squared error.
pub fn rmse(x: &ImageCube, x_hat: &ImageCube) -> Result<f64> {
    check(x, x_hat)?;
    let s: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.data().len() as f64)
}

/// Square root of [`rmse`].
pub fn rmse_sqrt(x: &ImageCube, x_hat: &ImageCube) -> Result<f64> {
    rmse(x, x_hat).map(f64::sqrt)
}

/// Square-rooted mean squared error of every band.
pub fn per_band_rmse(x: &ImageCube, x_hat: &ImageCube) -> Result<Vec<f64>> {
    check(x, x_hat)?;
    Ok(x.bands()
        .zip(x_hat.bands())
        .map(|(a, b)| {
            let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            (s / a.len() as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamResult {
    pub mean_degrees: f64,
    /// Pixels where either spectrum has zero norm; excluded from the mean.
    pub skipped: usize,
}

/// Mean spectral angle in degrees. Zero when every pixel was skipped.
pub fn sam(x: &ImageCube, x_hat: &ImageCube) -> Result<SamResult> {
    check(x, x_hat)?;
    let n = x.n_pixels();
    let mut nx = vec![0.0; n];
    let mut ny = vec![0.0; n];
    for (a, b) in x.bands().zip(x_hat.bands()) {
        for j in 0..n {
            nx[j] += a[j] * a[j];
            ny[j] += b[j] * b[j];
        }
    }
    for v in nx.iter_mut().chain(ny.iter_mut()) {
        *v = v.sqrt();
    }
    // angle = 2 atan2(|u - v|, |u + v|) for unit spectra u, v
    let mut diff = vec![0.0; n];
    let mut sum = vec![0.0; n];
    for (a, b) in x.bands().zip(x_hat.bands()) {
        for j in 0..n {
            if nx[j] == 0.0 || ny[j] == 0.0 {
                continue;
            }
            let (u, v) = (a[j] / nx[j], b[j] / ny[j]);
            diff[j] += (u - v) * (u - v);
            sum[j] += (u + v) * (u + v);
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for j in 0..n {
        if nx[j] == 0.0 || ny[j] == 0.0 {
            continue;
        }
        total += 2.0 * diff[j].sqrt().atan2(sum[j].sqrt()).to_degrees();
        counted += 1;
    }
    Ok(SamResult {
        mean_degrees: if counted == 0 { 0.0 } else { total / counted as f64 },
        skipped: n - counted,
    })
}

fn band_uiqi(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        va += (p - ma) * (p - ma);
        vb += (q - mb) * (q - mb);
        cab += (p - ma) * (q - mb);
    }
    va /= n;
    vb /= n;
    cab /= n;
    let den = (va + vb) * (ma * ma + mb * mb);
    if den == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    4.0 * cab * ma * mb / den
}

/// Band-averaged universal image quality index, computed over each whole
/// band. A band pair with a vanishing denominator scores 1 when identical
/// and 0 otherwise.
pub fn uiqi(x: &ImageCube, x_hat: &ImageCube) -> Result<f64> {
    check(x, x_hat)?;
    let s: f64 = x.bands().zip(x_hat.bands()).map(|(a, b)| band_uiqi(a, b)).sum();
    Ok(s / x.n_bands() as f64)
}

/// `100 (m/n) sqrt(mean_i (RMSE_i / mu_i)^2)` with square-rooted per-band
/// errors and reference band means `mu_i`.
pub fn ergas(x: &ImageCube, x_hat: &ImageCube, m_over_n: f64) -> Result<f64> {
    let per_band = per_band_rmse(x, x_hat)?;
    let mut s = 0.0;
    for (i, (band, r)) in x.bands().zip(&per_band).enumerate() {
        let mu = band.iter().sum::<f64>() / band.len() as f64;
        if mu == 0.0 {
            return Err(Error::Degenerate(format!("reference band {i} has zero mean")));
        }
        s += (r / mu).powi(2);
    }
    Ok(100.0 * m_over_n * (s / per_band.len() as f64).sqrt())
}

/// Mean absolute deviation.
pub fn dd(x: &ImageCube, x_hat: &ImageCube) -> Result<f64> {
    check(x, x_hat)?;
    let s: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.data().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse_paper: f64,
    pub rmse_sqrt: f64,
    pub sam_deg: f64,
    pub uiqi: f64,
    pub ergas: f64,
    pub dd: f64,
    pub per_band_rmse: Vec<f64>,
    pub sam_skipped_pixels: usize,
    pub resolution_ratio: f64,
}

impl MetricReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Every metric at once; `m_over_n` is the pixel-count ratio used by ERGAS.
pub fn evaluate(x: &ImageCube, x_hat: &ImageCube, m_over_n: f64) -> Result<MetricReport> {
    let mse = rmse(x, x_hat)?;
    let s = sam(x, x_hat)?;
    Ok(MetricReport {
        rmse_paper: mse,
        rmse_sqrt: mse.sqrt(),
        sam_deg: s.mean_degrees,
        uiqi: uiqi(x, x_hat)?,
        ergas: ergas(x, x_hat, m_over_n)?,
        dd: dd(x, x_hat)?,
        per_band_rmse: per_band_rmse(x, x_hat)?,
        sam_skipped_pixels: s.skipped,
        resolution_ratio: m_over_n,
    })
}

//! Rough subspace estimate from the MS image: interpolated HS prior mean plus
//! a linear correction driven by the MS innovation.

use nalgebra::DMatrix;

use crate::cube::ImageCube;
use crate::error::{Error, Result};
use crate::observation::{blur_bands, downsample, BlurKernel, ObservationModel};
use crate::subspace::SubspaceBasis;

/// Default smoothing window: `d + 1` rounded up to odd.
pub fn default_window(d: usize) -> usize {
    if d % 2 == 0 {
        d + 1
    } else {
        d + 2
    }
}

/// Cyclic bilinear interpolation onto a grid `d` times larger. Sample `(i, j)`
/// sits at full-resolution pixel `(phase.0 + i d, phase.1 + j d)`.
pub fn interpolate_hs(y_h: &ImageCube, d: usize, phase: (usize, usize)) -> Result<ImageCube> {
    if d == 0 || phase.0 >= d || phase.1 >= d {
        return Err(Error::invalid("invalid decimation factor or phase"));
    }
    let (lh, lw) = (y_h.height(), y_h.width());
    let (h, w) = (lh * d, lw * d);
    let axis = |len: usize, low: usize, p: usize| -> Vec<(usize, usize, f64)> {
        (0..len)
            .map(|r| {
                let t = (r as f64 - p as f64) / d as f64;
                let f = t.floor();
                let i0 = (f as isize).rem_euclid(low as isize) as usize;
                ((i0), (i0 + 1) % low, t - f)
            })
            .collect()
    };
    let rows = axis(h, lh, phase.0);
    let cols = axis(w, lw, phase.1);
    let mut out = Vec::with_capacity(y_h.n_bands() * h * w);
    for band in y_h.bands() {
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = (1.0 - fc) * band[r0 * lw + c0] + fc * band[r0 * lw + c1];
                let bot = (1.0 - fc) * band[r1 * lw + c0] + fc * band[r1 * lw + c1];
                out.push((1.0 - fr) * top + fr * bot);
            }
        }
    }
    ImageCube::new(y_h.n_bands(), h, w, out)
}

/// Cyclic box smoothing with an odd window.
pub fn smooth_ms(y_m: &ImageCube, window: usize) -> Result<ImageCube> {
    if window % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window {window} must be odd")));
    }
    blur_bands(y_m, &BlurKernel::boxcar(window)?)
}

fn centered_columns(cube: &ImageCube) -> DMatrix<f64> {
    // pixels x bands, each column centered
    let n = cube.n_pixels();
    let mut m = DMatrix::from_column_slice(n, cube.n_bands(), cube.data());
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

/// Prior means and global residual covariances of the rough estimator.
#[derive(Debug, Clone)]
pub struct RoughEstimatorStats {
    pub prior_mean_u: ImageCube,
    pub prior_mean_y: ImageCube,
    pub c_uy: DMatrix<f64>,
    /// Includes the ridge.
    pub c_yy: DMatrix<f64>,
    /// `C_uy C_yy^-1`.
    pub gain: DMatrix<f64>,
}

impl RoughEstimatorStats {
    /// Covariances are estimated at HS resolution, pairing the projected HS
    /// pixels with the MS image passed through the spatial degradation.
    pub fn fit(
        y_h: &ImageCube,
        y_m: &ImageCube,
        basis: &SubspaceBasis,
        model: &ObservationModel,
        window: usize,
    ) -> Result<Self> {
        let d = model.d;
        if y_m.height() != y_h.height() * d || y_m.width() != y_h.width() * d {
            return Err(Error::shape(format!(
                "MS {}x{} is not {d} times HS {}x{}",
                y_m.height(),
                y_m.width(),
                y_h.height(),
                y_h.width()
            )));
        }
        if y_m.n_bands() != model.response.n_out() {
            return Err(Error::shape("MS band count does not match the response"));
        }
        let u_h = basis.project(y_h)?;
        let prior_mean_u = interpolate_hs(&u_h, d, model.phase)?;
        let prior_mean_y = smooth_ms(y_m, window)?;

        let y_low = downsample(&blur_bands(y_m, &model.blur)?, d, model.phase)?;
        let ru = centered_columns(&u_h);
        let ry = centered_columns(&y_low);
        let m = u_h.n_pixels() as f64;
        let c_uy = ru.transpose() * &ry / m;
        let mut c_yy = ry.transpose() * &ry / m;
        let n_l = c_yy.nrows();
        let trace = c_yy.trace();
        let gain = if trace > 0.0 {
            let ridge = 1e-8 * trace / n_l as f64;
            for i in 0..n_l {
                c_yy[(i, i)] += ridge;
            }
            let chol = c_yy.clone().cholesky().ok_or_else(|| {
                Error::Singular(format!("MS covariance not positive definite (trace {trace:e})"))
            })?;
            // gain = C_uy C_yy^-1  <=>  C_yy gain^T = C_uy^T
            chol.solve(&c_uy.transpose()).transpose()
        } else {
            log::warn!("MS image has no spatial variability; rough estimate falls back to the prior mean");
            DMatrix::zeros(c_uy.nrows(), n_l)
        };
        if gain.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rough estimator gain".into()));
        }
        Ok(RoughEstimatorStats {
            prior_mean_u,
            prior_mean_y,
            c_uy,
            c_yy,
            gain,
        })
    }

    /// `E[u] + G (y - E[y])` at every pixel.
    pub fn apply(&self, y_m: &ImageCube) -> Result<ImageCube> {
        if !y_m.same_shape(&self.prior_mean_y) {
            return Err(Error::shape("MS image does not match the fitted statistics"));
        }
        let n = y_m.n_pixels();
        let innov = DMatrix::from_fn(y_m.n_bands(), n, |b, j| {
            y_m.band(b)[j] - self.prior_mean_y.band(b)[j]
        });
        let corr = &self.gain * innov;
        let mut out = self.prior_mean_u.data().to_vec();
        for (k, chunk) in out.chunks_exact_mut(n).enumerate() {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v += corr[(k, j)];
            }
        }
        ImageCube::new(
            self.prior_mean_u.n_bands(),
            self.prior_mean_u.height(),
            self.prior_mean_u.width(),
            out,
        )
    }
}

/// Rough estimate `U~` in subspace coordinates at full resolution.
pub fn rough_estimate(
    y_h: &ImageCube,
    y_m: &ImageCube,
    basis: &SubspaceBasis,
    model: &ObservationModel,
    window: usize,
) -> Result<ImageCube> {
    RoughEstimatorStats::fit(y_h, y_m, basis, model, window)?.apply(y_m)
}

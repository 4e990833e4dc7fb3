//! Degradation model: cyclic blur, decimation, spectral response and
//! band-dependent Gaussian noise, plus the synthetic reference generator used
//! to build test scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::{Error, Result};

/// Odd-sized, 180-degree symmetric 2-D convolution kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {size} must be odd")));
        }
        if taps.len() != size * size {
            return Err(Error::shape(format!(
                "kernel {size}x{size} needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("kernel taps".into()));
        }
        let sum: f64 = taps.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("kernel taps must have a positive sum"));
        }
        let scale = taps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let n = taps.len();
        for i in 0..n {
            if (taps[i] - taps[n - 1 - i]).abs() > 1e-12 * scale {
                return Err(Error::invalid(
                    "kernel must be symmetric under 180-degree rotation",
                ));
            }
        }
        Ok(BlurKernel { size, taps })
    }

    /// Identity kernel.
    pub fn delta() -> Self {
        BlurKernel {
            size: 1,
            taps: vec![1.0],
        }
    }

    /// `exp(-sqrt(r^2 + c^2) / scale)` normalized to unit sum.
    pub fn exponential(size: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::invalid("exponential kernel scale must be positive"));
        }
        if size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {size} must be odd")));
        }
        let h = (size / 2) as f64;
        let mut taps = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let (dr, dc) = (r as f64 - h, c as f64 - h);
                taps.push((-(dr * dr + dc * dc).sqrt() / scale).exp());
            }
        }
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        BlurKernel::new(size, taps)
    }

    /// Flat `window x window` averaging kernel.
    pub fn boxcar(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("box window must be at least 1"));
        }
        let w = 1.0 / (window * window) as f64;
        BlurKernel::new(window, vec![w; window * window])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    #[inline]
    pub fn tap(&self, dr: isize, dc: isize) -> f64 {
        let h = (self.size / 2) as isize;
        self.taps[((dr + h) as usize) * self.size + (dc + h) as usize]
    }

    /// The kernel laid out on a `rows x cols` periodic grid with its centre
    /// at the origin (the first column of the circulant operator).
    pub fn embed(&self, rows: usize, cols: usize) -> Vec<f64> {
        let h = (self.size / 2) as isize;
        let mut out = vec![0.0; rows * cols];
        for dr in -h..=h {
            for dc in -h..=h {
                let r = dr.rem_euclid(rows as isize) as usize;
                let c = dc.rem_euclid(cols as isize) as usize;
                out[r * cols + c] += self.tap(dr, dc);
            }
        }
        out
    }
}

/// Non-negative `n_out x n_in` spectral mixing matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResponse {
    n_out: usize,
    n_in: usize,
    weights: Vec<f64>,
    /// Half-open input band range covered by each output band, when known.
    ranges: Option<Vec<(usize, usize)>>,
}

impl SpectralResponse {
    pub fn new(n_out: usize, n_in: usize, weights: Vec<f64>) -> Result<Self> {
        if n_out == 0 || n_in == 0 || weights.len() != n_out * n_in {
            return Err(Error::shape(format!(
                "response {n_out}x{n_in} needs {} weights, got {}",
                n_out * n_in,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("response weights must be finite and non-negative"));
        }
        for j in 0..n_out {
            if weights[j * n_in..(j + 1) * n_in].iter().all(|&w| w == 0.0) {
                return Err(Error::invalid(format!("response row {j} is all zero")));
            }
        }
        Ok(SpectralResponse {
            n_out,
            n_in,
            weights,
            ranges: None,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        (0..n).for_each(|i| w[i * n + i] = 1.0);
        let mut r = SpectralResponse::new(n, n, w).expect("identity is valid");
        r.ranges = Some((0..n).map(|i| (i, i + 1)).collect());
        r
    }

    /// Contiguous box filters partitioning `n_in` bands into `n_out` groups,
    /// each row averaging its group.
    pub fn box_filters(n_in: usize, n_out: usize) -> Result<Self> {
        if n_out == 0 || n_out > n_in {
            return Err(Error::invalid(format!(
                "cannot partition {n_in} bands into {n_out} boxes"
            )));
        }
        let mut weights = vec![0.0; n_out * n_in];
        let mut ranges = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let lo = j * n_in / n_out;
            let hi = (j + 1) * n_in / n_out;
            let w = 1.0 / (hi - lo) as f64;
            for k in lo..hi {
                weights[j * n_in + k] = w;
            }
            ranges.push((lo, hi));
        }
        let mut r = SpectralResponse::new(n_out, n_in, weights)?;
        r.ranges = Some(ranges);
        Ok(r)
    }

    /// Single panchromatic band averaging all inputs.
    pub fn panchromatic(n_in: usize) -> Result<Self> {
        SpectralResponse::box_filters(n_in, 1)
    }

    /// Reads the matrix from a cube with `n_out` bands, height 1 and width `n_in`.
    pub fn from_cube(cube: &ImageCube) -> Result<Self> {
        if cube.height() != 1 {
            return Err(Error::shape("response cube must have height 1"));
        }
        SpectralResponse::new(cube.n_bands(), cube.width(), cube.data().to_vec())
    }

    pub fn to_cube(&self) -> ImageCube {
        ImageCube::new(self.n_out, 1, self.n_in, self.weights.clone()).expect("valid response")
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        self.weights[j * self.n_in + k]
    }

    pub fn ranges(&self) -> Option<&[(usize, usize)]> {
        self.ranges.as_deref()
    }

    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.n_out, self.n_in, &self.weights)
    }
}

/// Per-band noise variances of both sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub hs_variances: Vec<f64>,
    pub ms_variances: Vec<f64>,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self
            .hs_variances
            .iter()
            .chain(&self.ms_variances)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::invalid("noise variances must be non-negative and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub blur: BlurKernel,
    pub d: usize,
    pub phase: (usize, usize),
    pub response: SpectralResponse,
    pub noise: NoiseSpec,
}

impl ObservationModel {
    /// Checks the model against a full-resolution image of the given shape.
    pub fn validate(&self, n_bands: usize, height: usize, width: usize) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("down-sampling factor must be at least 1"));
        }
        if self.phase.0 >= self.d || self.phase.1 >= self.d {
            return Err(Error::invalid(format!(
                "phase {:?} outside [0, {})^2",
                self.phase, self.d
            )));
        }
        if height % self.d != 0 || width % self.d != 0 {
            return Err(Error::shape(format!(
                "image {height}x{width} not divisible by d = {}",
                self.d
            )));
        }
        if self.blur.size() > height.min(width) {
            return Err(Error::shape("blur kernel larger than image"));
        }
        if self.response.n_in() != n_bands {
            return Err(Error::shape(format!(
                "response expects {} bands, image has {n_bands}",
                self.response.n_in()
            )));
        }
        if self.noise.hs_variances.len() != n_bands
            || self.noise.ms_variances.len() != self.response.n_out()
        {
            return Err(Error::shape("noise variance lists do not match band counts"));
        }
        self.noise.validate()
    }

    /// Pixel-sampling mask of the decimation operator at full resolution.
    pub fn sampling_mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut mask = vec![false; height * width];
        for r in (self.phase.0..height).step_by(self.d) {
            for c in (self.phase.1..width).step_by(self.d) {
                mask[r * width + c] = true;
            }
        }
        mask
    }
}

/// How a decibel SNR is turned into a per-pixel noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrConvention {
    /// Signal power is the mean squared value of the band.
    #[default]
    MeanPower,
    /// Signal power is the total band energy (squared Frobenius norm).
    BandEnergy,
}

pub fn blur_bands(cube: &ImageCube, kernel: &BlurKernel) -> Result<ImageCube> {
    let (h, w) = (cube.height(), cube.width());
    if kernel.size() > h.min(w) {
        return Err(Error::shape(format!(
            "kernel {}x{} larger than image {h}x{w}",
            kernel.size(),
            kernel.size()
        )));
    }
    let half = (kernel.size() / 2) as isize;
    let mut out = Vec::with_capacity(cube.data().len());
    let mut band_out = vec![0.0; h * w];
    for band in cube.bands() {
        band_out.iter_mut().for_each(|v| *v = 0.0);
        for dr in -half..=half {
            for dc in -half..=half {
                let t = kernel.tap(dr, dc);
                if t == 0.0 {
                    continue;
                }
                for r in 0..h {
                    let sr = (r as isize - dr).rem_euclid(h as isize) as usize;
                    let src = &band[sr * w..(sr + 1) * w];
                    let dst = &mut band_out[r * w..(r + 1) * w];
                    for (c, o) in dst.iter_mut().enumerate() {
                        let sc = (c as isize - dc).rem_euclid(w as isize) as usize;
                        *o += t * src[sc];
                    }
                }
            }
        }
        out.extend_from_slice(&band_out);
    }
    ImageCube::new(cube.n_bands(), h, w, out)
}

pub fn downsample(cube: &ImageCube, d: usize, phase: (usize, usize)) -> Result<ImageCube> {
    check_decimation(cube.height(), cube.width(), d, phase)?;
    let (h, w) = (cube.height(), cube.width());
    let (lh, lw) = (h / d, w / d);
    let mut out = Vec::with_capacity(cube.n_bands() * lh * lw);
    for band in cube.bands() {
        for i in 0..lh {
            let r = phase.0 + i * d;
            for j in 0..lw {
                out.push(band[r * w + phase.1 + j * d]);
            }
        }
    }
    ImageCube::new(cube.n_bands(), lh, lw, out)
}

/// Adjoint of [`downsample`]: scatters samples into a zero full-resolution grid.
pub fn upsample_zero(cube: &ImageCube, d: usize, phase: (usize, usize)) -> Result<ImageCube> {
    if d == 0 || phase.0 >= d || phase.1 >= d {
        return Err(Error::invalid("invalid decimation factor or phase"));
    }
    let (lh, lw) = (cube.height(), cube.width());
    let (h, w) = (lh * d, lw * d);
    let mut out = vec![0.0; cube.n_bands() * h * w];
    for (b, band) in cube.bands().enumerate() {
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        for i in 0..lh {
            for j in 0..lw {
                dst[(phase.0 + i * d) * w + phase.1 + j * d] = band[i * lw + j];
            }
        }
    }
    ImageCube::new(cube.n_bands(), h, w, out)
}

fn check_decimation(h: usize, w: usize, d: usize, phase: (usize, usize)) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid("down-sampling factor must be at least 1"));
    }
    if phase.0 >= d || phase.1 >= d {
        return Err(Error::invalid(format!("phase {phase:?} outside [0, {d})^2")));
    }
    if h % d != 0 || w % d != 0 {
        return Err(Error::shape(format!("image {h}x{w} not divisible by d = {d}")));
    }
    Ok(())
}

pub fn spectral_degrade(cube: &ImageCube, response: &SpectralResponse) -> Result<ImageCube> {
    if response.n_in() != cube.n_bands() {
        return Err(Error::shape(format!(
            "response expects {} bands, cube has {}",
            response.n_in(),
            cube.n_bands()
        )));
    }
    let n = cube.n_pixels();
    let mut out = vec![0.0; response.n_out() * n];
    for j in 0..response.n_out() {
        let dst = &mut out[j * n..(j + 1) * n];
        for (k, band) in cube.bands().enumerate() {
            let wgt = response.weight(j, k);
            if wgt != 0.0 {
                dst.iter_mut().zip(band).for_each(|(o, v)| *o += wgt * v);
            }
        }
    }
    ImageCube::new(response.n_out(), cube.height(), cube.width(), out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-band RNG stream derived from a base seed.
pub(crate) fn band_rng(seed: u64, band: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(band as u64 + 1)))
}

pub fn add_noise(cube: &ImageCube, variances: &[f64], seed: u64) -> Result<ImageCube> {
    if variances.len() != cube.n_bands() {
        return Err(Error::shape(format!(
            "{} variances for {} bands",
            variances.len(),
            cube.n_bands()
        )));
    }
    if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("noise variances must be finite and non-negative"));
    }
    let mut out = Vec::with_capacity(cube.data().len());
    for (b, band) in cube.bands().enumerate() {
        let var = variances[b];
        if var == 0.0 {
            out.extend_from_slice(band);
            continue;
        }
        let normal = Normal::new(0.0, var.sqrt()).expect("positive std");
        let mut rng = band_rng(seed, b);
        out.extend(band.iter().map(|&v| v + normal.sample(&mut rng)));
    }
    ImageCube::new(cube.n_bands(), cube.height(), cube.width(), out)
}

fn signal_power(band: &[f64], convention: SnrConvention) -> f64 {
    let energy: f64 = band.iter().map(|v| v * v).sum();
    match convention {
        SnrConvention::BandEnergy => energy,
        SnrConvention::MeanPower => energy / band.len() as f64,
    }
}

/// `sigma^2_i = power_i / 10^(snr_i / 10)` for every band of `clean`.
pub fn snr_to_variance(
    clean: &ImageCube,
    snr_db: &[f64],
    convention: SnrConvention,
) -> Result<Vec<f64>> {
    if snr_db.len() != clean.n_bands() {
        return Err(Error::shape(format!(
            "{} SNR values for {} bands",
            snr_db.len(),
            clean.n_bands()
        )));
    }
    clean
        .bands()
        .zip(snr_db)
        .enumerate()
        .map(|(i, (band, snr))| {
            let p = signal_power(band, convention);
            if p <= 0.0 {
                return Err(Error::Degenerate(format!("band {i} has zero energy")));
            }
            Ok(p / 10f64.powf(snr / 10.0))
        })
        .collect()
}

pub fn variance_to_snr(
    clean: &ImageCube,
    variances: &[f64],
    convention: SnrConvention,
) -> Result<Vec<f64>> {
    if variances.len() != clean.n_bands() {
        return Err(Error::shape("variance list does not match band count"));
    }
    Ok(clean
        .bands()
        .zip(variances)
        .map(|(band, v)| 10.0 * (signal_power(band, convention) / v).log10())
        .collect())
}

#[derive(Debug, Clone)]
pub struct SimulatedScenario {
    pub y_h: ImageCube,
    pub y_m: ImageCube,
    /// Frobenius norm of the noise actually added to each observation.
    pub hs_noise_norm: f64,
    pub ms_noise_norm: f64,
    /// Sample variance of the realized noise, per band.
    pub hs_realized_variances: Vec<f64>,
    pub ms_realized_variances: Vec<f64>,
}

const MS_SEED_SALT: u64 = 0x6D73_5F6E_6F69_7365;

pub fn simulate_scenario(reference: &ImageCube, model: &ObservationModel) -> Result<SimulatedScenario> {
    model.validate(reference.n_bands(), reference.height(), reference.width())?;
    let clean_h = downsample(&blur_bands(reference, &model.blur)?, model.d, model.phase)?;
    let clean_m = spectral_degrade(reference, &model.response)?;
    let y_h = add_noise(&clean_h, &model.noise.hs_variances, model.noise.rng_seed)?;
    let y_m = add_noise(
        &clean_m,
        &model.noise.ms_variances,
        model.noise.rng_seed ^ MS_SEED_SALT,
    )?;
    let (hs_noise_norm, hs_realized_variances) = noise_stats(&clean_h, &y_h);
    let (ms_noise_norm, ms_realized_variances) = noise_stats(&clean_m, &y_m);
    Ok(SimulatedScenario {
        y_h,
        y_m,
        hs_noise_norm,
        ms_noise_norm,
        hs_realized_variances,
        ms_realized_variances,
    })
}

fn noise_stats(clean: &ImageCube, noisy: &ImageCube) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let per_band = clean
        .bands()
        .zip(noisy.bands())
        .map(|(c, y)| {
            let ss: f64 = c.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
            total += ss;
            ss / c.len() as f64
        })
        .collect();
    (total.sqrt(), per_band)
}

/// Parameters of the synthetic low-rank reference scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    #[serde(default = "default_endmembers")]
    pub endmembers: usize,
    #[serde(default = "default_regions")]
    pub regions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Intensity of a unit-reflectance pixel.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl SyntheticSpec {
    /// Default endmember count, region count and scale.
    pub fn new(width: usize, height: usize, bands: usize, seed: u64) -> Self {
        SyntheticSpec {
            width,
            height,
            bands,
            endmembers: default_endmembers(),
            regions: default_regions(),
            seed,
            scale: default_scale(),
        }
    }
}

fn default_scale() -> f64 {
    50.0
}

fn default_endmembers() -> usize {
    5
}

fn default_regions() -> usize {
    12
}

/// Smooth low-rank spectra mixed by piecewise-constant abundance maps with a
/// smooth illumination field. All values are positive.
pub fn synthetic_reference(spec: &SyntheticSpec) -> Result<ImageCube> {
    let SyntheticSpec {
        width,
        height,
        bands,
        endmembers,
        regions,
        seed,
        scale,
    } = *spec;
    if width == 0 || height == 0 || bands == 0 || endmembers == 0 || regions == 0 {
        return Err(Error::invalid("synthetic scene dimensions must be positive"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("synthetic scene scale must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));

    let spectra: Vec<Vec<f64>> = (0..endmembers)
        .map(|_| {
            let base = rng.random_range(0.05..0.2);
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.12..0.4),
                        rng.random_range(0.2..0.8),
                    )
                })
                .collect();
            (0..bands)
                .map(|k| {
                    let t = if bands > 1 { k as f64 / (bands - 1) as f64 } else { 0.5 };
                    base + bumps
                        .iter()
                        .map(|(c, s, a)| a * (-((t - c) / s).powi(2)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();

    let centres: Vec<(f64, f64)> = (0..regions)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
            )
        })
        .collect();
    let abundances: Vec<Vec<f64>> = (0..regions)
        .map(|_| {
            let raw: Vec<f64> = (0..endmembers)
                .map(|_| -rng.random_range(1e-3f64..1.0).ln())
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let (fr, fc, ph) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );

    let n = width * height;
    let mut data = vec![0.0; bands * n];
    for r in 0..height {
        for c in 0..width {
            // nearest centre on the torus
            let region = centres
                .iter()
                .enumerate()
                .map(|(i, &(cr, cc))| {
                    let dr = (r as f64 - cr).abs().min(height as f64 - (r as f64 - cr).abs());
                    let dc = (c as f64 - cc).abs().min(width as f64 - (c as f64 - cc).abs());
                    (i, dr * dr + dc * dc)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            let illum = 0.85
                + 0.15
                    * (std::f64::consts::TAU
                        * (fr * r as f64 / height as f64 + fc * c as f64 / width as f64)
                        + ph)
                        .sin();
            let p = r * width + c;
            for (e, spectrum) in spectra.iter().enumerate() {
                let a = abundances[region][e] * illum * scale;
                for k in 0..bands {
                    data[k * n + p] += a * spectrum[k];
                }
            }
        }
    }
    ImageCube::new(bands, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cube(b: usize, h: usize, w: usize, seed: u64) -> ImageCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageCube::new(b, h, w, (0..b * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn kernel_validation() {
        assert!(BlurKernel::new(2, vec![0.25; 4]).is_err());
        assert!(BlurKernel::new(3, vec![0.0; 9]).is_err());
        let asym = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5];
        assert!(BlurKernel::new(3, asym).is_err());
        let k = BlurKernel::exponential(5, 1.0).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-15);
        assert_eq!(k.tap(0, 0), k.taps().iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn delta_blur_is_identity() {
        let x = random_cube(2, 4, 5, 1);
        assert_eq!(blur_bands(&x, &BlurKernel::delta()).unwrap(), x);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = ImageCube::new(1, 6, 6, vec![2.5; 36]).unwrap();
        let y = blur_bands(&x, &BlurKernel::exponential(5, 1.0).unwrap()).unwrap();
        for v in y.data() {
            assert!((v - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn blur_rejects_oversized_kernel() {
        let x = random_cube(1, 4, 4, 2);
        assert!(blur_bands(&x, &BlurKernel::exponential(5, 1.0).unwrap()).is_err());
    }

    /// Dense circulant matrix assembled from impulse responses.
    fn impulse_matrix(h: usize, w: usize, k: &BlurKernel) -> Vec<Vec<f64>> {
        let n = h * w;
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                blur_bands(&ImageCube::new(1, h, w, e).unwrap(), k)
                    .unwrap()
                    .data()
                    .to_vec()
            })
            .collect()
    }

    #[test]
    fn blur_matches_dense_circulant_product() {
        let k = BlurKernel::new(3, vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]).unwrap();
        let x = random_cube(1, 4, 4, 3);
        // columns of the operator = responses to unit impulses
        let cols = impulse_matrix(4, 4, &k);
        let y = blur_bands(&x, &k).unwrap();
        for j in 0..16 {
            let dense: f64 = (0..16).map(|i| cols[i][j] * x.data()[i]).sum();
            assert!((dense - y.data()[j]).abs() < 1e-14);
        }
        // symmetric kernel gives a symmetric operator
        for i in 0..16 {
            for j in 0..16 {
                assert!((cols[i][j] - cols[j][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blur_is_linear_and_commutes_with_band_permutation() {
        let k = BlurKernel::exponential(3, 0.7).unwrap();
        let a = random_cube(2, 5, 5, 4);
        let b = random_cube(2, 5, 5, 5);
        let combo = ImageCube::new(
            2,
            5,
            5,
            a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
        )
        .unwrap();
        let (ba, bb, bc) = (
            blur_bands(&a, &k).unwrap(),
            blur_bands(&b, &k).unwrap(),
            blur_bands(&combo, &k).unwrap(),
        );
        for i in 0..50 {
            let expect = 2.0 * ba.data()[i] - 0.5 * bb.data()[i];
            assert!((bc.data()[i] - expect).abs() < 1e-13);
        }
        let swapped = ImageCube::new(2, 5, 5, [a.band(1), a.band(0)].concat()).unwrap();
        let bs = blur_bands(&swapped, &k).unwrap();
        assert_eq!(bs.band(0), ba.band(1));
        assert_eq!(bs.band(1), ba.band(0));
    }

    #[test]
    fn downsample_cases() {
        let x = random_cube(2, 4, 4, 6);
        assert_eq!(downsample(&x, 1, (0, 0)).unwrap(), x);
        let y = downsample(&x, 4, (0, 0)).unwrap();
        assert_eq!(y.n_pixels(), 1);
        assert_eq!(y.data()[0], x.band(0)[0]);
        let z = downsample(&x, 2, (1, 0)).unwrap();
        assert_eq!(z.band(0)[0], x.band(0)[4]);
        assert!(downsample(&random_cube(1, 5, 4, 0), 2, (0, 0)).is_err());
        assert!(downsample(&x, 2, (2, 0)).is_err());
    }

    #[test]
    fn decimation_adjoint_identity() {
        let x = random_cube(3, 8, 8, 7);
        for phase in [(0, 0), (1, 0), (1, 1)] {
            let sx = downsample(&x, 2, phase).unwrap();
            let ssts = downsample(&upsample_zero(&sx, 2, phase).unwrap(), 2, phase).unwrap();
            assert_eq!(ssts, sx);
        }
    }

    #[test]
    fn spectral_degrade_cases() {
        let x = random_cube(3, 2, 3, 8);
        assert_eq!(spectral_degrade(&x, &SpectralResponse::identity(3)).unwrap(), x);

        let pan = spectral_degrade(&x, &SpectralResponse::panchromatic(3).unwrap()).unwrap();
        for j in 0..6 {
            let mean = (x.band(0)[j] + x.band(1)[j] + x.band(2)[j]) / 3.0;
            assert!((pan.data()[j] - mean).abs() < 1e-15);
        }

        let w = vec![0.2, 0.3, 0.0, 0.0, 0.6, 0.9];
        let r = SpectralResponse::new(2, 3, w.clone()).unwrap();
        let y = spectral_degrade(&x, &r).unwrap();
        for j in 0..2 {
            for p in 0..6 {
                let direct: f64 = (0..3).map(|k| w[j * 3 + k] * x.band(k)[p]).sum();
                assert!((y.band(j)[p] - direct).abs() < 1e-15);
            }
        }
        assert!(spectral_degrade(&x, &SpectralResponse::identity(2)).is_err());
    }

    #[test]
    fn box_filters_partition_the_range() {
        let r = SpectralResponse::box_filters(16, 4).unwrap();
        assert_eq!(r.ranges().unwrap(), &[(0, 4), (4, 8), (8, 12), (12, 16)]);
        for j in 0..4 {
            let s: f64 = (0..16).map(|k| r.weight(j, k)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_pass_through_and_determinism() {
        let x = random_cube(2, 4, 4, 9);
        assert_eq!(add_noise(&x, &[0.0, 0.0], 5).unwrap(), x);
        let a = add_noise(&x, &[0.1, 0.2], 5).unwrap();
        let b = add_noise(&x, &[0.1, 0.2], 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_noise(&x, &[0.1, 0.2], 6).unwrap());
        assert!(add_noise(&x, &[0.1], 5).is_err());
    }

    #[test]
    fn noise_sample_variance_large_sample() {
        let x = ImageCube::zeros(1, 1000, 1000);
        let y = add_noise(&x, &[4.0], 11).unwrap();
        let n = y.data().len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 4.0).abs() / 4.0 < 0.05, "sample variance {var}");
    }

    #[test]
    fn snr_definition() {
        // band energy 100 over 1 pixel, both conventions agree
        let x = ImageCube::new(2, 1, 1, vec![10.0, 10.0]).unwrap();
        let v = snr_to_variance(&x, &[0.0, 10.0], SnrConvention::BandEnergy).unwrap();
        assert!((v[0] - 100.0).abs() < 1e-12);
        assert!((v[1] - 10.0).abs() < 1e-12);

        let y = ImageCube::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let total = snr_to_variance(&y, &[0.0], SnrConvention::BandEnergy).unwrap();
        let mean = snr_to_variance(&y, &[0.0], SnrConvention::MeanPower).unwrap();
        assert_eq!(total[0], 30.0);
        assert_eq!(mean[0], 7.5);

        assert!(snr_to_variance(&ImageCube::zeros(1, 2, 2), &[30.0], SnrConvention::MeanPower).is_err());
    }

    #[test]
    fn snr_round_trip() {
        let x = random_cube(4, 3, 3, 12);
        for conv in [SnrConvention::MeanPower, SnrConvention::BandEnergy] {
            let vars = vec![0.01, 0.5, 2.0, 1e-4];
            let snr = variance_to_snr(&x, &vars, conv).unwrap();
            let back = snr_to_variance(&x, &snr, conv).unwrap();
            for (a, b) in vars.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * a);
            }
        }
    }

    fn identity_model(bands: usize, seed: u64) -> ObservationModel {
        ObservationModel {
            blur: BlurKernel::delta(),
            d: 1,
            phase: (0, 0),
            response: SpectralResponse::identity(bands),
            noise: NoiseSpec {
                hs_variances: vec![0.0; bands],
                ms_variances: vec![0.0; bands],
                rng_seed: seed,
            },
        }
    }

    #[test]
    fn simulate_identity_operators() {
        let x = random_cube(3, 4, 4, 13);
        let s = simulate_scenario(&x, &identity_model(3, 0)).unwrap();
        assert_eq!(s.y_h, x);
        assert_eq!(s.y_m, x);
        assert_eq!(s.hs_noise_norm, 0.0);
    }

    #[test]
    fn simulate_is_linear_without_noise() {
        let x = random_cube(4, 8, 8, 14);
        let model = ObservationModel {
            blur: BlurKernel::exponential(5, 1.0).unwrap(),
            d: 4,
            phase: (0, 0),
            response: SpectralResponse::box_filters(4, 2).unwrap(),
            noise: NoiseSpec {
                hs_variances: vec![0.0; 4],
                ms_variances: vec![0.0; 2],
                rng_seed: 1,
            },
        };
        let a = simulate_scenario(&x, &model).unwrap();
        let b = simulate_scenario(&x.map(|v| 3.0 * v).unwrap(), &model).unwrap();
        for (u, v) in a.y_h.data().iter().zip(b.y_h.data()) {
            assert!((3.0 * u - v).abs() < 1e-13);
        }
        for (u, v) in a.y_m.data().iter().zip(b.y_m.data()) {
            assert!((3.0 * u - v).abs() < 1e-13);
        }
        assert_eq!(a.y_h.height(), 2);
    }

    #[test]
    fn pavia_like_configuration() {
        // 5x5 exponential blur, d = 4, 4 box bands, 35/30 dB
        let reference = synthetic_reference(&SyntheticSpec {
            width: 32,
            height: 32,
            bands: 16,
            endmembers: 5,
            regions: 8,
            seed: 3,
            scale: 1.0,
        })
        .unwrap();
        let blur = BlurKernel::exponential(5, 1.0).unwrap();
        let response = SpectralResponse::box_filters(16, 4).unwrap();
        let clean_h = downsample(&blur_bands(&reference, &blur).unwrap(), 4, (0, 0)).unwrap();
        let clean_m = spectral_degrade(&reference, &response).unwrap();
        let model = ObservationModel {
            blur,
            d: 4,
            phase: (0, 0),
            response,
            noise: NoiseSpec {
                hs_variances: snr_to_variance(&clean_h, &[35.0; 16], SnrConvention::MeanPower).unwrap(),
                ms_variances: snr_to_variance(&clean_m, &[30.0; 4], SnrConvention::MeanPower).unwrap(),
                rng_seed: 42,
            },
        };
        let s = simulate_scenario(&reference, &model).unwrap();
        assert_eq!((s.y_h.n_bands(), s.y_h.height(), s.y_h.width()), (16, 8, 8));
        assert_eq!((s.y_m.n_bands(), s.y_m.height(), s.y_m.width()), (4, 32, 32));
        let snr = variance_to_snr(&clean_h, &model.noise.hs_variances, SnrConvention::MeanPower).unwrap();
        assert!(snr.iter().all(|v| (v - 35.0).abs() < 1e-9));
    }

    #[test]
    fn synthetic_reference_is_positive_and_deterministic() {
        let spec = SyntheticSpec {
            width: 16,
            height: 12,
            bands: 6,
            endmembers: 3,
            regions: 5,
            seed: 9,
            scale: 1.0,
        };
        let a = synthetic_reference(&spec).unwrap();
        assert_eq!(a, synthetic_reference(&spec).unwrap());
        assert!(a.data().iter().all(|v| *v > 0.0));
        assert_eq!((a.n_bands(), a.height(), a.width()), (6, 12, 16));
    }

    #[test]
    fn sampling_mask_matches_downsample() {
        let model = ObservationModel {
            d: 2,
            phase: (1, 0),
            ..identity_model(1, 0)
        };
        let mask = model.sampling_mask(4, 4);
        let idx: Vec<usize> = (0..16).filter(|&i| mask[i]).collect();
        assert_eq!(idx, vec![4, 6, 12, 14]);
    }
}

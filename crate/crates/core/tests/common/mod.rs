#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specfuse::cube::ImageCube;
use specfuse::observation::{BlurKernel, NoiseSpec, ObservationModel, SpectralResponse};
use specfuse::patches::PatchGeometry;
use specfuse::solver::FusionProblem;
use specfuse::sparsedict::{omp_code, BandDictionary, Dictionary, DictionarySet};
use specfuse::subspace::{learn_pca, SubspaceBasis};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cube(b: usize, h: usize, w: usize, seed: u64) -> ImageCube {
    let mut r = rng(seed);
    let data = (0..b * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    ImageCube::new(b, h, w, data).unwrap()
}

pub fn cube_to_vec(c: &ImageCube) -> DVector<f64> {
    DVector::from_column_slice(c.data())
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Circulant convolution matrix built by index arithmetic:
/// `(B x)[r, c] = sum tap(dr, dc) x[r - dr, c - dc]`.
pub fn dense_blur(kernel: &BlurKernel, h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let half = (kernel.size() / 2) as isize;
    let mut b = DMatrix::zeros(n, n);
    for r in 0..h {
        for c in 0..w {
            for dr in -half..=half {
                for dc in -half..=half {
                    let sr = (r as isize - dr).rem_euclid(h as isize) as usize;
                    let sc = (c as isize - dc).rem_euclid(w as isize) as usize;
                    b[(r * w + c, sr * w + sc)] += kernel.tap(dr, dc);
                }
            }
        }
    }
    b
}

pub fn dense_sampling(h: usize, w: usize, d: usize, phase: (usize, usize)) -> DMatrix<f64> {
    let (lh, lw) = (h / d, w / d);
    let mut s = DMatrix::zeros(lh * lw, h * w);
    for i in 0..lh {
        for j in 0..lw {
            s[(i * lw + j, (phase.0 + i * d) * w + phase.1 + j * d)] = 1.0;
        }
    }
    s
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Every operator of the fusion objective as an explicit matrix acting on
/// `vec(U)` (band-major, `n * k` entries).
pub struct DenseOracle {
    pub a_h: DMatrix<f64>,
    pub c_h: DVector<f64>,
    pub a_m: DMatrix<f64>,
    pub c_m: DVector<f64>,
    pub w_h: DVector<f64>,
    pub w_m: DVector<f64>,
    pub y_h: DVector<f64>,
    pub y_m: DVector<f64>,
    pub lambda: f64,
}

impl DenseOracle {
    pub fn new(
        y_h: &ImageCube,
        y_m: &ImageCube,
        basis: &SubspaceBasis,
        model: &ObservationModel,
        lambda: f64,
    ) -> Self {
        let (h, w) = (y_m.height(), y_m.width());
        let n = h * w;
        let m = y_h.n_pixels();
        let sb = dense_sampling(h, w, model.d, model.phase) * dense_blur(&model.blur, h, w);
        let hm = basis.h().clone();
        let r = DMatrix::from_row_slice(
            model.response.n_out(),
            model.response.n_in(),
            model.response.weights(),
        );
        let ml = hm.nrows();
        let mean_img = DVector::from_iterator(ml * n, (0..ml).flat_map(|b| std::iter::repeat_n(basis.mean()[b], n)));
        let xh_op = kron(&DMatrix::identity(ml, ml), &sb);
        let a_h = kron(&hm, &sb);
        let c_h = &xh_op * &mean_img;
        let xm_op = kron(&r, &DMatrix::identity(n, n));
        let a_m = kron(&(&r * &hm), &DMatrix::identity(n, n));
        let c_m = &xm_op * &mean_img;
        let w_h = DVector::from_iterator(ml * m, (0..ml).flat_map(|b| std::iter::repeat_n(1.0 / model.noise.hs_variances[b], m)));
        let nl = r.nrows();
        let w_m = DVector::from_iterator(nl * n, (0..nl).flat_map(|b| std::iter::repeat_n(1.0 / model.noise.ms_variances[b], n)));
        DenseOracle {
            a_h,
            c_h,
            a_m,
            c_m,
            w_h,
            w_m,
            y_h: cube_to_vec(y_h),
            y_m: cube_to_vec(y_m),
            lambda,
        }
    }

    pub fn objective(&self, u: &DVector<f64>, ubar: &DVector<f64>) -> f64 {
        let rh = &self.y_h - &self.a_h * u - &self.c_h;
        let rm = &self.y_m - &self.a_m * u - &self.c_m;
        let fh: f64 = rh.iter().zip(self.w_h.iter()).map(|(r, w)| w * r * r).sum();
        let fm: f64 = rm.iter().zip(self.w_m.iter()).map(|(r, w)| w * r * r).sum();
        0.5 * fh + 0.5 * fm + 0.5 * self.lambda * (u - ubar).norm_squared()
    }

    /// Minimiser of the quadratic U-subproblem for a fixed `ubar`.
    pub fn solve(&self, ubar: &DVector<f64>) -> DVector<f64> {
        let wh = DMatrix::from_diagonal(&self.w_h);
        let wm = DMatrix::from_diagonal(&self.w_m);
        let k = self.a_h.ncols();
        let lhs = self.a_h.transpose() * &wh * &self.a_h
            + self.a_m.transpose() * &wm * &self.a_m
            + DMatrix::identity(k, k) * self.lambda;
        let rhs = self.a_h.transpose() * &wh * (&self.y_h - &self.c_h)
            + self.a_m.transpose() * &wm * (&self.y_m - &self.c_m)
            + ubar * self.lambda;
        lhs.lu().solve(&rhs).expect("oracle system is singular")
    }
}

/// A small fusion instance with random positive data, a PCA basis and a
/// random dictionary with OMP codes.
pub struct Instance {
    pub reference: ImageCube,
    pub y_h: ImageCube,
    pub y_m: ImageCube,
    pub basis: SubspaceBasis,
    pub model: ObservationModel,
    pub dict_set: DictionarySet,
}

pub struct InstanceSpec {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub ms_bands: usize,
    pub dim: usize,
    pub d: usize,
    pub kernel: usize,
    pub patch: usize,
    pub stride: usize,
    pub atoms: usize,
    pub k: usize,
    pub variance: f64,
    pub center: bool,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            h: 8,
            w: 8,
            bands: 6,
            ms_bands: 3,
            dim: 2,
            d: 2,
            kernel: 3,
            patch: 2,
            stride: 2,
            atoms: 6,
            k: 2,
            variance: 0.05,
            center: true,
        }
    }
}

pub fn instance(spec: &InstanceSpec, seed: u64) -> Instance {
    let mut r = rng(seed);
    let (h, w, nb) = (spec.h, spec.w, spec.bands);
    let reference = ImageCube::new(nb, h, w, (0..nb * h * w).map(|_| r.random_range(0.5..1.5)).collect()).unwrap();
    let model = ObservationModel {
        blur: BlurKernel::exponential(spec.kernel, 1.0).unwrap(),
        d: spec.d,
        phase: (spec.d / 2, 0),
        response: SpectralResponse::box_filters(nb, spec.ms_bands).unwrap(),
        noise: NoiseSpec {
            hs_variances: (0..nb).map(|b| spec.variance * (1.0 + 0.1 * b as f64)).collect(),
            ms_variances: (0..spec.ms_bands).map(|b| spec.variance * (1.0 + 0.2 * b as f64)).collect(),
            rng_seed: seed,
        },
    };
    let sim = specfuse::observation::simulate_scenario(&reference, &model).unwrap();
    let basis = learn_pca(&sim.y_h, spec.dim, spec.center).unwrap();
    let geom = PatchGeometry::new(spec.patch, spec.stride, h, w).unwrap();
    let n_p = geom.n_p();
    let u = random_cube(spec.dim, h, w, seed ^ 0xABCD);
    let bands = (0..spec.dim)
        .map(|b| {
            let atoms = DMatrix::from_fn(n_p, spec.atoms, |_, _| r.random_range(-1.0..1.0));
            let dictionary = Dictionary::new(atoms).unwrap();
            let grid = u.band_as_grid(b).unwrap();
            let patches = specfuse::patches::extract_patches(&grid, &geom).unwrap();
            let code = omp_code(&dictionary, &patches, spec.k).unwrap();
            BandDictionary { dictionary, code }
        })
        .collect();
    Instance {
        reference,
        y_h: sim.y_h,
        y_m: sim.y_m,
        basis,
        model,
        dict_set: DictionarySet::new(geom, bands).unwrap(),
    }
}

impl Instance {
    pub fn problem(&self, lambda: f64) -> FusionProblem {
        FusionProblem::new(
            &self.y_h,
            &self.y_m,
            self.basis.clone(),
            self.model.clone(),
            self.dict_set.clone(),
            lambda,
        )
        .unwrap()
    }

    pub fn oracle(&self, lambda: f64) -> DenseOracle {
        DenseOracle::new(&self.y_h, &self.y_m, &self.basis, &self.model, lambda)
    }
}

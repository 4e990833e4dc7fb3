//! Alternating minimisation of
//! `0.5 ||L_H^-1/2 (Y_H - H U B S)||^2 + 0.5 ||L_M^-1/2 (Y_M - R H U)||^2 + lambda/2 ||U - U_bar||^2`
//! over the subspace image `U` (split ADMM inner loop) and the patch codes
//! on fixed supports (closed-form least squares).

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::metrics;
use crate::observation::{BlurKernel, ObservationModel};
use crate::patches::extract_from_slice;
use crate::sparsedict::{DictionarySet, SparseCode};
use crate::subspace::SubspaceBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    /// ADMM penalty.
    pub mu: f64,
    /// Ridge on the code coefficients; 0 disables it.
    pub mu_a: f64,
    pub inner_iters: usize,
    pub max_outer: usize,
    /// Relative objective decrease below which the outer loop stops.
    pub tolerance: f64,
    pub symmetric_v1: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            mu: 0.05,
            mu_a: 0.0,
            inner_iters: 40,
            max_outer: 50,
            tolerance: 1e-5,
            symmetric_v1: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid("mu must be positive"));
        }
        if !(self.mu_a >= 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::invalid("mu_a and tolerance must be non-negative"));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub inner_iters: usize,
    pub objective: f64,
    pub rmse: Option<f64>,
}

/// Circulant blur operator diagonalised by the 2-D FFT.
#[derive(Clone)]
struct Circulant {
    fft: Fft2,
    khat: Vec<Complex64>,
}

impl Circulant {
    fn new(kernel: &BlurKernel, rows: usize, cols: usize) -> Self {
        let fft = Fft2::new(rows, cols);
        let khat = fft.forward_real(&kernel.embed(rows, cols));
        Circulant { fft, khat }
    }

    fn apply(&self, band: &[f64], out: &mut [f64]) {
        let mut s = self.fft.forward_real(band);
        s.iter_mut().zip(&self.khat).for_each(|(v, k)| *v *= k);
        self.fft.inverse_real(&mut s, out);
    }

    /// `U = (A B^T + C)(B B^T + 2 I)^-1` for one band; also returns `U B`.
    fn u_solve(&self, a: &[f64], c: &[f64], u: &mut [f64], ub: &mut [f64]) {
        let fa = self.fft.forward_real(a);
        let fc = self.fft.forward_real(c);
        let mut su: Vec<Complex64> = fa
            .iter()
            .zip(&fc)
            .zip(&self.khat)
            .map(|((a, c), k)| (k.conj() * a + c) / (k.norm_sqr() + 2.0))
            .collect();
        let mut sb: Vec<Complex64> = su.iter().zip(&self.khat).map(|(v, k)| v * k).collect();
        self.fft.inverse_real(&mut su, u);
        self.fft.inverse_real(&mut sb, ub);
    }
}

/// Fourier-domain solution of `U (B B^T + 2 I) = A B^T + C`, band by band.
pub fn fourier_u_update(kernel: &BlurKernel, a: &ImageCube, c: &ImageCube) -> Result<ImageCube> {
    if !a.same_shape(c) {
        return Err(Error::shape("right-hand sides differ in shape"));
    }
    let op = Circulant::new(kernel, a.height(), a.width());
    let n = a.n_pixels();
    let mut out = vec![0.0; a.data().len()];
    let mut scratch = vec![0.0; n];
    for (b, dst) in out.chunks_exact_mut(n).enumerate() {
        op.u_solve(a.band(b), c.band(b), dst, &mut scratch);
    }
    ImageCube::new(a.n_bands(), a.height(), a.width(), out)
}

/// Least-squares coefficient map of one patch onto its fixed support.
#[derive(Debug, Clone)]
pub struct PatchProjector {
    support: Vec<usize>,
    /// `(D_S^T D_S + mu_a I)^-1`.
    gram_inv: DMatrix<f64>,
}

impl PatchProjector {
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn coefficients(&self, atoms: &DMatrix<f64>, patch: &[f64]) -> DVector<f64> {
        let rhs = DVector::from_iterator(
            self.support.len(),
            self.support.iter().map(|&a| atoms.column(a).iter().zip(patch).map(|(x, y)| x * y).sum()),
        );
        &self.gram_inv * rhs
    }

    /// `T = D_S (D_S^T D_S + mu_a I)^-1 D_S^T`.
    pub fn matrix(&self, atoms: &DMatrix<f64>) -> DMatrix<f64> {
        let ds = atoms.select_columns(&self.support);
        &ds * &self.gram_inv * ds.transpose()
    }
}

/// Projector factorisations for every (band, patch), computed once.
pub fn precompute_projectors(dict_set: &DictionarySet, mu_a: f64) -> Vec<Vec<PatchProjector>> {
    dict_set
        .bands()
        .iter()
        .map(|b| {
            let atoms = b.dictionary.atoms();
            b.code
                .columns()
                .iter()
                .map(|col| {
                    let support: Vec<usize> = col.iter().filter(|e| e.1 != 0.0).map(|e| e.0).collect();
                    let s = support.len();
                    let gram = DMatrix::from_fn(s, s, |i, j| {
                        atoms.column(support[i]).dot(&atoms.column(support[j])) + if i == j { mu_a } else { 0.0 }
                    });
                    let gram_inv = if s == 0 {
                        DMatrix::zeros(0, 0)
                    } else {
                        match gram.clone().cholesky() {
                            Some(ch) => ch.inverse(),
                            None => {
                                log::warn!("singular support Grammian, using pseudo-inverse");
                                let eps = 1e-12 * gram.norm();
                                gram.pseudo_inverse(eps).expect("non-negative epsilon")
                            }
                        }
                    };
                    PatchProjector { support, gram_inv }
                })
                .collect()
        })
        .collect()
}

type CodeValues = Vec<Vec<DVector<f64>>>;

/// Everything about the fusion problem that does not change across
/// iterations, with precomputed weighted observation terms.
#[derive(Clone)]
pub struct FusionProblem {
    basis: SubspaceBasis,
    model: ObservationModel,
    dict_set: DictionarySet,
    lambda: f64,
    height: usize,
    width: usize,
    /// Full-resolution pixel of every HS pixel, HS row-major order.
    sampled: Vec<usize>,
    y_h_c: DMatrix<f64>,
    y_m_c: DMatrix<f64>,
    h: DMatrix<f64>,
    rh: DMatrix<f64>,
    inv_var_h: Vec<f64>,
    inv_var_m: Vec<f64>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    wh: DMatrix<f64>,
    wm: DMatrix<f64>,
    blur: Circulant,
    patch_idx: Vec<usize>,
    counts: Vec<u32>,
}

fn to_mat(cube: &ImageCube) -> DMatrix<f64> {
    DMatrix::from_column_slice(cube.n_pixels(), cube.n_bands(), cube.data())
}

fn to_cube(m: &DMatrix<f64>, height: usize, width: usize) -> Result<ImageCube> {
    ImageCube::new(m.ncols(), height, width, m.as_slice().to_vec())
}

fn has_non_finite(m: &DMatrix<f64>) -> bool {
    m.iter().any(|v| !v.is_finite())
}

impl FusionProblem {
    /// Weights are the inverse noise variances of `model`, which must be
    /// strictly positive.
    pub fn new(
        y_h: &ImageCube,
        y_m: &ImageCube,
        basis: SubspaceBasis,
        model: ObservationModel,
        dict_set: DictionarySet,
        lambda: f64,
    ) -> Result<Self> {
        let d = model.d;
        let (height, width) = (y_m.height(), y_m.width());
        if y_h.height() * d != height || y_h.width() * d != width {
            return Err(Error::shape(format!(
                "HS {}x{} times d = {d} does not match MS {height}x{width}",
                y_h.height(),
                y_h.width()
            )));
        }
        model.validate(y_h.n_bands(), height, width)?;
        if y_m.n_bands() != model.response.n_out() || basis.n_bands() != y_h.n_bands() {
            return Err(Error::shape("band counts of observations, response and basis disagree"));
        }
        let g = dict_set.geometry();
        if dict_set.len() != basis.dim() || g.height != height || g.width != width {
            return Err(Error::shape("dictionary set does not match the subspace image"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        let noise = &model.noise;
        if noise.hs_variances.iter().chain(&noise.ms_variances).any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("fusion weights need strictly positive noise variances"));
        }
        let inv_var_h: Vec<f64> = noise.hs_variances.iter().map(|v| 1.0 / v).collect();
        let inv_var_m: Vec<f64> = noise.ms_variances.iter().map(|v| 1.0 / v).collect();

        let mean = DVector::from_column_slice(basis.mean());
        let ksum = model.blur.sum();
        let mut y_h_c = to_mat(y_h);
        for (b, mut col) in y_h_c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-ksum * mean[b]);
        }
        let r = model.response.matrix();
        let rmean = &r * &mean;
        let mut y_m_c = to_mat(y_m);
        for (b, mut col) in y_m_c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-rmean[b]);
        }
        let h = basis.h().clone();
        let rh = &r * &h;
        let lh = DMatrix::from_diagonal(&DVector::from_column_slice(&inv_var_h));
        let lm = DMatrix::from_diagonal(&DVector::from_column_slice(&inv_var_m));
        let a1 = h.transpose() * &lh * &h;
        let a2 = rh.transpose() * &lm * &rh;
        let wh = &y_h_c * &lh * &h;
        let wm = &y_m_c * &lm * &rh;

        let lw = y_h.width();
        let sampled = (0..y_h.n_pixels())
            .map(|s| (model.phase.0 + (s / lw) * d) * width + model.phase.1 + (s % lw) * d)
            .collect();
        let blur = Circulant::new(&model.blur, height, width);
        let patch_idx = g.pixel_indices();
        let counts = crate::patches::coverage_counts(g);
        Ok(FusionProblem {
            basis,
            model,
            dict_set,
            lambda,
            height,
            width,
            sampled,
            y_h_c,
            y_m_c,
            h,
            rh,
            inv_var_h,
            inv_var_m,
            a1,
            a2,
            wh,
            wm,
            blur,
            patch_idx,
            counts,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        let mut p = self.clone();
        p.lambda = lambda;
        Ok(p)
    }

    pub fn basis(&self) -> &SubspaceBasis {
        &self.basis
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn dict_set(&self) -> &DictionarySet {
        &self.dict_set
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    fn check_u(&self, u: &ImageCube) -> Result<()> {
        if u.n_bands() != self.dim() || u.height() != self.height || u.width() != self.width {
            return Err(Error::shape(format!(
                "expected a {}x{}x{} subspace image",
                self.dim(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    fn blur_mat(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_pixels();
        let mut out = DMatrix::zeros(n, u.ncols());
        for k in 0..u.ncols() {
            let src = u.column(k);
            let dst = &mut out.as_mut_slice()[k * n..(k + 1) * n];
            self.blur.apply(src.as_slice(), dst);
        }
        out
    }

    fn data_terms(&self, u: &DMatrix<f64>) -> (f64, f64) {
        let z = self.blur_mat(u);
        let zs = z.select_rows(&self.sampled);
        let rh = &self.y_h_c - zs * self.h.transpose();
        let fh: f64 = rh
            .column_iter()
            .zip(&self.inv_var_h)
            .map(|(c, w)| w * c.norm_squared())
            .sum();
        let rm = &self.y_m_c - u * self.rh.transpose();
        let fm: f64 = rm
            .column_iter()
            .zip(&self.inv_var_m)
            .map(|(c, w)| w * c.norm_squared())
            .sum();
        (0.5 * fh, 0.5 * fm)
    }

    fn objective_mat(&self, u: &DMatrix<f64>, ubar: &DMatrix<f64>) -> f64 {
        let (fh, fm) = self.data_terms(u);
        fh + fm + 0.5 * self.lambda * (u - ubar).norm_squared()
    }

    /// The objective in `(U, U_bar)`, without any code ridge.
    pub fn objective(&self, u: &ImageCube, ubar: &ImageCube) -> Result<f64> {
        self.check_u(u)?;
        self.check_u(ubar)?;
        Ok(self.objective_mat(&to_mat(u), &to_mat(ubar)))
    }

    /// `U_bar = [P(D_1 A_1), ...]` for a set of codes.
    pub fn ubar_from_codes(&self, codes: &[SparseCode]) -> Result<ImageCube> {
        if codes.len() != self.dim() {
            return Err(Error::shape("one code per subspace band required"));
        }
        let n = self.n_pixels();
        let np = self.dict_set.geometry().n_p();
        let mut out = Vec::with_capacity(self.dim() * n);
        for (band, code) in self.dict_set.bands().iter().zip(codes) {
            if code.n_patches() * np != self.patch_idx.len() || code.n_atoms() != band.dictionary.n_atoms() {
                return Err(Error::shape("code does not match the patch geometry"));
            }
            let values = band.dictionary.synthesize(code);
            out.extend(crate::patches::average_into(values.as_slice(), &self.patch_idx, &self.counts, n));
        }
        ImageCube::new(self.dim(), self.height, self.width, out)
    }

    fn ubar_from_values(&self, projectors: &[Vec<PatchProjector>], values: &CodeValues) -> DMatrix<f64> {
        let n = self.n_pixels();
        let np = self.dict_set.geometry().n_p();
        let mut out = DMatrix::zeros(n, self.dim());
        let mut patch = vec![0.0; np];
        for (k, band) in self.dict_set.bands().iter().enumerate() {
            let atoms = band.dictionary.atoms();
            let mut acc = vec![0.0; n];
            for (j, (proj, coef)) in projectors[k].iter().zip(&values[k]).enumerate() {
                if proj.support.is_empty() {
                    continue;
                }
                patch.iter_mut().for_each(|v| *v = 0.0);
                for (&a, &c) in proj.support.iter().zip(coef.iter()) {
                    for (p, d) in patch.iter_mut().zip(atoms.column(a).iter()) {
                        *p += c * d;
                    }
                }
                for (&pix, &v) in self.patch_idx[j * np..(j + 1) * np].iter().zip(&patch) {
                    acc[pix] += v;
                }
            }
            for ((o, a), &c) in out.column_mut(k).iter_mut().zip(acc).zip(&self.counts) {
                *o = a / c as f64;
            }
        }
        out
    }

    fn code_values(&self, projectors: &[Vec<PatchProjector>], u: &DMatrix<f64>) -> CodeValues {
        let geom = self.dict_set.geometry();
        self.dict_set
            .bands()
            .iter()
            .enumerate()
            .map(|(k, band)| {
                let patches = extract_from_slice(u.column(k).as_slice(), geom, &self.patch_idx);
                let atoms = band.dictionary.atoms();
                projectors[k]
                    .iter()
                    .enumerate()
                    .map(|(j, proj)| proj.coefficients(atoms, patches.column(j).as_slice()))
                    .collect()
            })
            .collect()
    }

    fn initial_values(&self, projectors: &[Vec<PatchProjector>]) -> CodeValues {
        self.dict_set
            .bands()
            .iter()
            .zip(projectors)
            .map(|(band, projs)| {
                band.code
                    .columns()
                    .iter()
                    .zip(projs)
                    .map(|(col, proj)| {
                        DVector::from_iterator(
                            proj.support.len(),
                            proj.support.iter().map(|a| col.iter().find(|e| e.0 == *a).map_or(0.0, |e| e.1)),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    fn values_to_codes(&self, projectors: &[Vec<PatchProjector>], values: &CodeValues) -> Result<Vec<SparseCode>> {
        self.dict_set
            .bands()
            .iter()
            .enumerate()
            .map(|(k, band)| {
                let cols = projectors[k]
                    .iter()
                    .zip(&values[k])
                    .map(|(p, v)| p.support.iter().copied().zip(v.iter().copied()).collect())
                    .collect();
                SparseCode::new(band.dictionary.n_atoms(), cols)
            })
            .collect()
    }

    /// Least-squares codes of the patches of `U` on the fixed supports, and
    /// the resulting `U_bar`. Off-support entries stay zero.
    pub fn code_step(&self, projectors: &[Vec<PatchProjector>], u: &ImageCube) -> Result<(Vec<SparseCode>, ImageCube)> {
        self.check_u(u)?;
        let values = self.code_values(projectors, &to_mat(u));
        let ubar = self.ubar_from_values(projectors, &values);
        Ok((self.values_to_codes(projectors, &values)?, to_cube(&ubar, self.height, self.width)?))
    }
}

fn values_sq(values: &CodeValues) -> f64 {
    values.iter().flatten().map(|v| v.norm_squared()).sum()
}

fn values_dot(a: &CodeValues, b: &CodeValues) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x.dot(y)).sum()
}

fn values_lerp(a: &CodeValues, b: &CodeValues, t: f64) -> CodeValues {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + (y - x) * t).collect())
        .collect()
}

/// ADMM state: `U`, the splittings `V1 = U B`, `V2 = U`, `V3 = U` and their
/// scaled multipliers, all stored as `n_pixels x dim` matrices.
#[derive(Debug, Clone)]
pub struct SalsaState {
    u: DMatrix<f64>,
    v: [DMatrix<f64>; 3],
    g: [DMatrix<f64>; 3],
    mu: f64,
    symmetric_v1: bool,
    a1_inv: DMatrix<f64>,
    a2_inv: DMatrix<f64>,
    height: usize,
    width: usize,
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

impl SalsaState {
    /// Warm start at `u0`: `V1 = u0 B`, `V2 = V3 = u0`, zero multipliers, so
    /// the first U-update reproduces `u0`.
    pub fn new(problem: &FusionProblem, u0: &ImageCube, mu: f64, symmetric_v1: bool) -> Result<Self> {
        problem.check_u(u0)?;
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::invalid("mu must be positive"));
        }
        let u = to_mat(u0);
        let k = u.ncols();
        let eye = DMatrix::<f64>::identity(k, k);
        let a1_inv = spd_inverse(&problem.a1 + &eye * mu, "HS normal matrix")?;
        let a2_inv = spd_inverse(&problem.a2 + &eye * mu, "MS normal matrix")?;
        let zero = DMatrix::zeros(u.nrows(), k);
        Ok(SalsaState {
            v: [problem.blur_mat(&u), u.clone(), u.clone()],
            g: [zero.clone(), zero.clone(), zero],
            u,
            mu,
            symmetric_v1,
            a1_inv,
            a2_inv,
            height: problem.height,
            width: problem.width,
        })
    }

    pub fn u(&self) -> ImageCube {
        ImageCube::new(self.u.ncols(), self.height, self.width, self.u.as_slice().to_vec())
            .expect("state holds finite values")
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    fn iterate(&mut self, p: &FusionProblem, ubar: &DMatrix<f64>, iteration: usize) -> Result<()> {
        let (n, k) = self.u.shape();
        let mu = self.mu;
        let lambda = p.lambda;
        let a = &self.v[0] + &self.g[0];
        let c = &self.v[1] + &self.g[1] + &self.v[2] + &self.g[2];
        let mut ub = DMatrix::zeros(n, k);
        for b in 0..k {
            let (u_col, ub_col) = (
                &mut self.u.as_mut_slice()[b * n..(b + 1) * n],
                &mut ub.as_mut_slice()[b * n..(b + 1) * n],
            );
            p.blur.u_solve(a.column(b).as_slice(), c.column(b).as_slice(), u_col, ub_col);
        }
        if has_non_finite(&self.u) {
            return Err(Error::Divergence { iteration, variable: "U".into() });
        }

        let nu1 = ub - &self.g[0];
        let nu2 = &self.u - &self.g[1];
        let nu3 = &self.u - &self.g[2];

        let mut v1 = nu1.clone();
        let w = if self.symmetric_v1 { mu } else { 1.0 };
        let mut rhs = DVector::zeros(k);
        for (s, &pix) in p.sampled.iter().enumerate() {
            for b in 0..k {
                rhs[b] = p.wh[(s, b)] + w * nu1[(pix, b)];
            }
            let sol = &self.a1_inv * &rhs;
            for b in 0..k {
                v1[(pix, b)] = sol[b];
            }
        }
        let v2 = (&p.wm + &nu2 * mu) * &self.a2_inv;
        let v3 = (ubar * lambda + &nu3 * mu) / (lambda + mu);
        for (name, m) in [("V1", &v1), ("V2", &v2), ("V3", &v3)] {
            if has_non_finite(m) {
                return Err(Error::Divergence { iteration, variable: name.into() });
            }
        }
        self.g = [&v1 - &nu1, &v2 - &nu2, &v3 - &nu3];
        self.v = [v1, v2, v3];
        Ok(())
    }
}

/// Runs `n_it` ADMM iterations on the U-subproblem for a fixed `U_bar`.
pub fn salsa_u_step(problem: &FusionProblem, ubar: &ImageCube, state: &mut SalsaState, n_it: usize) -> Result<()> {
    problem.check_u(ubar)?;
    let ubar = to_mat(ubar);
    for it in 0..n_it {
        state.iterate(problem, &ubar, it)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub x_hat: ImageCube,
    pub u_hat: ImageCube,
    pub codes: Vec<SparseCode>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

const MAX_BAD_STEPS: usize = 3;

/// Outer loop. A U candidate that raises the objective is replaced by the
/// best point on the segment towards it, while the ADMM state itself always
/// advances. The run stalls once the rejected candidates stop improving for
/// `MAX_BAD_STEPS` outer iterations in a row. A code update that raises it is treated the same way on the
/// segment from the previous codes. The objective trace therefore never
/// increases.
pub fn fuse(
    problem: &FusionProblem,
    params: &SolverParams,
    u0: &ImageCube,
    reference: Option<&ImageCube>,
) -> Result<FusionResult> {
    params.validate()?;
    problem.check_u(u0)?;
    let lambda = problem.lambda;
    let ridge = 0.5 * lambda * params.mu_a;
    let projectors = precompute_projectors(&problem.dict_set, params.mu_a);
    let mut values = problem.initial_values(&projectors);
    let mut ubar = problem.ubar_from_values(&projectors, &values);
    let mut state = SalsaState::new(problem, u0, params.mu, params.symmetric_v1)?;
    let mut u = state.u.clone();
    let full = |u: &DMatrix<f64>, ubar: &DMatrix<f64>, values: &CodeValues| {
        problem.objective_mat(u, ubar) + ridge * values_sq(values)
    };
    let rmse_of = |u: &DMatrix<f64>| -> Result<Option<f64>> {
        match reference {
            Some(r) => {
                let x = problem.basis.reconstruct(&to_cube(u, problem.height, problem.width)?)?;
                Ok(Some(metrics::rmse_sqrt(r, &x)?))
            }
            None => Ok(None),
        }
    };

    let mut obj = full(&u, &ubar, &values);
    let mut trace = vec![TraceEntry {
        outer: 0,
        inner_iters: 0,
        objective: obj,
        rmse: rmse_of(&u)?,
    }];
    let mut converged = false;
    let mut bad = 0usize;
    let mut rejected: Option<f64> = None;
    for outer in 1..=params.max_outer {
        let start = obj;
        for it in 0..params.inner_iters {
            state.iterate(problem, &ubar, (outer - 1) * params.inner_iters + it)?;
        }
        let cand = full(&state.u, &ubar, &values);
        let mut pending = false;
        if cand <= obj {
            u = state.u.clone();
            obj = cand;
            bad = 0;
            rejected = None;
        } else {
            // L is quadratic along the segment towards the candidate; take
            // its exact minimiser in [0, 1]
            let dir = &state.u - &u;
            let half = full(&(&u + &dir * 0.5), &ubar, &values);
            let q = 2.0 * (cand - 2.0 * half + obj);
            let g = cand - obj - q;
            let theta = if q > 0.0 { (-g / (2.0 * q)).clamp(0.0, 1.0) } else { 0.0 };
            let moved = (theta > 0.0).then(|| &u + &dir * theta);
            match moved.map(|m| (full(&m, &ubar, &values), m)) {
                Some((c, m)) if c < obj => {
                    u = m;
                    obj = c;
                    bad = 0;
                    rejected = None;
                }
                _ if cand - obj > params.tolerance * obj.abs() => {
                    // still in the ADMM transient while the rejected
                    // candidates keep improving
                    pending = true;
                    if rejected.is_some_and(|prev| cand >= prev) {
                        bad += 1;
                    } else {
                        bad = 0;
                    }
                    rejected = Some(cand);
                    log::debug!("outer {outer}: U candidate raised the objective by {:e}", cand - obj);
                    if bad >= MAX_BAD_STEPS {
                        return Err(Error::Stalled { steps: bad, trace });
                    }
                }
                _ => {}
            }
        }

        let new_values = problem.code_values(&projectors, &u);
        let new_ubar = problem.ubar_from_values(&projectors, &new_values);
        let cand = full(&u, &new_ubar, &new_values);
        if cand <= obj {
            values = new_values;
            ubar = new_ubar;
            obj = cand;
        } else {
            let delta = &new_ubar - &ubar;
            let r = &u - &ubar;
            let dv: CodeValues = new_values
                .iter()
                .zip(&values)
                .map(|(n, o)| n.iter().zip(o).map(|(x, y)| x - y).collect())
                .collect();
            let num = lambda * r.dot(&delta) - 2.0 * ridge * values_dot(&values, &dv);
            let den = lambda * delta.norm_squared() + 2.0 * ridge * values_sq(&dv);
            let theta = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
            if theta > 0.0 {
                let tv = values_lerp(&values, &new_values, theta);
                let tu = &ubar + delta * theta;
                let c = full(&u, &tu, &tv);
                if c <= obj {
                    values = tv;
                    ubar = tu;
                    obj = c;
                }
            }
        }

        trace.push(TraceEntry {
            outer,
            inner_iters: params.inner_iters,
            objective: obj,
            rmse: rmse_of(&u)?,
        });
        let rel = (start - obj) / start.abs().max(f64::MIN_POSITIVE);
        if rel < params.tolerance && !pending {
            converged = true;
            break;
        }
    }
    let u_hat = to_cube(&u, problem.height, problem.width)?;
    Ok(FusionResult {
        x_hat: problem.basis.reconstruct(&u_hat)?,
        codes: problem.values_to_codes(&projectors, &values)?,
        u_hat,
        trace,
        converged,
    })
}

//! Patch dictionaries: online dictionary learning with an l1 penalty, OMP
//! re-coding under an l0 budget, and the support sets that stay fixed during
//! fusion.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::{read_cube, write_cube, ImageCube};
use crate::error::{Error, Result};
use crate::patches::PatchGeometry;

/// `n_p x n_at` matrix with unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Normalizes every column; fails on a zero column.
    pub fn new(mut atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.ncols() == 0 || atoms.nrows() == 0 {
            return Err(Error::shape("dictionary must have atoms"));
        }
        for mut col in atoms.column_iter_mut() {
            let n = col.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Degenerate("dictionary atom with zero norm".into()));
            }
            col /= n;
        }
        Ok(Dictionary { atoms })
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn n_p(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.atoms.transpose() * &self.atoms
    }

    /// `D A` for a sparse code.
    pub fn synthesize(&self, code: &SparseCode) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_p(), code.n_patches());
        for (j, col) in code.columns.iter().enumerate() {
            let mut dst = out.column_mut(j);
            for &(a, v) in col {
                dst.axpy(v, &self.atoms.column(a), 1.0);
            }
        }
        out
    }
}

/// Column-sparse `n_at x n_pat` code; entries of each column sorted by atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    n_atoms: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl SparseCode {
    pub fn new(n_atoms: usize, mut columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for col in &mut columns {
            col.sort_by_key(|e| e.0);
            if col.iter().any(|&(a, v)| a >= n_atoms || !v.is_finite()) {
                return Err(Error::invalid("code entry out of range or non-finite"));
            }
            if col.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::invalid("duplicate atom in code column"));
            }
        }
        Ok(SparseCode { n_atoms, columns })
    }

    pub fn zeros(n_atoms: usize, n_patches: usize) -> Self {
        SparseCode {
            n_atoms,
            columns: vec![Vec::new(); n_patches],
        }
    }

    pub fn from_dense(values: &DMatrix<f64>) -> Result<Self> {
        let columns = values
            .column_iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(a, v)| (a, *v))
                    .collect()
            })
            .collect();
        SparseCode::new(values.nrows(), columns)
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_patches(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<(usize, f64)>] {
        &self.columns
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_atoms, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            for &(a, v) in col {
                m[(a, j)] = v;
            }
        }
        m
    }

    pub fn max_column_support(&self) -> usize {
        self.columns.iter().map(|c| c.iter().filter(|e| e.1 != 0.0).count()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> f64 {
        self.columns.iter().flatten().map(|e| e.1.abs()).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.columns.iter().flatten().map(|e| e.1 * e.1).sum()
    }
}

/// Exact nonzero positions `(atom, patch)` of a code.
pub fn extract_supports(code: &SparseCode) -> BTreeSet<(usize, usize)> {
    code.columns
        .iter()
        .enumerate()
        .flat_map(|(j, col)| col.iter().filter(|e| e.1 != 0.0).map(move |e| (e.0, j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdlParams {
    pub n_atoms: usize,
    /// l1 weight relative to the RMS norm of the training patches, which
    /// makes learning invariant to the intensity scale.
    pub mu_dl: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OdlParams {
    fn default() -> Self {
        OdlParams {
            n_atoms: 256,
            mu_dl: 0.1,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryLearning {
    pub dictionary: Dictionary,
    /// `0.5 ||X - D A||^2 + mu ||A||_1` after initialization and after every
    /// epoch, codes refit against the accepted dictionary.
    pub objective_trace: Vec<f64>,
}

/// Lasso `min 0.5 ||x - D a||^2 + mu ||a||_1` by the LARS homotopy on the
/// Gram matrix, with at most `max_active` atoms, followed by an exact
/// refit on the final active set.
fn lasso_lars(gram: &DMatrix<f64>, corr: &[f64], mu: f64, max_active: usize) -> Vec<(usize, f64)> {
    let n = corr.len();
    let mut c = corr.to_vec();
    let Some((j0, top)) = c
        .iter()
        .enumerate()
        .map(|(j, v)| (j, v.abs()))
        .fold(None, |best: Option<(usize, f64)>, x| match best {
            Some(b) if b.1 >= x.1 => Some(b),
            _ => Some(x),
        })
    else {
        return Vec::new();
    };
    if top <= mu {
        return Vec::new();
    }
    let eps = 1e-12 * top;
    let mut active = vec![j0];
    let mut beta = vec![0.0];
    let mut in_active = vec![false; n];
    in_active[j0] = true;
    let mut ctop = top;
    let mut dir = vec![0.0; n];
    for _ in 0..8 * max_active.max(1) + 16 {
        let k = active.len();
        let sign = DVector::from_iterator(k, active.iter().map(|&j| c[j].signum()));
        let gaa = DMatrix::from_fn(k, k, |a, b| gram[(active[a], active[b])]);
        let Some(chol) = gaa.cholesky() else { break };
        let w = chol.solve(&sign);
        for (j, d) in dir.iter_mut().enumerate() {
            *d = active.iter().zip(w.iter()).map(|(&b, wb)| gram[(j, b)] * wb).sum();
        }
        let mut gamma = ctop - mu;
        let mut event: Option<(bool, usize)> = None;
        if k < max_active {
            for j in (0..n).filter(|&j| !in_active[j]) {
                for g in [(ctop - c[j]) / (1.0 - dir[j]), (ctop + c[j]) / (1.0 + dir[j])] {
                    if g > eps && g < gamma {
                        gamma = g;
                        event = Some((true, j));
                    }
                }
            }
        }
        for (i, (&b, &wi)) in beta.iter().zip(w.iter()).enumerate() {
            if wi != 0.0 {
                let g = -b / wi;
                if g > eps && g < gamma {
                    gamma = g;
                    event = Some((false, i));
                }
            }
        }
        for (b, wi) in beta.iter_mut().zip(w.iter()) {
            *b += gamma * wi;
        }
        for (cj, d) in c.iter_mut().zip(&dir) {
            *cj -= gamma * d;
        }
        ctop -= gamma;
        match event {
            None => break,
            Some((true, j)) => {
                active.push(j);
                beta.push(0.0);
                in_active[j] = true;
            }
            Some((false, i)) => {
                in_active[active[i]] = false;
                active.remove(i);
                beta.remove(i);
            }
        }
    }
    // exact solution of the optimality conditions on the final active set
    let k = active.len();
    let gaa = DMatrix::from_fn(k, k, |a, b| gram[(active[a], active[b])]);
    let rhs = DVector::from_iterator(k, active.iter().zip(&beta).map(|(&j, b)| corr[j] - mu * b.signum()));
    if let Some(ch) = gaa.cholesky() {
        let polished = ch.solve(&rhs);
        if polished.iter().zip(&beta).all(|(p, b)| p.signum() == b.signum() && p.is_finite()) {
            beta = polished.iter().copied().collect();
        }
    }
    let mut out: Vec<(usize, f64)> = active.into_iter().zip(beta).filter(|e| e.1 != 0.0).collect();
    out.sort_by_key(|e| e.0);
    out
}

/// Lasso codes of every column plus the per-column squared residual.
fn lasso_all(dict: &DMatrix<f64>, patches: &DMatrix<f64>, mu: f64) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
    let gram = dict.transpose() * dict;
    let corr = dict.transpose() * patches;
    let mut codes = Vec::with_capacity(patches.ncols());
    let mut resid = Vec::with_capacity(patches.ncols());
    for j in 0..patches.ncols() {
        let code = lasso_lars(&gram, corr.column(j).as_slice(), mu, dict.nrows());
        let mut r = patches.column(j).clone_owned();
        for &(a, v) in &code {
            r.axpy(-v, &dict.column(a), 1.0);
        }
        resid.push(r.norm_squared());
        codes.push(code);
    }
    (codes, resid)
}

fn lasso_objective(codes: &[Vec<(usize, f64)>], resid: &[f64], mu: f64) -> f64 {
    0.5 * resid.iter().sum::<f64>() + mu * codes.iter().flatten().map(|e| e.1.abs()).sum::<f64>()
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let norm: f64 = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Mini-batch online dictionary learning. Atoms start as distinct random
/// training patches; atoms unused during an epoch are re-seeded from the
/// worst-reconstructed patches; an epoch whose refit objective is higher than
/// the previous one is discarded.
pub fn learn_dictionary(patches: &DMatrix<f64>, params: &OdlParams) -> Result<DictionaryLearning> {
    let (n_p, n_pat) = patches.shape();
    let n_at = params.n_atoms;
    if n_at == 0 || params.batch_size == 0 {
        return Err(Error::invalid("n_atoms and batch_size must be positive"));
    }
    if !(params.mu_dl >= 0.0) {
        return Err(Error::invalid("mu_dl must be non-negative"));
    }
    let nonzero: Vec<usize> = (0..n_pat)
        .filter(|&j| patches.column(j).norm() > 0.0)
        .collect();
    if nonzero.is_empty() {
        return Err(Error::Degenerate("all training patches are zero".into()));
    }
    if n_pat < n_at {
        log::warn!("{n_pat} training patches for {n_at} atoms");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pick = nonzero.clone();
    pick.shuffle(&mut rng);
    let mut dict = DMatrix::zeros(n_p, n_at);
    for a in 0..n_at {
        let col = match pick.get(a) {
            Some(&j) => patches.column(j).normalize(),
            None => random_unit(n_p, &mut rng),
        };
        dict.set_column(a, &col);
    }

    let rms = (patches.norm_squared() / n_pat as f64).sqrt();
    let mu = params.mu_dl * rms;
    let (codes, resid) = lasso_all(&dict, patches, mu);
    let mut best = lasso_objective(&codes, &resid, mu);
    let mut trace = vec![best];
    let mut order: Vec<usize> = (0..n_pat).collect();

    for _epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut cand = dict.clone();
        let mut acc_a = DMatrix::<f64>::zeros(n_at, n_at);
        let mut acc_b = DMatrix::<f64>::zeros(n_p, n_at);
        let mut used = vec![false; n_at];
        for batch in order.chunks(params.batch_size) {
            let gram = cand.transpose() * &cand;
            for &j in batch {
                let x = patches.column(j);
                let corr: Vec<f64> = (0..n_at).map(|a| cand.column(a).dot(&x)).collect();
                let code = lasso_lars(&gram, &corr, mu, n_p);
                for &(a, va) in &code {
                    used[a] = true;
                    for &(b, vb) in &code {
                        acc_a[(a, b)] += va * vb;
                    }
                    acc_b.column_mut(a).axpy(va, &x, 1.0);
                }
            }
            for a in 0..n_at {
                let aa = acc_a[(a, a)];
                if aa <= 1e-12 {
                    continue;
                }
                let mut u = acc_b.column(a) - &cand * acc_a.column(a);
                u /= aa;
                u += cand.column(a);
                let norm = u.norm();
                if norm > 1e-12 {
                    cand.set_column(a, &(u / norm));
                }
            }
        }
        let (mut codes, mut resid) = lasso_all(&cand, patches, mu);
        let unused: Vec<usize> = (0..n_at).filter(|&a| !used[a]).collect();
        if !unused.is_empty() {
            let mut worst: Vec<usize> = nonzero.clone();
            worst.sort_by(|&x, &y| resid[y].total_cmp(&resid[x]).then(x.cmp(&y)));
            for (&a, &j) in unused.iter().zip(worst.iter()) {
                cand.set_column(a, &patches.column(j).normalize());
            }
            (codes, resid) = lasso_all(&cand, patches, mu);
        }
        let obj = lasso_objective(&codes, &resid, mu);
        if obj <= best {
            best = obj;
            dict = cand;
        }
        trace.push(best);
    }
    Ok(DictionaryLearning {
        dictionary: Dictionary::new(dict)?,
        objective_trace: trace,
    })
}

/// Solves the normal equations on a support; falls back to the
/// pseudo-inverse when the Grammian is singular.
fn support_least_squares(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = gram.clone().cholesky() {
        let x = ch.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    log::warn!("singular support Grammian, using pseudo-inverse");
    let pinv = gram
        .clone()
        .pseudo_inverse(1e-12 * gram.norm().max(f64::MIN_POSITIVE))
        .expect("non-negative epsilon");
    pinv * rhs
}

/// Orthogonal matching pursuit with at most `k` atoms per column. Greedy
/// selection by largest absolute residual correlation (lowest index wins
/// ties), least-squares refit after each selection, early stop when the
/// residual norm drops below 1e-10.
pub fn omp_code(dict: &Dictionary, patches: &DMatrix<f64>, k: usize) -> Result<SparseCode> {
    if patches.nrows() != dict.n_p() {
        return Err(Error::shape(format!(
            "patches have {} rows, atoms have {}",
            patches.nrows(),
            dict.n_p()
        )));
    }
    if k > dict.n_p() || k > dict.n_atoms() {
        return Err(Error::invalid(format!(
            "sparsity {k} exceeds patch size {} or atom count {}",
            dict.n_p(),
            dict.n_atoms()
        )));
    }
    let d = dict.atoms();
    let gram = dict.gram();
    let n_at = dict.n_atoms();
    let mut columns = Vec::with_capacity(patches.ncols());
    for p in patches.column_iter() {
        let b: Vec<f64> = (0..n_at).map(|j| d.column(j).dot(&p)).collect();
        let mut selected: Vec<usize> = Vec::with_capacity(k);
        let mut coef = DVector::zeros(0);
        let mut rnorm = p.norm();
        for _ in 0..k {
            if rnorm < 1e-10 {
                break;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n_at {
                if selected.contains(&j) {
                    continue;
                }
                let mut c = b[j];
                for (s, &a) in selected.iter().enumerate() {
                    c -= gram[(j, a)] * coef[s];
                }
                let c = c.abs();
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((j, c));
                }
            }
            let Some((j, c)) = best else { break };
            if c == 0.0 {
                break;
            }
            selected.push(j);
            let s = selected.len();
            let sub_gram = DMatrix::from_fn(s, s, |r, q| gram[(selected[r], selected[q])]);
            let rhs = DVector::from_iterator(s, selected.iter().map(|&a| b[a]));
            coef = support_least_squares(&sub_gram, &rhs);
            let mut r = p.clone_owned();
            for (i, &a) in selected.iter().enumerate() {
                r.axpy(-coef[i], &d.column(a), 1.0);
            }
            rnorm = r.norm();
        }
        columns.push(
            selected
                .iter()
                .zip(coef.iter())
                .filter(|(_, v)| **v != 0.0)
                .map(|(&a, &v)| (a, v))
                .collect(),
        );
    }
    SparseCode::new(n_at, columns)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandDictionary {
    pub dictionary: Dictionary,
    pub code: SparseCode,
}

/// One dictionary and code per subspace band, all on the same patch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    geometry: PatchGeometry,
    bands: Vec<BandDictionary>,
}

impl DictionarySet {
    pub fn new(geometry: PatchGeometry, bands: Vec<BandDictionary>) -> Result<Self> {
        geometry.validate()?;
        if bands.is_empty() {
            return Err(Error::invalid("dictionary set needs at least one band"));
        }
        for (i, b) in bands.iter().enumerate() {
            if b.dictionary.n_p() != geometry.n_p() {
                return Err(Error::shape(format!(
                    "band {i}: atoms of size {} for patches of size {}",
                    b.dictionary.n_p(),
                    geometry.n_p()
                )));
            }
            if b.code.n_patches() != geometry.n_pat() || b.code.n_atoms() != b.dictionary.n_atoms() {
                return Err(Error::shape(format!("band {i}: code shape mismatch")));
            }
        }
        Ok(DictionarySet { geometry, bands })
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn bands(&self) -> &[BandDictionary] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn with_codes(&self, codes: Vec<SparseCode>) -> Result<Self> {
        if codes.len() != self.bands.len() {
            return Err(Error::shape("one code per band required"));
        }
        let bands = self
            .bands
            .iter()
            .zip(codes)
            .map(|(b, code)| BandDictionary {
                dictionary: b.dictionary.clone(),
                code,
            })
            .collect();
        DictionarySet::new(self.geometry, bands)
    }

    /// Writes `dict_XX.sfc` (atoms as `patch_side x patch_side` bands) and a
    /// `dictionaries.json` sidecar with geometry and codes.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = self.geometry.patch_side;
        for (i, b) in self.bands.iter().enumerate() {
            let atoms = b.dictionary.atoms();
            let cube = ImageCube::new(atoms.ncols(), s, s, atoms.as_slice().to_vec())?;
            write_cube(&cube, dir.join(format!("dict_{i:02}.sfc")))?;
        }
        let sidecar = DictionarySidecar {
            geometry: self.geometry,
            codes: self.bands.iter().map(|b| b.code.clone()).collect(),
        };
        let path = dir.join("dictionaries.json");
        fs::write(&path, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("dictionaries.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: DictionarySidecar = serde_json::from_slice(&bytes)?;
        let np = sidecar.geometry.n_p();
        let bands = sidecar
            .codes
            .into_iter()
            .enumerate()
            .map(|(i, code)| {
                let cube = read_cube(dir.join(format!("dict_{i:02}.sfc")))?;
                if cube.n_pixels() != np {
                    return Err(Error::shape(format!("dictionary {i} has wrong atom size")));
                }
                let atoms = DMatrix::from_column_slice(np, cube.n_bands(), cube.data());
                let code = SparseCode::new(code.n_atoms, code.columns)?;
                Ok(BandDictionary {
                    dictionary: Dictionary { atoms },
                    code,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DictionarySet::new(sidecar.geometry, bands)
    }
}

#[derive(Serialize, Deserialize)]
struct DictionarySidecar {
    geometry: PatchGeometry,
    codes: Vec<SparseCode>,
}

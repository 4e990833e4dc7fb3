//! The learning stage (subspace, rough estimate, dictionaries, supports)
//! followed by the fusion solve.

use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::Result;
use crate::observation::ObservationModel;
use crate::patches::{extract_patches, PatchGeometry};
use crate::roughest::{default_window, rough_estimate};
use crate::solver::{fuse, FusionProblem, FusionResult, SolverParams};
use crate::sparsedict::{learn_dictionary, omp_code, BandDictionary, DictionarySet, OdlParams};
use crate::subspace::{learn_pca, SubspaceBasis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub dim: usize,
    pub center: bool,
    pub patch_side: usize,
    pub stride: usize,
    pub sparsity: usize,
    pub odl: OdlParams,
    /// Smoothing window of the rough estimator; `None` picks `d + 1`
    /// rounded up to odd.
    pub window: Option<usize>,
}

impl Default for LearningParams {
    fn default() -> Self {
        LearningParams {
            dim: 5,
            center: true,
            patch_side: 6,
            stride: 2,
            sparsity: 4,
            odl: OdlParams::default(),
            window: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub basis: SubspaceBasis,
    /// Rough estimate in subspace coordinates.
    pub u_rough: ImageCube,
    /// The rough estimate mapped back to full spectral resolution.
    pub x_rough: ImageCube,
    /// Dictionaries with their OMP codes of the rough estimate.
    pub dict_set: DictionarySet,
    pub learning_traces: Vec<Vec<f64>>,
}

impl Prepared {
    /// Re-runs OMP on the rough estimate with another sparsity level,
    /// keeping the dictionaries.
    pub fn recode(&self, sparsity: usize) -> Result<Prepared> {
        let geom = *self.dict_set.geometry();
        let codes = self
            .dict_set
            .bands()
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let patches = extract_patches(&self.u_rough.band_as_grid(k)?, &geom)?;
                omp_code(&b.dictionary, &patches, sparsity)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            dict_set: self.dict_set.with_codes(codes)?,
            ..self.clone()
        })
    }
}

pub fn prepare(
    y_h: &ImageCube,
    y_m: &ImageCube,
    model: &ObservationModel,
    params: &LearningParams,
) -> Result<Prepared> {
    let basis = learn_pca(y_h, params.dim, params.center)?;
    log::info!("subspace dimension {} keeps {:.6} of the energy", basis.dim(), basis.energy_fraction());
    let window = params.window.unwrap_or_else(|| default_window(model.d));
    let u_rough = rough_estimate(y_h, y_m, &basis, model, window)?;
    let x_rough = basis.reconstruct(&u_rough)?;
    let prepared = learn_dictionaries(basis, u_rough, x_rough, params)?;
    Ok(prepared)
}

fn learn_dictionaries(
    basis: SubspaceBasis,
    u_rough: ImageCube,
    x_rough: ImageCube,
    params: &LearningParams,
) -> Result<Prepared> {
    let geom = PatchGeometry::new(params.patch_side, params.stride, u_rough.height(), u_rough.width())?;
    let mut bands = Vec::with_capacity(basis.dim());
    let mut traces = Vec::with_capacity(basis.dim());
    for k in 0..basis.dim() {
        let patches = extract_patches(&u_rough.band_as_grid(k)?, &geom)?;
        let odl = OdlParams {
            seed: params.odl.seed.wrapping_add(k as u64),
            ..params.odl
        };
        let learned = learn_dictionary(&patches, &odl)?;
        log::info!(
            "band {k}: dictionary objective {:.6e} -> {:.6e}",
            learned.objective_trace[0],
            learned.objective_trace.last().copied().unwrap_or(f64::NAN)
        );
        let code = omp_code(&learned.dictionary, &patches, params.sparsity)?;
        traces.push(learned.objective_trace);
        bands.push(BandDictionary {
            dictionary: learned.dictionary,
            code,
        });
    }
    Ok(Prepared {
        basis,
        u_rough,
        x_rough,
        dict_set: DictionarySet::new(geom, bands)?,
        learning_traces: traces,
    })
}

/// Fusion from a prepared learning stage, started at the rough estimate.
pub fn fuse_prepared(
    y_h: &ImageCube,
    y_m: &ImageCube,
    model: &ObservationModel,
    prepared: &Prepared,
    lambda: f64,
    solver: &SolverParams,
    reference: Option<&ImageCube>,
) -> Result<FusionResult> {
    let problem = FusionProblem::new(
        y_h,
        y_m,
        prepared.basis.clone(),
        model.clone(),
        prepared.dict_set.clone(),
        lambda,
    )?;
    fuse(&problem, solver, &prepared.u_rough, reference)
}

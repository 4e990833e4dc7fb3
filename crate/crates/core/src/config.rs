//! Declarative run configuration (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::{SnrConvention, SyntheticSpec};
use crate::pipeline::LearningParams;
use crate::solver::SolverParams;
use crate::sparsedict::OdlParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    Simulate,
    Fuse,
    Evaluate,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_h: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_m: Option<PathBuf>,
    /// Scenario manifest written by `simulate`; supplies the exact
    /// observation model and noise variances to `fuse`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// One value for every band, or an explicit per-band list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerBand {
    Uniform(f64),
    List(Vec<f64>),
}

impl PerBand {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            PerBand::Uniform(v) => Ok(vec![*v; n]),
            PerBand::List(v) if v.len() == n => Ok(v.clone()),
            PerBand::List(v) => Err(Error::Config(vec![format!(
                "per-band list has {} entries for {n} bands",
                v.len()
            )])),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            PerBand::Uniform(v) => std::slice::from_ref(v),
            PerBand::List(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseConfig {
    /// Contiguous equal-width band groups, averaged.
    Box { bands: usize },
    Panchromatic,
    Identity,
    /// `n_out x n_in` matrix stored as a cube of height 1.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kernel_size: usize,
    pub kernel_scale: f64,
    pub d: usize,
    pub phase: (usize, usize),
    pub hs_snr_db: PerBand,
    pub ms_snr_db: PerBand,
    pub snr_convention: SnrConvention,
    /// Simulate without noise; the SNR values are then ignored.
    pub noiseless: bool,
    pub response: ResponseConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kernel_size: 5,
            kernel_scale: 1.0,
            d: 4,
            phase: (0, 0),
            hs_snr_db: PerBand::Uniform(35.0),
            ms_snr_db: PerBand::Uniform(30.0),
            snr_convention: SnrConvention::MeanPower,
            noiseless: false,
            response: ResponseConfig::Box { bands: 4 },
            seed: 0,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceConfig {
    pub dim: usize,
    pub center: bool,
    /// Smoothing window of the rough estimator; absent means `d + 1`
    /// rounded up to odd.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rough_window: Option<usize>,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            dim: 5,
            center: true,
            rough_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub patch_side: usize,
    pub stride: usize,
    pub n_atoms: usize,
    pub sparsity: usize,
    pub mu_dl: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        let odl = OdlParams::default();
        DictionaryConfig {
            patch_side: 6,
            stride: 2,
            n_atoms: odl.n_atoms,
            sparsity: 4,
            mu_dl: odl.mu_dl,
            epochs: odl.epochs,
            batch_size: odl.batch_size,
            seed: 0,
        }
    }
}

/// ADMM penalty: a literal, or `"<c>/normF(NH)"` resolved from the HS noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuRule {
    Value(f64),
    Expr(String),
}

impl MuRule {
    fn coefficient(s: &str) -> Option<f64> {
        let c = s.trim().strip_suffix("normF(NH)")?.trim_end().strip_suffix('/')?.trim();
        c.parse::<f64>().ok().filter(|v| *v > 0.0 && v.is_finite())
    }

    pub fn resolve(&self, hs_noise_norm: f64) -> Result<f64> {
        let mu = match self {
            MuRule::Value(v) => *v,
            MuRule::Expr(s) => {
                let c = Self::coefficient(s)
                    .ok_or_else(|| Error::Config(vec![format!("unrecognised mu rule {s:?}")]))?;
                if !(hs_noise_norm > 0.0) {
                    return Err(Error::Config(vec![
                        "mu rule needs a positive HS noise norm".into(),
                    ]));
                }
                c / hs_noise_norm
            }
        };
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Config(vec![format!("mu resolves to {mu}")]));
        }
        Ok(mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda: f64,
    pub mu: MuRule,
    pub mu_a: f64,
    pub inner_iters: usize,
    pub max_outer: usize,
    pub tolerance: f64,
    pub symmetric_v1: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = SolverParams::default();
        SolverConfig {
            lambda: 5.0,
            mu: MuRule::Expr("0.05/normF(NH)".into()),
            mu_a: p.mu_a,
            inner_iters: p.inner_iters,
            max_outer: p.max_outer,
            tolerance: p.tolerance,
            symmetric_v1: p.symmetric_v1,
        }
    }
}

impl SolverConfig {
    pub fn params(&self, mu: f64) -> SolverParams {
        SolverParams {
            mu,
            mu_a: self.mu_a,
            inner_iters: self.inner_iters,
            max_outer: self.max_outer,
            tolerance: self.tolerance,
            symmetric_v1: self.symmetric_v1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    Sparsity,
    Dim,
    Stride,
    Mu,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Sparsity => "sparsity",
            SweepParameter::Dim => "dim",
            SweepParameter::Stride => "stride",
            SweepParameter::Mu => "mu",
        }
    }

    fn integral(self) -> bool {
        matches!(self, SweepParameter::Sparsity | SweepParameter::Dim | SweepParameter::Stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workflow: Workflow,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub subspace: SubspaceConfig,
    #[serde(default)]
    pub dictionary: DictionaryConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn new(workflow: Workflow) -> Self {
        RunConfig {
            workflow,
            paths: PathsConfig::default(),
            scenario: ScenarioConfig::default(),
            subspace: SubspaceConfig::default(),
            dictionary: DictionaryConfig::default(),
            solver: SolverConfig::default(),
            sweep: None,
        }
    }

    /// Parses and validates; relative paths are resolved against the
    /// directory containing the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(mut msgs) => {
                msgs.iter_mut().for_each(|m| *m = format!("{}: {m}", path.display()));
                Error::Config(msgs)
            }
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.reference,
            &mut p.y_h,
            &mut p.y_m,
            &mut p.manifest,
            &mut p.fused,
            &mut p.baseline,
            &mut p.out_dir,
        ] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        if let ResponseConfig::File { path } = &mut self.scenario.response {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn learning_params(&self) -> LearningParams {
        let d = &self.dictionary;
        LearningParams {
            dim: self.subspace.dim,
            center: self.subspace.center,
            patch_side: d.patch_side,
            stride: d.stride,
            sparsity: d.sparsity,
            odl: OdlParams {
                n_atoms: d.n_atoms,
                mu_dl: d.mu_dl,
                epochs: d.epochs,
                batch_size: d.batch_size,
                seed: d.seed,
            },
            window: self.subspace.rough_window,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        let p = &self.paths;
        match self.workflow {
            Workflow::Simulate => {
                need(
                    p.reference.is_some() || self.scenario.synthetic.is_some(),
                    "simulate needs paths.reference or scenario.synthetic",
                );
                need(
                    !(p.reference.is_some() && self.scenario.synthetic.is_some()),
                    "paths.reference and scenario.synthetic are mutually exclusive",
                );
            }
            Workflow::Fuse => {
                need(p.y_h.is_some(), "fuse needs paths.y_h");
                need(p.y_m.is_some(), "fuse needs paths.y_m");
            }
            Workflow::Evaluate => {
                need(p.reference.is_some(), "evaluate needs paths.reference");
                need(p.fused.is_some(), "evaluate needs paths.fused");
            }
            Workflow::Sweep => {
                need(p.y_h.is_some(), "sweep needs paths.y_h");
                need(p.y_m.is_some(), "sweep needs paths.y_m");
                need(p.reference.is_some(), "sweep needs paths.reference");
                need(self.sweep.is_some(), "sweep needs a sweep block");
            }
        }

        let s = &self.scenario;
        need(s.d >= 1, "scenario.d must be at least 1");
        need(s.phase.0 < s.d.max(1) && s.phase.1 < s.d.max(1), "scenario.phase must lie in [0, d)");
        need(s.kernel_size % 2 == 1, "scenario.kernel_size must be odd");
        need(s.kernel_scale > 0.0 && s.kernel_scale.is_finite(), "scenario.kernel_scale must be positive");
        need(
            s.hs_snr_db.values().iter().chain(s.ms_snr_db.values()).all(|v| v.is_finite()),
            "SNR values must be finite",
        );
        need(!s.hs_snr_db.values().is_empty() && !s.ms_snr_db.values().is_empty(), "SNR lists must not be empty");
        if let ResponseConfig::Box { bands } = s.response {
            need(bands >= 1, "scenario.response.bands must be at least 1");
        }
        if let Some(syn) = &s.synthetic {
            need(syn.width >= 1 && syn.height >= 1 && syn.bands >= 1, "synthetic dimensions must be positive");
            need(syn.endmembers >= 1 && syn.regions >= 1, "synthetic endmembers and regions must be positive");
        }

        need(self.subspace.dim >= 1, "subspace.dim must be at least 1");
        if let Some(w) = self.subspace.rough_window {
            need(w % 2 == 1, "subspace.rough_window must be odd");
        }

        let d = &self.dictionary;
        need(d.patch_side >= 1, "dictionary.patch_side must be at least 1");
        need(d.stride >= 1 && d.stride <= d.patch_side, "dictionary.stride must lie in [1, patch_side]");
        need(d.n_atoms >= 1, "dictionary.n_atoms must be at least 1");
        need(d.sparsity >= 1, "dictionary.sparsity (K) must be at least 1");
        need(
            d.sparsity <= d.n_atoms && d.sparsity <= d.patch_side * d.patch_side,
            "dictionary.sparsity must not exceed n_atoms or the patch size",
        );
        need(d.mu_dl >= 0.0 && d.mu_dl.is_finite(), "dictionary.mu_dl must be non-negative");
        need(d.batch_size >= 1, "dictionary.batch_size must be at least 1");

        let v = &self.solver;
        need(v.lambda >= 0.0 && v.lambda.is_finite(), "solver.lambda must be non-negative");
        need(v.mu_a >= 0.0 && v.mu_a.is_finite(), "solver.mu_a must be non-negative");
        need(v.inner_iters >= 1, "solver.inner_iters must be at least 1");
        need(v.max_outer >= 1, "solver.max_outer must be at least 1");
        need(v.tolerance >= 0.0, "solver.tolerance must be non-negative");
        match &v.mu {
            MuRule::Value(m) => need(*m > 0.0 && m.is_finite(), "solver.mu must be positive"),
            MuRule::Expr(e) => need(
                MuRule::coefficient(e).is_some(),
                "solver.mu must be a number or \"<c>/normF(NH)\"",
            ),
        }

        if let Some(sw) = &self.sweep {
            need(!sw.values.is_empty(), "sweep.values must not be empty");
            let ok = sw.values.iter().all(|x| {
                x.is_finite()
                    && match sw.parameter {
                        SweepParameter::Lambda => *x >= 0.0,
                        SweepParameter::Mu => *x > 0.0,
                        _ => *x >= 1.0 && x.fract() == 0.0,
                    }
            });
            need(
                ok,
                if sw.parameter.integral() {
                    "sweep values must be positive integers for this parameter"
                } else {
                    "sweep values out of range for this parameter"
                },
            );
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

//! The four batch workflows behind the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ResponseConfig, RunConfig, SweepParameter, Workflow};
use crate::cube::{read_cube, write_cube, ImageCube};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::observation::{
    blur_bands, downsample, simulate_scenario, snr_to_variance, spectral_degrade, synthetic_reference,
    BlurKernel, NoiseSpec, ObservationModel, SnrConvention, SpectralResponse, SyntheticSpec,
};
use crate::pipeline::{fuse_prepared, prepare, LearningParams, Prepared};
use crate::roughest::{default_window, rough_estimate};
use crate::solver::{FusionResult, TraceEntry};
use crate::sparsedict::{extract_supports, DictionarySet};
use crate::subspace::SubspaceBasis;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_intermediates: bool,
    pub reuse_dictionaries: bool,
}

impl RunOptions {
    /// Applies the overrides and returns the output directory.
    fn apply(&self, cfg: &mut RunConfig) -> Result<PathBuf> {
        if let Some(seed) = self.seed {
            cfg.scenario.seed = seed;
            cfg.dictionary.seed = seed;
            if let Some(s) = cfg.scenario.synthetic.as_mut() {
                s.seed = seed;
            }
        }
        self.out_dir
            .clone()
            .or_else(|| cfg.paths.out_dir.clone())
            .ok_or_else(|| Error::Config(vec!["no output directory: pass --out or set paths.out_dir".into()]))
    }
}

/// Scenario record written next to the simulated observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ObservationModel,
    /// `(bands, height, width)` of the full-resolution reference.
    pub reference_shape: (usize, usize, usize),
    pub hs_snr_db: Vec<f64>,
    pub ms_snr_db: Vec<f64>,
    pub snr_convention: SnrConvention,
    pub noiseless: bool,
    pub hs_noise_norm: f64,
    pub ms_noise_norm: f64,
    pub hs_realized_variances: Vec<f64>,
    pub ms_realized_variances: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// File names relative to the manifest's directory.
    pub y_h: String,
    pub y_m: String,
    pub reference: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub lambda: f64,
    pub mu: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_objective: f64,
    pub energy_fraction: f64,
    pub reused_dictionaries: bool,
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(vec![format!("paths.{name} is required")]))
}

/// Dispatches on `cfg.workflow`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<()> {
    match cfg.workflow {
        Workflow::Simulate => run_simulate(cfg, opts).map(|_| ()),
        Workflow::Fuse => run_fuse(cfg, opts).map(|_| ()),
        Workflow::Evaluate => run_evaluate(cfg, opts).map(|_| ()),
        Workflow::Sweep => run_sweep(cfg, opts),
    }
}

pub fn response_from_config(cfg: &ResponseConfig, n_in: usize) -> Result<SpectralResponse> {
    match cfg {
        ResponseConfig::Box { bands } => SpectralResponse::box_filters(n_in, *bands),
        ResponseConfig::Panchromatic => SpectralResponse::panchromatic(n_in),
        ResponseConfig::Identity => Ok(SpectralResponse::identity(n_in)),
        ResponseConfig::File { path } => {
            let r = SpectralResponse::from_cube(&read_cube(path)?)?;
            if r.n_in() != n_in {
                return Err(Error::shape(format!(
                    "response file maps {} bands, the image has {n_in}",
                    r.n_in()
                )));
            }
            Ok(r)
        }
    }
}

/// Writes `y_h.sfc`, `y_m.sfc`, `manifest.json` and, for a synthetic scene,
/// `reference.sfc`.
pub fn run_simulate(cfg: &RunConfig, opts: &RunOptions) -> Result<Manifest> {
    let mut cfg = cfg.clone();
    let out = opts.apply(&mut cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let s = &cfg.scenario;
    let (reference, reference_name) = match (&s.synthetic, &cfg.paths.reference) {
        (Some(spec), _) => {
            let r = synthetic_reference(spec)?;
            write_cube(&r, out.join("reference.sfc"))?;
            (r, "reference.sfc".to_string())
        }
        (None, Some(p)) => (read_cube(p)?, p.display().to_string()),
        (None, None) => return Err(Error::Config(vec!["simulate needs a reference".into()])),
    };
    let n_in = reference.n_bands();
    let blur = BlurKernel::exponential(s.kernel_size, s.kernel_scale)?;
    let response = response_from_config(&s.response, n_in)?;
    let hs_snr = s.hs_snr_db.expand(n_in)?;
    let ms_snr = s.ms_snr_db.expand(response.n_out())?;
    let (hs_variances, ms_variances) = if s.noiseless {
        (vec![0.0; n_in], vec![0.0; response.n_out()])
    } else {
        let clean_h = downsample(&blur_bands(&reference, &blur)?, s.d, s.phase)?;
        let clean_m = spectral_degrade(&reference, &response)?;
        (
            snr_to_variance(&clean_h, &hs_snr, s.snr_convention)?,
            snr_to_variance(&clean_m, &ms_snr, s.snr_convention)?,
        )
    };
    let model = ObservationModel {
        blur,
        d: s.d,
        phase: s.phase,
        response,
        noise: NoiseSpec {
            hs_variances,
            ms_variances,
            rng_seed: s.seed,
        },
    };
    let sim = simulate_scenario(&reference, &model)?;
    write_cube(&sim.y_h, out.join("y_h.sfc"))?;
    write_cube(&sim.y_m, out.join("y_m.sfc"))?;
    let manifest = Manifest {
        model,
        reference_shape: (reference.n_bands(), reference.height(), reference.width()),
        hs_snr_db: hs_snr,
        ms_snr_db: ms_snr,
        snr_convention: s.snr_convention,
        noiseless: s.noiseless,
        hs_noise_norm: sim.hs_noise_norm,
        ms_noise_norm: sim.ms_noise_norm,
        hs_realized_variances: sim.hs_realized_variances,
        ms_realized_variances: sim.ms_realized_variances,
        synthetic: s.synthetic.clone(),
        y_h: "y_h.sfc".into(),
        y_m: "y_m.sfc".into(),
        reference: reference_name,
    };
    manifest.save(out.join("manifest.json"))?;
    log::info!("simulated scenario written to {}", out.display());
    Ok(manifest)
}

/// Observations, observation model and HS noise norm for fusion.
struct Inputs {
    y_h: ImageCube,
    y_m: ImageCube,
    model: ObservationModel,
    hs_noise_norm: f64,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let y_h = read_cube(required(&cfg.paths.y_h, "y_h")?)?;
    let y_m = read_cube(required(&cfg.paths.y_m, "y_m")?)?;
    if let Some(mp) = &cfg.paths.manifest {
        let m = Manifest::load(mp)?;
        m.model.validate(y_h.n_bands(), y_m.height(), y_m.width())?;
        return Ok(Inputs {
            y_h,
            y_m,
            model: m.model,
            hs_noise_norm: m.hs_noise_norm,
        });
    }
    // No manifest: the observed images stand in for the clean signals when
    // turning SNRs into variances.
    let s = &cfg.scenario;
    log::warn!("no manifest given; noise variances are estimated from the configured SNRs on the observed data");
    let n_in = y_h.n_bands();
    let response = response_from_config(&s.response, n_in)?;
    let hs_variances = snr_to_variance(&y_h, &s.hs_snr_db.expand(n_in)?, s.snr_convention)?;
    let ms_variances = snr_to_variance(&y_m, &s.ms_snr_db.expand(response.n_out())?, s.snr_convention)?;
    let hs_noise_norm = (hs_variances.iter().sum::<f64>() * y_h.n_pixels() as f64).sqrt();
    let model = ObservationModel {
        blur: BlurKernel::exponential(s.kernel_size, s.kernel_scale)?,
        d: s.d,
        phase: s.phase,
        response,
        noise: NoiseSpec {
            hs_variances,
            ms_variances,
            rng_seed: s.seed,
        },
    };
    model.validate(n_in, y_m.height(), y_m.width())?;
    if y_m.n_bands() != model.response.n_out() {
        return Err(Error::shape(format!(
            "MS image has {} bands, the response produces {}",
            y_m.n_bands(),
            model.response.n_out()
        )));
    }
    if y_h.height() * s.d != y_m.height() || y_h.width() * s.d != y_m.width() {
        return Err(Error::shape(format!(
            "HS {}x{} and MS {}x{} are not related by d = {}",
            y_h.height(),
            y_h.width(),
            y_m.height(),
            y_m.width(),
            s.d
        )));
    }
    Ok(Inputs {
        y_h,
        y_m,
        model,
        hs_noise_norm,
    })
}

fn load_prepared(dir: &Path, inputs: &Inputs, window: usize) -> Result<Prepared> {
    let basis = SubspaceBasis::load(dir.join("basis.sfc"), dir.join("basis.json"))?;
    let dict_set = DictionarySet::load(dir.join("dictionaries"))?;
    if dict_set.len() != basis.dim() {
        return Err(Error::shape(format!(
            "{} stored dictionaries for a {}-dimensional subspace",
            dict_set.len(),
            basis.dim()
        )));
    }
    let u_rough = rough_estimate(&inputs.y_h, &inputs.y_m, &basis, &inputs.model, window)?;
    let x_rough = basis.reconstruct(&u_rough)?;
    Ok(Prepared {
        basis,
        u_rough,
        x_rough,
        dict_set,
        learning_traces: Vec::new(),
    })
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("outer_iter,inner_iters,objective,rmse_vs_reference\n");
    for t in trace {
        let rmse = t.rmse.map(|r| format!("{r:.17e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.17e},{}", t.outer, t.inner_iters, t.objective, rmse);
    }
    s
}

/// Writes `x_hat.sfc`, `u_hat.sfc`, `x_rough.sfc`, `basis.sfc`/`basis.json`,
/// `dictionaries/` (with the initial codes), `codes.json` (final codes),
/// `trace.csv` and `fuse_summary.json`.
pub fn run_fuse(cfg: &RunConfig, opts: &RunOptions) -> Result<FuseSummary> {
    let mut cfg = cfg.clone();
    let out = opts.apply(&mut cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let inputs = load_inputs(&cfg)?;
    let reference = cfg.paths.reference.as_ref().map(read_cube).transpose()?;
    let learning = cfg.learning_params();
    let window = learning.window.unwrap_or_else(|| default_window(inputs.model.d));
    let prepared = if opts.reuse_dictionaries {
        log::info!("reusing basis and dictionaries from {}", out.display());
        load_prepared(&out, &inputs, window)?
    } else {
        prepare(&inputs.y_h, &inputs.y_m, &inputs.model, &learning)?
    };
    let mu = cfg.solver.mu.resolve(inputs.hs_noise_norm)?;
    let params = cfg.solver.params(mu);
    let result = fuse_prepared(
        &inputs.y_h,
        &inputs.y_m,
        &inputs.model,
        &prepared,
        cfg.solver.lambda,
        &params,
        reference.as_ref(),
    )?;
    write_fusion(&out, &prepared, &result, opts.dump_intermediates)?;
    let summary = FuseSummary {
        lambda: cfg.solver.lambda,
        mu,
        converged: result.converged,
        outer_iterations: result.trace.len() - 1,
        final_objective: result.trace.last().map(|t| t.objective).unwrap_or(f64::NAN),
        energy_fraction: prepared.basis.energy_fraction(),
        reused_dictionaries: opts.reuse_dictionaries,
    };
    write_text(&out.join("fuse_summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    if !result.converged {
        log::warn!("outer budget of {} iterations exhausted before convergence", params.max_outer);
    }
    Ok(summary)
}

fn write_fusion(out: &Path, prepared: &Prepared, result: &FusionResult, dump: bool) -> Result<()> {
    write_cube(&result.x_hat, out.join("x_hat.sfc"))?;
    write_cube(&result.u_hat, out.join("u_hat.sfc"))?;
    write_cube(&prepared.x_rough, out.join("x_rough.sfc"))?;
    prepared.basis.save(out.join("basis.sfc"), out.join("basis.json"))?;
    prepared.dict_set.save(out.join("dictionaries"))?;
    write_text(&out.join("codes.json"), &serde_json::to_string(&result.codes)?)?;
    write_text(&out.join("trace.csv"), &trace_csv(&result.trace))?;
    if dump {
        write_cube(&prepared.u_rough, out.join("u_tilde.sfc"))?;
        let supports: Vec<Vec<(usize, usize)>> = prepared
            .dict_set
            .bands()
            .iter()
            .map(|b| extract_supports(&b.code).into_iter().collect())
            .collect();
        write_text(&out.join("supports.json"), &serde_json::to_string(&supports)?)?;
        if !prepared.learning_traces.is_empty() {
            write_text(
                &out.join("learning_traces.json"),
                &serde_json::to_string(&prepared.learning_traces)?,
            )?;
        }
    }
    Ok(())
}

const METRIC_HEADER: &str = "rmse_paper,rmse_sqrt,sam_deg,uiqi,ergas,dd,sam_skipped_pixels";

fn metric_fields(r: &MetricReport) -> String {
    format!(
        "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
        r.rmse_paper, r.rmse_sqrt, r.sam_deg, r.uiqi, r.ergas, r.dd, r.sam_skipped_pixels
    )
}

fn resolution_ratio(cfg: &RunConfig) -> Result<f64> {
    let d = match &cfg.paths.manifest {
        Some(p) => Manifest::load(p)?.model.d,
        None => cfg.scenario.d,
    };
    Ok(1.0 / (d * d) as f64)
}

/// Writes `report.json`, `metrics.csv`, `per_band_rmse.csv` and, when a
/// baseline is configured, `baseline_report.json` with a second CSV row.
pub fn run_evaluate(cfg: &RunConfig, opts: &RunOptions) -> Result<MetricReport> {
    let mut cfg = cfg.clone();
    let out = opts.apply(&mut cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let reference = read_cube(required(&cfg.paths.reference, "reference")?)?;
    let fused = read_cube(required(&cfg.paths.fused, "fused")?)?;
    let ratio = resolution_ratio(&cfg)?;
    let report = evaluate(&reference, &fused, ratio)?;
    report.write_json(out.join("report.json"))?;
    let mut csv = format!("label,{METRIC_HEADER}\nfused,{}\n", metric_fields(&report));
    let mut per_band = vec![report.per_band_rmse.clone()];
    if let Some(bp) = &cfg.paths.baseline {
        let base = evaluate(&reference, &read_cube(bp)?, ratio)?;
        base.write_json(out.join("baseline_report.json"))?;
        let _ = writeln!(csv, "baseline,{}", metric_fields(&base));
        per_band.push(base.per_band_rmse);
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    let mut pb = String::from(if per_band.len() > 1 { "band,fused,baseline\n" } else { "band,fused\n" });
    for b in 0..reference.n_bands() {
        let cols: Vec<String> = per_band.iter().map(|v| format!("{:.17e}", v[b])).collect();
        let _ = writeln!(pb, "{b},{}", cols.join(","));
    }
    write_text(&out.join("per_band_rmse.csv"), &pb)?;
    Ok(report)
}

/// Writes `sweep.csv` with one row per value. Runs that stall or diverge
/// are recorded with empty metrics instead of aborting the sweep.
pub fn run_sweep(cfg: &RunConfig, opts: &RunOptions) -> Result<()> {
    let mut cfg = cfg.clone();
    let out = opts.apply(&mut cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config(vec!["sweep needs a sweep block".into()]))?;
    let inputs = load_inputs(&cfg)?;
    let reference = read_cube(required(&cfg.paths.reference, "reference")?)?;
    let ratio = 1.0 / (inputs.model.d * inputs.model.d) as f64;
    let base_learning = cfg.learning_params();
    let shared = match sweep.parameter {
        SweepParameter::Lambda | SweepParameter::Mu | SweepParameter::Sparsity => {
            Some(prepare(&inputs.y_h, &inputs.y_m, &inputs.model, &base_learning)?)
        }
        SweepParameter::Dim | SweepParameter::Stride => None,
    };
    let mut csv = format!("{},status,outer_iterations,{METRIC_HEADER}\n", sweep.parameter.name());
    for &value in &sweep.values {
        let mut lambda = cfg.solver.lambda;
        let mut mu = cfg.solver.mu.resolve(inputs.hs_noise_norm)?;
        let prepared = match sweep.parameter {
            SweepParameter::Lambda => {
                lambda = value;
                shared.clone().expect("shared stage")
            }
            SweepParameter::Mu => {
                mu = value;
                shared.clone().expect("shared stage")
            }
            SweepParameter::Sparsity => shared.as_ref().expect("shared stage").recode(value as usize)?,
            SweepParameter::Dim => prepare(&inputs.y_h, &inputs.y_m, &inputs.model, &LearningParams {
                dim: value as usize,
                ..base_learning.clone()
            })?,
            SweepParameter::Stride => prepare(&inputs.y_h, &inputs.y_m, &inputs.model, &LearningParams {
                stride: value as usize,
                ..base_learning.clone()
            })?,
        };
        let params = cfg.solver.params(mu);
        let outcome = fuse_prepared(&inputs.y_h, &inputs.y_m, &inputs.model, &prepared, lambda, &params, None);
        match outcome {
            Ok(res) => {
                let report = evaluate(&reference, &res.x_hat, ratio)?;
                let status = if res.converged { "converged" } else { "budget" };
                let _ = writeln!(csv, "{value},{status},{},{}", res.trace.len() - 1, metric_fields(&report));
                log::info!("{} = {value}: rmse {:.6e}", sweep.parameter.name(), report.rmse_sqrt);
            }
            Err(e @ (Error::Stalled { .. } | Error::Divergence { .. })) => {
                log::warn!("{} = {value}: {e}", sweep.parameter.name());
                let status = if matches!(e, Error::Stalled { .. }) { "stalled" } else { "diverged" };
                let _ = writeln!(csv, "{value},{status},,,,,,,,");
            }
            Err(e) => return Err(e),
        }
    }
    write_text(&out.join("sweep.csv"), &csv)
}

use std::fs;
use std::path::Path;
use std::process::Command;

use specfuse::config::{PerBand, ResponseConfig, RunConfig, SweepConfig, SweepParameter, Workflow};
use specfuse::cube::read_cube;
use specfuse::observation::{blur_bands, downsample, BlurKernel, SyntheticSpec};
use specfuse::workflow::{run_evaluate, run_fuse, run_simulate, run_sweep, Manifest, RunOptions};
use specfuse::Error;

fn small_config(workflow: Workflow) -> RunConfig {
    let mut cfg = RunConfig::new(workflow);
    cfg.scenario.kernel_size = 3;
    cfg.scenario.d = 2;
    cfg.scenario.response = ResponseConfig::Box { bands: 2 };
    cfg.scenario.seed = 3;
    cfg.subspace.dim = 3;
    cfg.dictionary.patch_side = 4;
    cfg.dictionary.stride = 2;
    cfg.dictionary.n_atoms = 16;
    cfg.dictionary.sparsity = 2;
    cfg.dictionary.epochs = 3;
    cfg.dictionary.batch_size = 16;
    cfg.solver.max_outer = 5;
    cfg.solver.inner_iters = 10;
    cfg
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

fn simulate(dir: &Path) -> Manifest {
    let mut cfg = small_config(Workflow::Simulate);
    cfg.scenario.synthetic = Some(SyntheticSpec {
        width: 16,
        height: 16,
        bands: 8,
        endmembers: 3,
        regions: 4,
        seed: 1,
        scale: 1.0,
    });
    run_simulate(&cfg, &opts(dir)).unwrap()
}

fn fuse_config(sim: &Path) -> RunConfig {
    let mut cfg = small_config(Workflow::Fuse);
    cfg.paths.y_h = Some(sim.join("y_h.sfc"));
    cfg.paths.y_m = Some(sim.join("y_m.sfc"));
    cfg.paths.manifest = Some(sim.join("manifest.json"));
    cfg.paths.reference = Some(sim.join("reference.sfc"));
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a);
    simulate(&b);
    for f in ["y_h.sfc", "y_m.sfc", "reference.sfc", "manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
}

#[test]
fn manifest_records_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let m = simulate(tmp.path());
    let loaded = Manifest::load(tmp.path().join("manifest.json")).unwrap();
    assert_eq!(m, loaded);
    assert_eq!(m.model.noise.hs_variances.len(), 8);
    assert_eq!(m.model.noise.ms_variances.len(), 2);
    assert_eq!(m.hs_realized_variances.len(), 8);
    assert!(m.hs_noise_norm > 0.0 && m.ms_noise_norm > 0.0);
    assert_eq!(m.reference_shape, (8, 16, 16));
}

#[test]
fn noiseless_simulation_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Workflow::Simulate);
    cfg.scenario.noiseless = true;
    cfg.scenario.synthetic = Some(SyntheticSpec {
        width: 8,
        height: 8,
        bands: 4,
        endmembers: 2,
        regions: 3,
        seed: 5,
        scale: 1.0,
    });
    let m = run_simulate(&cfg, &opts(tmp.path())).unwrap();
    assert_eq!(m.hs_noise_norm, 0.0);
    let reference = read_cube(tmp.path().join("reference.sfc")).unwrap();
    let expected = downsample(&blur_bands(&reference, &BlurKernel::exponential(3, 1.0).unwrap()).unwrap(), 2, (0, 0)).unwrap();
    assert_eq!(read_cube(tmp.path().join("y_h.sfc")).unwrap(), expected);
}

#[test]
fn fuse_is_deterministic_and_reuses_dictionaries() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let cfg = fuse_config(&sim);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = run_fuse(&cfg, &RunOptions { dump_intermediates: true, ..opts(&a) }).unwrap();
    run_fuse(&cfg, &opts(&b)).unwrap();
    assert_eq!(read(a.join("x_hat.sfc")), read(b.join("x_hat.sfc")));
    assert_eq!(read(a.join("trace.csv")), read(b.join("trace.csv")));
    for f in ["u_hat.sfc", "x_rough.sfc", "basis.sfc", "basis.json", "codes.json", "u_tilde.sfc", "supports.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert!(a.join("dictionaries/dictionaries.json").exists());
    assert_eq!(sa.outer_iterations + 2, fs::read_to_string(a.join("trace.csv")).unwrap().lines().count());

    let first = read(a.join("x_hat.sfc"));
    let again = run_fuse(&cfg, &RunOptions { reuse_dictionaries: true, ..opts(&a) }).unwrap();
    assert!(again.reused_dictionaries);
    assert_eq!(read(a.join("x_hat.sfc")), first);
}

#[test]
fn trace_is_monotone_and_lambda_zero_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    for lambda in [0.0, 5.0] {
        let mut cfg = fuse_config(&sim);
        cfg.solver.lambda = lambda;
        let out = tmp.path().join(format!("l{lambda}"));
        run_fuse(&cfg, &opts(&out)).unwrap();
        let text = fs::read_to_string(out.join("trace.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("outer_iter,inner_iters,objective,rmse_vs_reference"));
        let obj: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn fuse_without_manifest_estimates_variances() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let mut cfg = fuse_config(&sim);
    cfg.paths.manifest = None;
    let s = run_fuse(&cfg, &opts(&tmp.path().join("out"))).unwrap();
    assert!(s.mu > 0.0);
}

#[test]
fn mismatched_resolution_is_a_shape_error() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let mut cfg = fuse_config(&sim);
    cfg.paths.manifest = None;
    cfg.scenario.d = 4;
    let err = run_fuse(&cfg, &opts(&tmp.path().join("out"))).unwrap_err();
    assert!(matches!(err, Error::Shape(_) | Error::InvalidArgument(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    cfg.scenario.d = 2;
    cfg.scenario.response = ResponseConfig::Box { bands: 4 };
    let err = run_fuse(&cfg, &opts(&tmp.path().join("out"))).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn evaluate_writes_both_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let mut cfg = small_config(Workflow::Evaluate);
    cfg.paths.reference = Some(sim.join("reference.sfc"));
    cfg.paths.fused = Some(sim.join("reference.sfc"));
    cfg.paths.baseline = Some(sim.join("reference.sfc"));
    let out = tmp.path().join("eval");
    let r = run_evaluate(&cfg, &opts(&out)).unwrap();
    assert_eq!((r.rmse_paper, r.sam_deg, r.uiqi, r.ergas, r.dd), (0.0, 0.0, 1.0, 0.0, 0.0));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("baseline_report.json").exists());
    let json: serde_json::Value = serde_json::from_slice(&read(out.join("report.json"))).unwrap();
    for key in ["rmse_paper", "rmse_sqrt", "sam_deg", "uiqi", "ergas", "dd", "per_band_rmse", "sam_skipped_pixels"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn lambda_sweep_has_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let mut cfg = fuse_config(&sim);
    cfg.workflow = Workflow::Sweep;
    cfg.sweep = Some(SweepConfig {
        parameter: SweepParameter::Lambda,
        values: vec![0.5, 1.0, 5.0, 10.0, 50.0],
    });
    let out = tmp.path().join("sweep");
    run_sweep(&cfg, &opts(&out)).unwrap();
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("lambda,status,"));
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".lock"), b"").unwrap();
    let mut cfg = small_config(Workflow::Simulate);
    cfg.scenario.synthetic = Some(SyntheticSpec {
        width: 8,
        height: 8,
        bands: 4,
        endmembers: 2,
        regions: 3,
        seed: 0,
        scale: 1.0,
    });
    let err = run_simulate(&cfg, &opts(tmp.path())).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn config_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Workflow::Fuse);
    cfg.paths.y_h = Some("y_h.sfc".into());
    cfg.paths.y_m = Some("y_m.sfc".into());
    cfg.scenario.hs_snr_db = PerBand::List(vec![35.0; 8]);
    let path = tmp.path().join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded.paths.y_h.as_deref(), Some(tmp.path().join("y_h.sfc").as_path()));
    let mut expected = cfg.clone();
    expected.resolve_paths(tmp.path());
    assert_eq!(loaded, expected);
    assert_eq!(RunConfig::from_json(&loaded.to_json()).unwrap(), loaded);
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_specfuse");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"workflow": "fuse", "solver": {"lambda": -1}}"#).unwrap();
    let status = Command::new(exe).args(["fuse", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let missing = tmp.path().join("missing.json");
    fs::write(
        &missing,
        r#"{"workflow": "fuse", "paths": {"y_h": "nope.sfc", "y_m": "nope.sfc", "out_dir": "out"}}"#,
    )
    .unwrap();
    let status = Command::new(exe).args(["fuse", "--config"]).arg(&missing).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let sim = tmp.path().join("sim.json");
    fs::write(
        &sim,
        r#"{"workflow": "simulate", "scenario": {"d": 2, "kernel_size": 3, "response": {"kind": "box", "bands": 2},
            "synthetic": {"width": 8, "height": 8, "bands": 4}}}"#,
    )
    .unwrap();
    let out = tmp.path().join("simout");
    let status = Command::new(exe)
        .args(["simulate", "--seed", "9", "--config"])
        .arg(&sim)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(Manifest::load(out.join("manifest.json")).unwrap().model.noise.rng_seed, 9);
}

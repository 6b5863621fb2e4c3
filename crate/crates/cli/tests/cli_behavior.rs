//! Behavioral tests of the `gwp-dti` binary: the documented subcommand
//! workflow, artifact formats, and the exit-code contract (0 success,
//! 2 usage, 3 data/validation, 4 numerical).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gwp_dti_core::field::{write_field, TensorGrid};
use gwp_dti_core::spd::SymTensor3;

fn workdir(label: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{label}"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gwp_dti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwp-dti"))
        .args(args)
        .output()
        .expect("binary failed to launch")
}

fn run_ok(args: &[&str]) -> Output {
    let out = gwp_dti(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    gwp_dti(args).status.code().expect("no exit code")
}

fn path(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// A small valid tensor field on disk, for commands that need one.
fn tiny_field(dir: &Path, name: &str) -> PathBuf {
    let tensors: Vec<SymTensor3> = (0..9)
        .map(|k| {
            let s = 1.0 + 0.05 * k as f64;
            SymTensor3::from_diagonal(1.0e-3 * s, 0.6e-3 * s, 0.4e-3 * s)
        })
        .collect();
    let grid = TensorGrid::new([3, 3, 1], [1.0, 1.0, 1.0], tensors, None).unwrap();
    let file = dir.join(name);
    write_field(&grid, &file).unwrap();
    file
}

#[test]
fn subcommand_workflow_produces_consistent_artifacts() {
    let dir = workdir("workflow");

    // synth: truth + noisy refit + raw DWI measurements.
    run_ok(&[
        "synth",
        "--dataset",
        "smooth",
        "--dims",
        "9,9,1",
        "--seed",
        "3",
        "--out",
        &path(&dir),
    ]);
    for f in ["truth.json", "noisy.json", "dwi.json"] {
        assert!(dir.join(f).exists(), "synth did not write {f}");
    }

    // estimate-dti on the synthesized DWI reproduces noisy.json exactly:
    // both are the same least-squares fit of the same measurements.
    let refit = dir.join("refit.json");
    run_ok(&[
        "estimate-dti",
        "--dwi",
        &path(&dir.join("dwi.json")),
        "--out",
        &path(&refit),
    ]);
    assert_eq!(
        std::fs::read(&refit).unwrap(),
        std::fs::read(dir.join("noisy.json")).unwrap(),
        "estimate-dti must reproduce the synth-stage fit byte for byte"
    );

    // downsample: kept lattice + split bookkeeping.
    run_ok(&[
        "downsample",
        "--field",
        &path(&dir.join("noisy.json")),
        "--out",
        &path(&dir),
    ]);
    assert!(dir.join("lowres.json").exists() && dir.join("split.json").exists());

    // fit: short chain, small lattice.
    let archive = dir.join("archive.jsonl");
    run_ok(&[
        "fit",
        "--field",
        &path(&dir.join("lowres.json")),
        "--seed",
        "3",
        "--total",
        "600",
        "--burn-in",
        "200",
        "--thin",
        "20",
        "--out",
        &path(&archive),
    ]);
    let first_line = std::fs::read_to_string(&archive).unwrap();
    assert!(first_line.starts_with('{'), "archive must be JSON lines");

    // interp with all three methods at the full-resolution sites.
    run_ok(&[
        "interp",
        "--method",
        "gwp",
        "--source",
        &path(&dir.join("lowres.json")),
        "--like",
        &path(&dir.join("noisy.json")),
        "--archive",
        &path(&archive),
        "--out",
        &path(&dir.join("pred_gwp.json")),
        "--uncertainty",
        &path(&dir.join("unc.json")),
    ]);
    for method in ["linear", "logeuclid"] {
        run_ok(&[
            "interp",
            "--method",
            method,
            "--source",
            &path(&dir.join("lowres.json")),
            "--like",
            &path(&dir.join("noisy.json")),
            "--out",
            &path(&dir.join(format!("pred_{method}.json"))),
        ]);
    }

    // eval: one CSV with 3 methods × 2 metrics, echoed to stdout.
    let out = run_ok(&[
        "eval",
        "--truth",
        &path(&dir.join("truth.json")),
        "--split",
        &path(&dir.join("split.json")),
        "--pred",
        &format!("gwp={}", path(&dir.join("pred_gwp.json"))),
        "--pred",
        &format!("linear={}", path(&dir.join("pred_linear.json"))),
        "--pred",
        &format!("logeuclid={}", path(&dir.join("pred_logeuclid.json"))),
        "--out",
        &path(&dir.join("metrics.csv")),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("method,metric,mean,std,n,spd_violations"));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv, stdout, "eval must write the same table it prints");
    assert_eq!(csv.lines().count(), 1 + 6, "3 methods x 2 metrics + header");
    for line in csv.lines().skip(1) {
        let mean: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(mean.is_finite() && mean > 0.0, "bad metric row: {line}");
    }

    // glyphs: an SVG slice of the GWP prediction.
    run_ok(&[
        "glyphs",
        "--field",
        &path(&dir.join("pred_gwp.json")),
        "--format",
        "svg-slice",
        "--slice",
        "0",
        "--out",
        &path(&dir.join("glyphs.svg")),
    ]);
    let svg = std::fs::read_to_string(dir.join("glyphs.svg")).unwrap();
    assert!(svg.contains("<svg"), "glyph export must be an SVG document");
}

#[test]
fn pipeline_accepts_config_file_and_seed_override() {
    use gwp_dti_cli::config::{preset_config, DatasetSpec, Preset};

    let dir = workdir("config-run");
    let mut config = preset_config(Preset::Quick);
    if let DatasetSpec::Smooth { dims, .. } = &mut config.dataset {
        *dims = [9, 9, 1];
    }
    config.mcmc.total = 500;
    config.mcmc.burn_in = 200;
    config.mcmc.thin = 20;
    let config_path = dir.join("experiment.json");
    config.write_json(&config_path).unwrap();

    run_ok(&[
        "pipeline",
        "--config",
        &path(&config_path),
        "--seed",
        "11",
        "--out",
        &path(&dir.join("run")),
    ]);
    assert!(dir.join("run/metrics.csv").exists());
    let saved = std::fs::read_to_string(dir.join("run/config.json")).unwrap();
    assert!(
        saved.contains("\"seed\": 11"),
        "saved config must carry the overridden seed"
    );
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = workdir("usage");
    let field = tiny_field(&dir, "field.json");

    // No dataset selector for the pipeline.
    assert_eq!(exit_code(&["pipeline", "--out", &path(&dir.join("x"))]), 2);

    // GWP interpolation without an archive.
    assert_eq!(
        exit_code(&[
            "interp",
            "--method",
            "gwp",
            "--source",
            &path(&field),
            "--like",
            &path(&field),
            "--out",
            &path(&dir.join("pred.json")),
        ]),
        2
    );

    // Sampling mode is a GWP feature.
    assert_eq!(
        exit_code(&[
            "interp",
            "--method",
            "linear",
            "--mode",
            "sample",
            "--source",
            &path(&field),
            "--like",
            &path(&field),
            "--out",
            &path(&dir.join("pred.json")),
        ]),
        2
    );

    // Unknown flags are rejected by the parser with the same code.
    assert_eq!(exit_code(&["synth", "--no-such-flag"]), 2);
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = workdir("data-errors");

    // Missing input file.
    assert_eq!(
        exit_code(&[
            "downsample",
            "--field",
            &path(&dir.join("missing.json")),
            "--out",
            &path(&dir),
        ]),
        3
    );

    // Corrupt JSON.
    let broken = dir.join("broken.json");
    std::fs::write(&broken, b"{ this is not json").unwrap();
    assert_eq!(
        exit_code(&[
            "estimate-dti",
            "--dwi",
            &path(&broken),
            "--out",
            &path(&dir.join("out.json")),
        ]),
        3
    );

    // Structurally valid JSON that fails validation: s0 must be positive.
    let invalid = dir.join("invalid.json");
    std::fs::write(
        &invalid,
        serde_json::json!({
            "version": 1,
            "dims": [1, 1, 1],
            "s0": [0.0],
            "measurements": [],
        })
        .to_string(),
    )
    .unwrap();
    assert_eq!(
        exit_code(&[
            "estimate-dti",
            "--dwi",
            &path(&invalid),
            "--out",
            &path(&dir.join("out.json")),
        ]),
        3
    );
}

#[test]
fn numerical_errors_exit_with_code_4() {
    let dir = workdir("numerical-errors");

    // A DWI volume whose 24 weighted entries repeat only 5 distinct
    // directions: the scheme passes validation but the least-squares
    // design matrix is rank-deficient, which is a numerical failure.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let dirs = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [s, s, 0.0],
        [s, 0.0, s],
    ];
    let mut measurements = vec![serde_json::json!({
        "g": [0.0, 0.0, 1.0],
        "b": 0.0,
        "signal": [1.0],
    })];
    for k in 0..24 {
        measurements.push(serde_json::json!({
            "g": dirs[k % 5],
            "b": 1000.0,
            "signal": [0.6],
        }));
    }
    let degenerate = dir.join("degenerate.json");
    std::fs::write(
        &degenerate,
        serde_json::json!({
            "version": 1,
            "dims": [1, 1, 1],
            "s0": [1.0],
            "measurements": measurements,
        })
        .to_string(),
    )
    .unwrap();
    assert_eq!(
        exit_code(&[
            "estimate-dti",
            "--dwi",
            &path(&degenerate),
            "--out",
            &path(&dir.join("out.json")),
        ]),
        4
    );
}

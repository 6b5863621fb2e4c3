//! End-to-end benchmark pipeline: generate or load a truth field,
//! downsample by two, fit the GWP on the kept lattice, interpolate the fine
//! grid with every configured method, score the held-out sites, and write
//! the artifact bundle (fields, archive, metrics CSV, glyphs, manifest).
//!
//! Every artifact is a pure function of the config, so re-running a config
//! reproduces all files byte-identically; the manifest records a SHA-256
//! checksum per file to make that checkable after the fact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use gwp_dti_core::baselines::{linear_interpolate, logeuclid_interpolate, BoundaryPolicy};
use gwp_dti_core::dmri::{synth_crossing_field, synth_smooth_field};
use gwp_dti_core::field::{downsample_by_two, read_field, write_field, HoldoutSplit, TensorGrid};
use gwp_dti_core::inference::{run_chain, write_archive, PosteriorSamples};
use gwp_dti_core::predict::{GwpPredictor, PredictMode};
use gwp_dti_core::spd::SymTensor3;
use gwp_dti_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::evaluate::{evaluate, MetricsTable};
use crate::glyphs::{auto_glyph_scale, export_glyph_json, export_svg_slice};

pub const CONFIG_FILE: &str = "config.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const NOISY_FILE: &str = "noisy.json";
pub const LOWRES_FILE: &str = "lowres.json";
pub const SPLIT_FILE: &str = "split.json";
pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn pred_file(method: Method) -> String {
    format!("pred_{}.json", method.name())
}

pub const UNCERTAINTY_FILE: &str = "pred_gwp_uncertainty.json";

/// Prefixes an error message with the pipeline stage it came from, keeping
/// the variant (and thus the exit code class) intact.
fn with_stage(stage: &str, e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("[{stage}] {m}")),
        Error::NotSpd(m) => Error::NotSpd(format!("[{stage}] {m}")),
        Error::Validation(m) => Error::Validation(format!("[{stage}] {m}")),
        Error::Parse { path, line, msg } => Error::Parse {
            path,
            line,
            msg: format!("[{stage}] {msg}"),
        },
        Error::Conditioning(m) => Error::Conditioning(format!("[{stage}] {m}")),
        Error::Estimation(m) => Error::Estimation(format!("[{stage}] {m}")),
        Error::Numerical(m) => Error::Numerical(format!("[{stage}] {m}")),
        Error::Provenance(m) => Error::Provenance(format!("[{stage}] {m}")),
        Error::Usage(m) => Error::Usage(format!("[{stage}] {m}")),
        Error::Io(io) => Error::Validation(format!("[{stage}] i/o: {io}")),
    }
}

trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| with_stage(stage, e))
    }
}

/// Holdout split as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub version: u32,
    pub kept: Vec<usize>,
    pub held_out: Vec<usize>,
}

pub fn write_split(split: &HoldoutSplit, path: &Path) -> Result<()> {
    let file = SplitFile {
        version: 1,
        kept: split.kept.clone(),
        held_out: split.held_out.clone(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &file)
        .map_err(|e| Error::Validation(format!("split serialization failed: {e}")))?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<HoldoutSplit> {
    let r = BufReader::new(File::open(path)?);
    let file: SplitFile = serde_json::from_reader(r).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: Some(e.line()).filter(|&l| l > 0),
        msg: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(Error::Validation(format!(
            "unsupported split file version {} (expected 1)",
            file.version
        )));
    }
    Ok(HoldoutSplit {
        kept: file.kept,
        held_out: file.held_out,
    })
}

/// Per-site scalar sidecar (prediction uncertainty) on the same grid as a
/// field file; invalid sites carry 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarField {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)
            .map_err(|e| Error::Validation(format!("sidecar serialization failed: {e}")))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let file: Self = serde_json::from_reader(r).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: Some(e.line()).filter(|&l| l > 0),
            msg: e.to_string(),
        })?;
        if file.version != 1 {
            return Err(Error::Validation(format!(
                "unsupported sidecar version {} (expected 1)",
                file.version
            )));
        }
        if file.values.len() != file.dims.iter().product::<usize>() {
            return Err(Error::Validation(format!(
                "sidecar holds {} values for dims {:?}",
                file.values.len(),
                file.dims
            )));
        }
        Ok(file)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            use std::fmt::Write as _;
            write!(s, "{b:02x}").expect("writing to String cannot fail");
            s
        }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub seed: u64,
    /// File name → SHA-256, for every artifact in the bundle.
    pub files: BTreeMap<String, String>,
}

/// The truth field and the working field the protocol downsamples.
///
/// Synthetic datasets scan the truth through the forward model with Rician
/// noise and refit, so the working field is a realistic estimate; a
/// user-supplied field file is used as both.
pub fn dataset_fields(config: &ExperimentConfig) -> Result<(TensorGrid, TensorGrid, bool)> {
    match &config.dataset {
        DatasetSpec::Smooth { dims, params } => {
            let (noisy, truth) = synth_smooth_field(*dims, config.seed, params)?;
            Ok((truth, noisy, true))
        }
        DatasetSpec::Crossing { dims, params } => {
            let (noisy, truth) = synth_crossing_field(*dims, config.seed, params)?;
            Ok((truth, noisy, true))
        }
        DatasetSpec::FieldFile { path } => {
            let truth = read_field(path)?;
            let working = truth.clone();
            Ok((truth, working, false))
        }
    }
}

/// One method's predictions at `targets`, in target order. GWP needs the
/// posterior archive fit to `lowres`; the baselines interpolate `lowres`
/// directly with edge clamping for fringe sites.
pub fn predict_with_method(
    method: Method,
    lowres: &TensorGrid,
    archive: Option<&PosteriorSamples>,
    targets: &[[f64; 3]],
) -> Result<(Vec<SymTensor3>, Option<Vec<f64>>)> {
    match method {
        Method::Gwp => {
            let archive = archive.ok_or_else(|| {
                Error::Usage("GWP interpolation needs a posterior archive".into())
            })?;
            let predictor = GwpPredictor::new(archive, lowres)?;
            let field = predictor.interpolate(targets, PredictMode::Mean)?;
            Ok((field.mean, Some(field.uncertainty)))
        }
        Method::Linear => {
            let (tensors, _violations) =
                linear_interpolate(lowres, targets, BoundaryPolicy::Clamp)?;
            Ok((tensors, None))
        }
        Method::LogEuclid => {
            let tensors = logeuclid_interpolate(lowres, targets, BoundaryPolicy::Clamp)?;
            Ok((tensors.iter().map(|t| *t.sym()).collect(), None))
        }
    }
}

/// Scatters per-valid-site values back onto the full grid layout.
fn scatter<T: Copy + Default>(len: usize, valid: &[usize], values: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); len];
    for (&linear, &v) in valid.iter().zip(values) {
        out[linear] = v;
    }
    out
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics: MetricsTable,
    pub split: HoldoutSplit,
    pub manifest: Manifest,
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate().stage("config")?;
    fs::create_dir_all(out_dir).map_err(Error::Io).stage("config")?;
    let mut files: Vec<String> = Vec::new();
    let path_of = |name: &str| out_dir.join(name);

    config.write_json(&path_of(CONFIG_FILE)).stage("config")?;
    files.push(CONFIG_FILE.into());

    eprintln!("[synthesize] preparing dataset");
    let (truth, working, synthetic) = dataset_fields(config).stage("synthesize")?;
    write_field(&truth, path_of(TRUTH_FILE)).stage("synthesize")?;
    files.push(TRUTH_FILE.into());
    if synthetic {
        write_field(&working, path_of(NOISY_FILE)).stage("synthesize")?;
        files.push(NOISY_FILE.into());
    }

    eprintln!("[downsample] splitting into kept and held-out lattices");
    let (lowres, split) = downsample_by_two(&working).stage("downsample")?;
    write_field(&lowres, path_of(LOWRES_FILE)).stage("downsample")?;
    write_split(&split, &path_of(SPLIT_FILE)).stage("downsample")?;
    files.push(LOWRES_FILE.into());
    files.push(SPLIT_FILE.into());

    let archive = if config.methods.contains(&Method::Gwp) {
        eprintln!("[fit] running the MCMC chain on the kept lattice");
        let (sites, tensors) = lowres.active_sites().stage("fit")?;
        let chain = run_chain(
            &sites,
            &tensors,
            &config.mcmc.to_config_for(config.seed, &tensors),
        )
        .stage("fit")?;
        eprintln!(
            "[fit] retained {} samples (acceptance θ {:.2}, L {:.2})",
            chain.samples.len(),
            chain.acceptance.theta_acceptance,
            chain.acceptance.l_acceptance
        );
        write_archive(&chain, &path_of(ARCHIVE_FILE)).stage("fit")?;
        files.push(ARCHIVE_FILE.into());
        Some(chain)
    } else {
        None
    };

    // Targets: every valid site of the fine grid, in linear order.
    let valid = working.valid_indices();
    let targets: Vec<[f64; 3]> = valid
        .iter()
        .map(|&l| working.site_coordinates_linear(l))
        .collect::<Result<_>>()
        .stage("interpolate")?;
    let mut pos_of = vec![usize::MAX; working.len()];
    for (pos, &linear) in valid.iter().enumerate() {
        pos_of[linear] = pos;
    }

    let mut metrics = MetricsTable::default();
    for &method in &config.methods {
        eprintln!("[interpolate] {method} at {} fine sites", targets.len());
        let (pred, uncertainty) =
            predict_with_method(method, &lowres, archive.as_ref(), &targets)
                .stage("interpolate")?;

        let grid = TensorGrid::new(
            working.dims(),
            working.spacing(),
            scatter(working.len(), &valid, &pred),
            working.mask().map(|m| m.to_vec()),
        )
        .stage("interpolate")?;
        write_field(&grid, path_of(&pred_file(method))).stage("interpolate")?;
        files.push(pred_file(method));
        if let Some(u) = uncertainty {
            ScalarField {
                version: 1,
                dims: working.dims(),
                spacing: working.spacing(),
                values: scatter(working.len(), &valid, &u),
            }
            .write_json(&path_of(UNCERTAINTY_FILE))
            .stage("interpolate")?;
            files.push(UNCERTAINTY_FILE.into());
        }

        let held_out_pred: Vec<SymTensor3> = split
            .held_out
            .iter()
            .map(|&l| pred[pos_of[l]])
            .collect();
        let table = evaluate(method.name(), &held_out_pred, &truth, &split).stage("evaluate")?;
        metrics.extend(table);

        let c = auto_glyph_scale(&grid);
        export_svg_slice(&grid, c, config.glyph_slice, &path_of(&format!("glyphs_{method}.svg")))
            .stage("glyphs")?;
        export_glyph_json(&grid, c, &path_of(&format!("glyphs_{method}.json")))
            .stage("glyphs")?;
        files.push(format!("glyphs_{method}.svg"));
        files.push(format!("glyphs_{method}.json"));
    }

    metrics.write_csv(&path_of(METRICS_FILE)).stage("evaluate")?;
    files.push(METRICS_FILE.into());

    let c = auto_glyph_scale(&truth);
    export_svg_slice(&truth, c, config.glyph_slice, &path_of("glyphs_truth.svg"))
        .stage("glyphs")?;
    export_glyph_json(&truth, c, &path_of("glyphs_truth.json")).stage("glyphs")?;
    files.push("glyphs_truth.svg".into());
    files.push("glyphs_truth.json".into());

    let mut checksums = BTreeMap::new();
    for name in &files {
        checksums.insert(name.clone(), sha256_file(&path_of(name)).stage("manifest")?);
    }
    let manifest = Manifest {
        version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        files: checksums,
    };
    let mut w = BufWriter::new(File::create(path_of(MANIFEST_FILE)).map_err(Error::Io).stage("manifest")?);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))
        .stage("manifest")?;
    w.write_all(b"\n").map_err(Error::Io).stage("manifest")?;
    w.flush().map_err(Error::Io).stage("manifest")?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        metrics,
        split,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{McmcSettings, CONFIG_VERSION};
    use gwp_dti_core::dmri::SmoothFieldParams;

    fn tiny_config(seed: u64, methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed,
            dataset: DatasetSpec::Smooth {
                dims: [7, 7, 1],
                params: SmoothFieldParams::default(),
            },
            methods,
            mcmc: McmcSettings {
                total: 300,
                burn_in: 100,
                thin: 10,
                ..Default::default()
            },
            glyph_slice: 0,
        }
    }

    #[test]
    fn bundle_is_complete_and_metrics_shaped() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(11, vec![Method::Linear, Method::LogEuclid]);
        let run = run_experiment(&config, dir.path()).unwrap();

        // 2 methods × 2 metrics.
        assert_eq!(run.metrics.rows.len(), 4);
        for name in [
            CONFIG_FILE,
            TRUTH_FILE,
            NOISY_FILE,
            LOWRES_FILE,
            SPLIT_FILE,
            METRICS_FILE,
            MANIFEST_FILE,
            "pred_linear.json",
            "pred_logeuclid.json",
            "glyphs_truth.svg",
            "glyphs_linear.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        // No archive without the GWP method.
        assert!(!dir.path().join(ARCHIVE_FILE).exists());
        // Manifest checksums match the files on disk.
        for (name, sum) in &run.manifest.files {
            assert_eq!(&sha256_file(&dir.path().join(name)).unwrap(), sum, "{name}");
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_config(13, vec![Method::Gwp, Method::Linear]);
        let a = run_experiment(&config, dir_a.path()).unwrap();
        let b = run_experiment(&config, dir_b.path()).unwrap();
        assert_eq!(a.manifest.files, b.manifest.files);
        for name in a.manifest.files.keys() {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between reruns"
            );
        }
    }

    #[test]
    fn held_out_values_never_reach_the_interpolators() {
        // The only inputs to fitting and interpolation are the low-res
        // grid and the target coordinates. Poisoning the working field at
        // held-out sites must leave the low-res grid — and therefore all
        // predictions — unchanged.
        let config = tiny_config(17, vec![Method::Linear]);
        let (_, working, _) = dataset_fields(&config).unwrap();
        let (lowres_clean, split) = downsample_by_two(&working).unwrap();

        let mut poisoned = working.clone();
        for &l in &split.held_out {
            poisoned.tensors_mut()[l] = SymTensor3::from_diagonal(9.9, 9.9, 9.9);
        }
        let (lowres_poisoned, split_p) = downsample_by_two(&poisoned).unwrap();
        assert_eq!(split.held_out, split_p.held_out);
        assert_eq!(lowres_clean.tensors(), lowres_poisoned.tensors());

        let targets: Vec<[f64; 3]> = (0..working.len())
            .map(|l| working.site_coordinates_linear(l).unwrap())
            .collect();
        let (pred_clean, _) =
            predict_with_method(Method::Linear, &lowres_clean, None, &targets).unwrap();
        let (pred_poisoned, _) =
            predict_with_method(Method::Linear, &lowres_poisoned, None, &targets).unwrap();
        assert_eq!(pred_clean, pred_poisoned);
    }

    #[test]
    fn field_file_dataset_runs_without_scan_stage() {
        let dir = tempfile::tempdir().unwrap();
        let field_path = dir.path().join("input_field.json");
        let truth =
            gwp_dti_core::dmri::smooth_truth_field([5, 5, 1], &SmoothFieldParams::default())
                .unwrap();
        write_field(&truth, &field_path).unwrap();

        let config = ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 3,
            dataset: DatasetSpec::FieldFile { path: field_path },
            methods: vec![Method::LogEuclid],
            mcmc: McmcSettings::default(),
            glyph_slice: 0,
        };
        let out = dir.path().join("run");
        let run = run_experiment(&config, &out).unwrap();
        assert!(!out.join(NOISY_FILE).exists());
        // Log-Euclidean on a noise-free smooth field: small but nonzero error.
        let row = run
            .metrics
            .row("logeuclid", crate::evaluate::Metric::Frobenius)
            .unwrap();
        assert!(row.mean > 0.0 && row.mean.is_finite());
        assert_eq!(row.n, run.split.held_out.len());
    }
}

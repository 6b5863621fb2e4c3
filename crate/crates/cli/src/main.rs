//! `gwp-dti`: command-line harness for diffusion-tensor field modeling.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/validation error,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gwp_dti_core::dmri::{
    CrossingFieldParams, DwiVolume, GradientScheme, SmoothFieldParams,
};
use gwp_dti_core::field::{downsample_by_two, read_field, write_field, TensorGrid};
use gwp_dti_core::inference::{read_archive, run_chain, McmcConfig};
use gwp_dti_core::predict::{GwpPredictor, PredictMode};
use gwp_dti_core::{Error, Result};

use gwp_dti_cli::config::{
    crossing_config, preset_config, ExperimentConfig, Method, Preset,
};
use gwp_dti_cli::evaluate::{evaluate, MetricsTable};
use gwp_dti_cli::experiment::{
    predict_with_method, read_split, run_experiment, write_split, ScalarField,
};
use gwp_dti_cli::glyphs::{auto_glyph_scale, export_glyph_json, export_svg_slice};

#[derive(Parser)]
#[command(
    name = "gwp-dti",
    version,
    about = "Model and interpolate diffusion-tensor fields with a generalized Wishart process"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SynthKind {
    Smooth,
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum GlyphFormat {
    #[value(name = "glyph-json")]
    GlyphJson,
    #[value(name = "svg-slice")]
    SvgSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum InterpMode {
    Mean,
    Sample,
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("{what} must be three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse {what} component {p:?}"))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple::<usize>(s, "dims")
}

fn parse_spacing(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple::<f64>(s, "spacing")
}

fn parse_pred(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((m, p)) if !m.is_empty() && !p.is_empty() => Ok((m.to_string(), PathBuf::from(p))),
        _ => Err(format!("prediction must be NAME=PATH, got {s:?}")),
    }
}

#[derive(Args)]
struct McmcArgs {
    /// Total MCMC iterations.
    #[arg(long, default_value_t = 8_000)]
    total: usize,
    /// Iterations discarded before retaining samples.
    #[arg(long, default_value_t = 3_000)]
    burn_in: usize,
    /// Keep every thin-th post-burn-in state.
    #[arg(long, default_value_t = 25)]
    thin: usize,
    /// Wishart degrees of freedom (≥ 3).
    #[arg(long, default_value_t = 5)]
    nu: usize,
    /// Observation noise variance in data units (default: derived from the field).
    #[arg(long)]
    sigma_sq: Option<f64>,
    /// Random-walk scale for log θ proposals.
    #[arg(long, default_value_t = 0.05)]
    theta_scale: f64,
    /// Relative random-walk scale for L proposals.
    #[arg(long, default_value_t = 0.02)]
    l_scale: f64,
}

impl McmcArgs {
    fn to_config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            total: self.total,
            burn_in: self.burn_in,
            thin: self.thin,
            nu: self.nu,
            sigma_sq: self.sigma_sq,
            theta_proposal_scale: self.theta_scale,
            l_proposal_rel: self.l_scale,
            seed,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic truth field, scan it into DWI signals, and refit.
    Synth {
        #[arg(long, value_enum)]
        dataset: SynthKind,
        /// Grid dimensions, e.g. 15,15,1.
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Rician noise level relative to s0 (default: generator default).
        #[arg(long)]
        noise: Option<f64>,
        /// Output directory for truth.json, noisy.json, dwi.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diffusion tensors to a DWI volume by least squares.
    EstimateDti {
        #[arg(long)]
        dwi: PathBuf,
        #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
        spacing: [f64; 3],
        /// Output tensor field file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Downsample a field by two, writing the low-res field and the split.
    Downsample {
        #[arg(long)]
        field: PathBuf,
        /// Output directory for lowres.json and split.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the MCMC chain on a field and write the posterior archive.
    Fit {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// Output archive path (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate a low-res field at the sites of another grid.
    Interp {
        #[arg(long, value_enum)]
        method: Method,
        /// Low-resolution source field.
        #[arg(long)]
        source: PathBuf,
        /// Grid whose valid sites become the interpolation targets.
        #[arg(long)]
        like: PathBuf,
        /// Posterior archive (required for --method gwp).
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InterpMode::Mean)]
        mode: InterpMode,
        /// Seed for --mode sample.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Error on targets outside the source hull instead of clamping.
        #[arg(long)]
        strict_bounds: bool,
        /// Output predicted field file.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-site uncertainty sidecar (GWP only).
        #[arg(long)]
        uncertainty: Option<PathBuf>,
    },
    /// Score predicted fields against truth at the held-out sites.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Predicted field as NAME=PATH; repeatable.
        #[arg(long = "pred", value_parser = parse_pred, required = true)]
        preds: Vec<(String, PathBuf)>,
        /// Output metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export ellipsoid glyphs of a field.
    Glyphs {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, value_enum, default_value_t = GlyphFormat::SvgSlice)]
        format: GlyphFormat,
        /// z index of the rendered slice (svg-slice only).
        #[arg(long, default_value_t = 0)]
        slice: usize,
        /// Level-set constant c in rᵀD⁻¹r = c (default: sized to the field).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full benchmark pipeline into an output directory.
    Pipeline {
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        /// Crossing-fiber benchmark (31×31) instead of a smooth preset.
        #[arg(long, conflicts_with_all = ["preset", "config"])]
        crossing: bool,
        /// Experiment config file (versioned JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensure_dir(dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            dataset,
            dims,
            seed,
            noise,
            out,
        } => {
            ensure_dir(&out)?;
            let (truth, scheme, sigma_rel) = match dataset {
                SynthKind::Smooth => {
                    let mut params = SmoothFieldParams::default();
                    if let Some(n) = noise {
                        params.noise_sigma_rel = n;
                    }
                    let truth = gwp_dti_core::dmri::smooth_truth_field(dims, &params)?;
                    let scheme = GradientScheme::electrostatic(params.n_directions, params.b_value)?;
                    (truth, scheme, params.noise_sigma_rel)
                }
                SynthKind::Crossing => {
                    let mut params = CrossingFieldParams::default();
                    if let Some(n) = noise {
                        params.noise_sigma_rel = n;
                    }
                    let truth = gwp_dti_core::dmri::crossing_truth_field(dims, &params)?;
                    let scheme = GradientScheme::electrostatic(params.n_directions, params.b_value)?;
                    (truth, scheme, params.noise_sigma_rel)
                }
            };
            let dwi = DwiVolume::scan(&truth, &scheme, sigma_rel, seed)?;
            let noisy = dwi.fit(truth.spacing())?;
            write_field(&truth, out.join("truth.json"))?;
            write_field(&noisy, out.join("noisy.json"))?;
            dwi.write_json(&out.join("dwi.json"))?;
            eprintln!(
                "wrote truth.json, noisy.json, dwi.json ({} voxels, {} measurements)",
                truth.len(),
                dwi.measurements.len()
            );
            Ok(())
        }
        Cmd::EstimateDti { dwi, spacing, out } => {
            let volume = DwiVolume::read_json(&dwi)?;
            let field = volume.fit(spacing)?;
            write_field(&field, &out)?;
            eprintln!("fit {} voxels -> {}", field.len(), out.display());
            Ok(())
        }
        Cmd::Downsample { field, out } => {
            ensure_dir(&out)?;
            let grid = read_field(&field)?;
            let (lowres, split) = downsample_by_two(&grid)?;
            write_field(&lowres, out.join("lowres.json"))?;
            write_split(&split, &out.join("split.json"))?;
            eprintln!(
                "kept {} sites, held out {} -> lowres.json, split.json",
                split.kept.len(),
                split.held_out.len()
            );
            Ok(())
        }
        Cmd::Fit {
            field,
            seed,
            mcmc,
            out,
        } => {
            let grid = read_field(&field)?;
            let (sites, tensors) = grid.active_sites()?;
            let chain = run_chain(&sites, &tensors, &mcmc.to_config(seed))?;
            gwp_dti_core::inference::write_archive(&chain, &out)?;
            eprintln!(
                "retained {} samples over {} sites (acceptance θ {:.2}, L {:.2}) -> {}",
                chain.samples.len(),
                chain.n_sites,
                chain.acceptance.theta_acceptance,
                chain.acceptance.l_acceptance,
                out.display()
            );
            Ok(())
        }
        Cmd::Interp {
            method,
            source,
            like,
            archive,
            mode,
            sample_seed,
            strict_bounds,
            out,
            uncertainty,
        } => {
            let lowres = read_field(&source)?;
            let like_grid = read_field(&like)?;
            let valid = like_grid.valid_indices();
            let targets: Vec<[f64; 3]> = valid
                .iter()
                .map(|&l| like_grid.site_coordinates_linear(l))
                .collect::<Result<_>>()?;

            let (pred, unc) = match (method, mode) {
                (Method::Gwp, _) => {
                    let archive_path = archive.ok_or_else(|| {
                        Error::Usage("--method gwp requires --archive".into())
                    })?;
                    let posterior = read_archive(&archive_path)?;
                    let predictor = GwpPredictor::new(&posterior, &lowres)?;
                    let predict_mode = match mode {
                        InterpMode::Mean => PredictMode::Mean,
                        InterpMode::Sample => PredictMode::Sampling { seed: sample_seed },
                    };
                    let field = predictor.interpolate(&targets, predict_mode)?;
                    (field.mean, Some(field.uncertainty))
                }
                (m, InterpMode::Sample) => {
                    return Err(Error::Usage(format!(
                        "--mode sample applies only to gwp, not {m}"
                    )));
                }
                (m, InterpMode::Mean) => {
                    if strict_bounds {
                        let policy = gwp_dti_core::baselines::BoundaryPolicy::Strict;
                        match m {
                            Method::Linear => {
                                let (t, _) =
                                    gwp_dti_core::baselines::linear_interpolate(&lowres, &targets, policy)?;
                                (t, None)
                            }
                            Method::LogEuclid => {
                                let t = gwp_dti_core::baselines::logeuclid_interpolate(
                                    &lowres, &targets, policy,
                                )?;
                                (t.iter().map(|s| *s.sym()).collect(), None)
                            }
                            Method::Gwp => unreachable!("handled above"),
                        }
                    } else {
                        predict_with_method(m, &lowres, None, &targets)?
                    }
                }
            };

            let mut tensors = vec![gwp_dti_core::spd::SymTensor3::zero(); like_grid.len()];
            for (&linear, t) in valid.iter().zip(&pred) {
                tensors[linear] = *t;
            }
            let grid = TensorGrid::new(
                like_grid.dims(),
                like_grid.spacing(),
                tensors,
                like_grid.mask().map(|m| m.to_vec()),
            )?;
            write_field(&grid, &out)?;
            if let Some(path) = uncertainty {
                let unc = unc.ok_or_else(|| {
                    Error::Usage(format!("--uncertainty applies only to gwp, not {method}"))
                })?;
                let mut values = vec![0.0; like_grid.len()];
                for (&linear, u) in valid.iter().zip(&unc) {
                    values[linear] = *u;
                }
                ScalarField {
                    version: 1,
                    dims: like_grid.dims(),
                    spacing: like_grid.spacing(),
                    values,
                }
                .write_json(&path)?;
            }
            eprintln!("interpolated {} sites with {method} -> {}", pred.len(), out.display());
            Ok(())
        }
        Cmd::Eval {
            truth,
            split,
            preds,
            out,
        } => {
            let truth_grid = read_field(&truth)?;
            let split = read_split(&split)?;
            let mut table = MetricsTable::default();
            for (name, path) in &preds {
                let grid = read_field(path)?;
                if grid.dims() != truth_grid.dims() {
                    return Err(Error::Usage(format!(
                        "prediction {name} has dims {:?}, truth has {:?}",
                        grid.dims(),
                        truth_grid.dims()
                    )));
                }
                let held_out: Vec<gwp_dti_core::spd::SymTensor3> = split
                    .held_out
                    .iter()
                    .map(|&l| *grid.tensor(l))
                    .collect();
                table.extend(evaluate(name, &held_out, &truth_grid, &split)?);
            }
            table.write_csv(&out)?;
            print!("{}", table.to_csv());
            Ok(())
        }
        Cmd::Glyphs {
            field,
            format,
            slice,
            scale,
            out,
        } => {
            let grid = read_field(&field)?;
            let c = scale.unwrap_or_else(|| auto_glyph_scale(&grid));
            match format {
                GlyphFormat::GlyphJson => export_glyph_json(&grid, c, &out)?,
                GlyphFormat::SvgSlice => export_svg_slice(&grid, c, slice, &out)?,
            }
            eprintln!("wrote glyphs (c = {c:.6e}) -> {}", out.display());
            Ok(())
        }
        Cmd::Pipeline {
            preset,
            crossing,
            config,
            seed,
            out,
        } => {
            let mut config = match (preset, crossing, config) {
                (Some(p), false, None) => preset_config(p),
                (None, true, None) => crossing_config(7),
                (None, false, Some(path)) => ExperimentConfig::read_json(&path)?,
                (None, false, None) => {
                    return Err(Error::Usage(
                        "pipeline needs --preset, --crossing, or --config".into(),
                    ));
                }
                _ => unreachable!("clap conflicts prevent combinations"),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            let run = run_experiment(&config, &out)?;
            print!("{}", run.metrics.to_csv());
            eprintln!("artifacts in {}", run.out_dir.display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Conditioning(_) | Error::Estimation(_) | Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Experiment configuration: dataset choice, MCMC settings, methods, and
//! the two built-in presets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gwp_dti_core::dmri::{CrossingFieldParams, SmoothFieldParams};
use gwp_dti_core::inference::McmcConfig;
use gwp_dti_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Interpolation method selector, also the CLI `--method` vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gwp,
    Linear,
    #[value(name = "logeuclid")]
    #[serde(rename = "logeuclid")]
    LogEuclid,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gwp => "gwp",
            Method::Linear => "linear",
            Method::LogEuclid => "logeuclid",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the ground-truth field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Synthetic single-population field with smoothly rotating
    /// orientation; scanned, noised, and refit to make the working field.
    Smooth {
        dims: [usize; 3],
        #[serde(default = "SmoothFieldParams::default")]
        params: SmoothFieldParams,
    },
    /// Synthetic two-population crossing-fiber field, same scan pipeline.
    Crossing {
        dims: [usize; 3],
        #[serde(default = "CrossingFieldParams::default")]
        params: CrossingFieldParams,
    },
    /// A user-supplied tensor field file; used as truth directly (no scan
    /// stage) and downsampled for the holdout protocol.
    FieldFile { path: PathBuf },
}

/// MCMC settings carried by the config; the chain seed comes from the
/// experiment seed, so it is not duplicated here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub total: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub nu: usize,
    /// Observation noise variance in data units; `None` derives it from
    /// the field as (5% of the mean Frobenius norm)².
    pub sigma_sq: Option<f64>,
    /// Alternative to `sigma_sq`: noise standard deviation as a fraction
    /// of the fitted field's mean Frobenius norm, resolved against the
    /// low-res field at fit time. Ignored when `sigma_sq` is set.
    pub sigma_frob_rel: Option<f64>,
    pub theta_proposal_scale: f64,
    pub l_proposal_rel: f64,
}

impl Default for McmcSettings {
    /// Harness defaults: proposal scales tuned for 20–50% acceptance on
    /// scan-derived fields, and thinning that retains 200 samples.
    fn default() -> Self {
        Self {
            total: 8_000,
            burn_in: 3_000,
            thin: 25,
            nu: 5,
            sigma_sq: None,
            sigma_frob_rel: None,
            theta_proposal_scale: 0.05,
            l_proposal_rel: 0.02,
        }
    }
}

impl McmcSettings {
    pub fn to_config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            total: self.total,
            burn_in: self.burn_in,
            thin: self.thin,
            nu: self.nu,
            sigma_sq: self.sigma_sq,
            theta_proposal_scale: self.theta_proposal_scale,
            l_proposal_rel: self.l_proposal_rel,
            seed,
        }
    }

    /// Resolves `sigma_frob_rel` against the field the chain will fit.
    pub fn to_config_for(&self, seed: u64, tensors: &[gwp_dti_core::spd::SymTensor3]) -> McmcConfig {
        let mut config = self.to_config(seed);
        if config.sigma_sq.is_none() {
            if let Some(rel) = self.sigma_frob_rel {
                let mean_frob = tensors
                    .iter()
                    .map(gwp_dti_core::spd::SymTensor3::frob_norm)
                    .sum::<f64>()
                    / tensors.len().max(1) as f64;
                config.sigma_sq = Some((rel * mean_frob).powi(2));
            }
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Methods to run, in output order; at least one.
    pub methods: Vec<Method>,
    #[serde(default)]
    pub mcmc: McmcSettings,
    /// z index of the slice rendered to SVG.
    #[serde(default)]
    pub glyph_slice: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Usage(
                "config must list at least one method".into(),
            ));
        }
        let mut seen = Vec::new();
        for m in &self.methods {
            if seen.contains(m) {
                return Err(Error::Usage(format!("method {m} listed twice")));
            }
            seen.push(*m);
        }
        match &self.dataset {
            DatasetSpec::Smooth { dims, .. } | DatasetSpec::Crossing { dims, .. } => {
                if dims.iter().any(|&d| d == 0) {
                    return Err(Error::Validation(format!(
                        "dataset dims {dims:?} contain a zero axis"
                    )));
                }
            }
            DatasetSpec::FieldFile { path } => {
                if !path.exists() {
                    return Err(Error::Validation(format!(
                        "dataset field file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if self.methods.contains(&Method::Gwp) {
            self.mcmc.to_config(self.seed).validate()?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::Validation(format!("config serialization failed: {e}")))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let config: Self = serde_json::from_reader(r).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: Some(e.line()).filter(|&l| l > 0),
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Built-in experiment shapes selectable with `--preset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 15×15 smooth field; finishes in well under three minutes.
    Quick,
    /// 37×37 smooth field, the size the benchmark tables use.
    Paper,
}

/// The smooth-field generator settings both smooth presets share: gentle
/// orientation and log-eigenvalue modulation over a plateau, cut by deep
/// flat-bottomed diffusivity valleys, scanned at a low noise level that
/// keeps every diffusion-weighted signal well above the Rician floor.
fn benchmark_smooth_params() -> SmoothFieldParams {
    SmoothFieldParams {
        base_eigenvalues: [0.49e-3, 0.22e-3, 0.10e-3],
        orientation_period: 20.0,
        orientation_amplitude: 0.3,
        eigenvalue_period: 20.0,
        eigenvalue_log_amplitude: 0.1,
        valley_depth: 4.0,
        valley_period: 14.0,
        valley_sharpness: 1.0,
        valley_saturation: 2.5,
        noise_sigma_rel: 0.001,
        ..SmoothFieldParams::default()
    }
}

/// MCMC settings shared by the quick and crossing benchmarks: 200 kept
/// samples after burn-in, with the likelihood noise scale tied to the
/// fitted field.
fn benchmark_mcmc(total: usize, burn_in: usize, thin: usize) -> McmcSettings {
    McmcSettings {
        total,
        burn_in,
        thin,
        sigma_frob_rel: Some(0.003),
        ..Default::default()
    }
}

pub fn preset_config(preset: Preset) -> ExperimentConfig {
    let all_methods = vec![Method::Gwp, Method::Linear, Method::LogEuclid];
    match preset {
        Preset::Quick => ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 7,
            dataset: DatasetSpec::Smooth {
                dims: [15, 15, 1],
                params: benchmark_smooth_params(),
            },
            methods: all_methods,
            mcmc: benchmark_mcmc(20_000, 6_000, 70),
            glyph_slice: 0,
        },
        Preset::Paper => ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 7,
            dataset: DatasetSpec::Smooth {
                dims: [37, 37, 1],
                params: benchmark_smooth_params(),
            },
            methods: all_methods,
            mcmc: benchmark_mcmc(40_000, 12_000, 140),
            glyph_slice: 0,
        },
    }
}

/// The crossing-fiber benchmark configuration (31×31, all methods): two
/// flat-topped tract bands along the grid diagonals that restrict the
/// background compartment, crossing in an elevated planar center.
pub fn crossing_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        seed,
        dataset: DatasetSpec::Crossing {
            dims: [31, 31, 1],
            params: CrossingFieldParams {
                background_diffusivity: 1.3e-3,
                fiber_diffusivity: 1.55e-3,
                band_halfwidth: 3.5,
                band_saturation: 3.5,
                restriction_depth: 2.4,
                noise_sigma_rel: 0.001,
                ..CrossingFieldParams::default()
            },
        },
        methods: vec![Method::Gwp, Method::Linear, Method::LogEuclid],
        mcmc: benchmark_mcmc(20_000, 6_000, 70),
        glyph_slice: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        preset_config(Preset::Quick).validate().unwrap();
        preset_config(Preset::Paper).validate().unwrap();
        crossing_config(3).validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = preset_config(Preset::Quick);
        config.write_json(&path).unwrap();
        let back = ExperimentConfig::read_json(&path).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut config = preset_config(Preset::Quick);
        config.methods.clear();
        assert!(matches!(config.validate(), Err(Error::Usage(_))));

        let mut config = preset_config(Preset::Quick);
        config.methods = vec![Method::Linear, Method::Linear];
        assert!(matches!(config.validate(), Err(Error::Usage(_))));

        let mut config = preset_config(Preset::Quick);
        config.version = 2;
        assert!(matches!(config.validate(), Err(Error::Validation(_))));

        let mut config = preset_config(Preset::Quick);
        config.dataset = DatasetSpec::Smooth {
            dims: [0, 5, 1],
            params: SmoothFieldParams::default(),
        };
        assert!(matches!(config.validate(), Err(Error::Validation(_))));
    }
}

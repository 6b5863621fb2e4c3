//! GP-conditional prediction at new sites from a posterior archive.
//!
//! For a target site z*, each latent GP block conditions independently on
//! its training values: mean `k*ᵀK⁻¹u`, variance `1 − k*ᵀK⁻¹k*`, with the
//! same k* and K shared by all 3ν blocks. The predicted tensor is
//! `construct_tensor(û*, L)` per posterior sample, and samples are averaged
//! per site — an average of positive semidefinite matrices, so predictions
//! stay in the cone.
//!
//! Cost model: one Gram factorization per distinct θ (consecutive samples
//! often repeat θ, so factors are reused), one set of `K⁻¹u` solves per
//! sample, and an O(N) kernel vector per (θ, target).

use nalgebra::{DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::TensorGrid;
use crate::gwp::{construct_tensor, gram, se_kernel, GramMatrix, KernelParams, Site};
use crate::inference::{data_checksum, PosteriorSamples};
use crate::rng::stream_rng;
use crate::spd::SymTensor3;

/// Kernel evaluations of one target site against the N kept sites; shared
/// by all 3ν GP blocks of a sample.
#[derive(Debug, Clone)]
pub struct CrossCovariance(DVector<f64>);

impl CrossCovariance {
    pub fn new(sites: &[Site], target: &Site, theta: f64) -> Result<Self> {
        KernelParams::new(theta)?;
        Ok(Self(DVector::from_iterator(
            sites.len(),
            sites.iter().map(|s| se_kernel(s, target, theta)),
        )))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Conditional mean and variance of one GP block at a target site:
/// `(k*ᵀK⁻¹u, 1 − k*ᵀK⁻¹k*)`, the variance clamped to [0, 1].
pub fn gp_conditional(
    u_block: &DVector<f64>,
    gram: &GramMatrix,
    kstar: &CrossCovariance,
) -> Result<(f64, f64)> {
    if u_block.len() != gram.n() || kstar.0.len() != gram.n() {
        return Err(Error::InvalidInput(format!(
            "conditional size mismatch: {} latent values, {} kernel entries, {} sites",
            u_block.len(),
            kstar.0.len(),
            gram.n()
        )));
    }
    let a = gram.solve_lower(&kstar.0);
    let b = gram.solve_lower(u_block);
    let mean = a.dot(&b);
    let raw_var = 1.0 - a.norm_squared();
    assert!(
        raw_var >= -1e-8,
        "conditional variance {raw_var} below the numerical-consistency floor"
    );
    Ok((mean, raw_var.clamp(0.0, 1.0)))
}

/// How per-sample latent values at a target are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Use the conditional means (lower-variance field estimates).
    Mean,
    /// Draw from the conditional Gaussian, seeded per (sample, target).
    Sampling { seed: u64 },
}

/// Interpolated field at a list of target sites, in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedField {
    pub targets: Vec<Site>,
    /// Per-site average of per-sample predicted tensors.
    pub mean: Vec<SymTensor3>,
    /// Per-site trace of the across-sample variance of the tensor.
    pub uncertainty: Vec<f64>,
}

struct SamplePredictor {
    theta: f64,
    l: Matrix3<f64>,
    gram: Arc<GramMatrix>,
    /// K⁻¹ u_b for each of the 3ν blocks.
    alpha: Vec<DVector<f64>>,
}

/// Predictor bound to one archive and its source field; construction
/// validates that the archive was fit to exactly this data.
pub struct GwpPredictor {
    sites: Vec<Site>,
    predictors: Vec<SamplePredictor>,
    nu: usize,
    scale: f64,
}

impl GwpPredictor {
    pub fn new(archive: &PosteriorSamples, source: &TensorGrid) -> Result<Self> {
        if archive.samples.is_empty() {
            return Err(Error::Usage("posterior archive holds no samples".into()));
        }
        let (sites, tensors) = source.active_sites()?;
        if sites.len() != archive.n_sites {
            return Err(Error::Provenance(format!(
                "source field has {} active sites but the archive was fit to {}",
                sites.len(),
                archive.n_sites
            )));
        }
        let checksum = data_checksum(&sites, &tensors);
        if checksum != archive.data_checksum {
            return Err(Error::Provenance(format!(
                "source field checksum {checksum} does not match archive checksum {}",
                archive.data_checksum
            )));
        }

        let n = sites.len();
        let mut predictors = Vec::with_capacity(archive.samples.len());
        let mut last: Option<(f64, Arc<GramMatrix>)> = None;
        for s in &archive.samples {
            let g = match &last {
                Some((theta, g)) if *theta == s.theta => Arc::clone(g),
                _ => {
                    let g = Arc::new(gram(&sites, s.theta)?);
                    last = Some((s.theta, Arc::clone(&g)));
                    g
                }
            };
            let alpha = (0..3 * archive.nu)
                .map(|b| g.solve(&DVector::from_column_slice(&s.u[b * n..(b + 1) * n])))
                .collect();
            predictors.push(SamplePredictor {
                theta: s.theta,
                l: {
                    let mut l = Matrix3::zeros();
                    for (k, (i, j)) in crate::gwp::L_FREE_ELEMENTS.iter().enumerate() {
                        l[(*i, *j)] = s.l[k];
                    }
                    l
                },
                gram: g,
                alpha,
            });
        }
        Ok(Self {
            sites,
            predictors,
            nu: archive.nu,
            scale: archive.scale,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.predictors.len()
    }

    pub fn kept_sites(&self) -> &[Site] {
        &self.sites
    }

    /// Predicted tensor of one posterior sample at one target, in data
    /// units. Sampling mode derives its RNG from (seed, sample, target_tag).
    pub fn reconstruct_at(
        &self,
        sample_idx: usize,
        target: &Site,
        mode: PredictMode,
    ) -> Result<SymTensor3> {
        self.reconstruct_tagged(sample_idx, target, 0, mode)
    }

    fn reconstruct_tagged(
        &self,
        sample_idx: usize,
        target: &Site,
        target_tag: u64,
        mode: PredictMode,
    ) -> Result<SymTensor3> {
        let p = self
            .predictors
            .get(sample_idx)
            .ok_or_else(|| Error::InvalidInput(format!("sample index {sample_idx} out of range")))?;
        let kstar = CrossCovariance::new(&self.sites, target, p.theta)?;
        Ok(self.reconstruct_inner(p, &kstar, sample_idx, target_tag, mode))
    }

    fn reconstruct_inner(
        &self,
        p: &SamplePredictor,
        kstar: &CrossCovariance,
        sample_idx: usize,
        target_tag: u64,
        mode: PredictMode,
    ) -> SymTensor3 {
        let mut u_star = Vec::with_capacity(3 * self.nu);
        for alpha in &p.alpha {
            u_star.push(kstar.0.dot(alpha));
        }
        if let PredictMode::Sampling { seed } = mode {
            let a = p.gram.solve_lower(&kstar.0);
            let raw_var = 1.0 - a.norm_squared();
            assert!(
                raw_var >= -1e-8,
                "conditional variance {raw_var} below the numerical-consistency floor"
            );
            let sd = raw_var.clamp(0.0, 1.0).sqrt();
            let mut rng = stream_rng(seed, sample_idx as u64, target_tag);
            for m in u_star.iter_mut() {
                *m += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        construct_tensor(&u_star, &p.l).scale(self.scale)
    }

    /// Interpolates all targets: per-site mean over samples plus the trace
    /// of the across-sample variance. Targets are independent; evaluation
    /// is parallel over targets and sample-major within each, so batched
    /// and sequential runs agree bitwise.
    pub fn interpolate(&self, targets: &[Site], mode: PredictMode) -> Result<PredictedField> {
        let results: Vec<(SymTensor3, f64)> = targets
            .par_iter()
            .enumerate()
            .map(|(t_idx, target)| {
                let mut sum = SymTensor3::zero();
                let mut diag_sq = [0.0f64; 3];
                let mut kstar: Option<(f64, CrossCovariance)> = None;
                for (s_idx, p) in self.predictors.iter().enumerate() {
                    let ks = match &kstar {
                        Some((theta, ks)) if *theta == p.theta => ks,
                        _ => {
                            let ks = CrossCovariance::new(&self.sites, target, p.theta)?;
                            kstar = Some((p.theta, ks));
                            &kstar.as_ref().unwrap().1
                        }
                    };
                    let d = self.reconstruct_inner(p, ks, s_idx, t_idx as u64, mode);
                    let c = d.components();
                    diag_sq[0] += c[0] * c[0];
                    diag_sq[1] += c[1] * c[1];
                    diag_sq[2] += c[2] * c[2];
                    sum = sum.add(&d);
                }
                let n = self.predictors.len() as f64;
                let mean = sum.scale(1.0 / n);
                let mc = mean.components();
                let uncertainty = (0..3)
                    .map(|k| (diag_sq[k] / n - mc[k] * mc[k]).max(0.0))
                    .sum();
                Ok((mean, uncertainty))
            })
            .collect::<Result<_>>()?;

        Ok(PredictedField {
            targets: targets.to_vec(),
            mean: results.iter().map(|(m, _)| *m).collect(),
            uncertainty: results.iter().map(|(_, u)| *u).collect(),
        })
    }
}

/// One-call interpolation: build a [`GwpPredictor`] for the archive/source
/// pair and evaluate the targets.
pub fn interpolate_gwp(
    archive: &PosteriorSamples,
    source: &TensorGrid,
    targets: &[Site],
    mode: PredictMode,
) -> Result<PredictedField> {
    GwpPredictor::new(archive, source)?.interpolate(targets, mode)
}

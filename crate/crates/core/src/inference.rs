//! MCMC engine for the Wishart process posterior.
//!
//! One cycle updates the three parameter groups in turn:
//!
//! 1. elliptical slice sampling for the latent vector u (rejection-free),
//! 2. Metropolis–Hastings in log θ for the kernel length-scale,
//! 3. Metropolis–Hastings on the free elements of L, diagonals proposed
//!    multiplicatively so they stay positive.
//!
//! Tensors are rescaled to unit magnitude internally (dividing by the mean
//! diffusivity) so priors and proposal scales behave the same for any data
//! units; the scale factor travels with the posterior archive and
//! predictions are mapped back. Every update draws from its own RNG
//! substream keyed by (seed, iteration, update), so a run is reproducible
//! regardless of how many draws each slice-shrink loop consumes.

use nalgebra::{Cholesky, Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gwp::{
    default_sigma_sq, field_scale, gram, log_likelihood, log_prior_u, GramMatrix, GwpParams,
    HyperPriors, KernelParams, LatentVector, Site, L_FREE_ELEMENTS,
};
use crate::rng::stream_rng;
use crate::spd::SymTensor3;

/// Per-iteration substream tags; iteration t uses master substream t+1.
const ESS_STREAM: u64 = 1;
const THETA_STREAM: u64 = 2;
const L_STREAM: u64 = 3;

/// Slice-shrink iterations before giving up (the bracket shrinks toward the
/// current point, so this only trips on non-finite likelihoods).
const MAX_SLICE_SHRINKS: u32 = 1000;

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total MCMC cycles.
    pub total: usize,
    /// Cycles discarded from the front of the chain.
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    /// Wishart degrees of freedom.
    pub nu: usize,
    /// Likelihood variance in data units squared; `None` derives
    /// (0.05 × mean Frobenius norm)² from the rescaled training tensors.
    pub sigma_sq: Option<f64>,
    /// Random-walk standard deviation in log θ.
    pub theta_proposal_scale: f64,
    /// Proposal standard deviation for L elements, as a fraction of the
    /// prior standard deviation.
    pub l_proposal_rel: f64,
    /// Master seed; everything random derives from it.
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            total: 2000,
            burn_in: 500,
            thin: 5,
            nu: 5,
            sigma_sq: None,
            theta_proposal_scale: 0.15,
            l_proposal_rel: 0.1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.total {
            return Err(Error::InvalidInput(format!(
                "burn-in {} must be below total iterations {}",
                self.burn_in, self.total
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("thinning stride must be >= 1".into()));
        }
        if self.nu < 3 {
            return Err(Error::InvalidInput(format!(
                "degrees of freedom must be >= 3, got {}",
                self.nu
            )));
        }
        if let Some(s) = self.sigma_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "likelihood variance must be positive, got {s}"
                )));
            }
        }
        if !(self.theta_proposal_scale > 0.0) || !(self.l_proposal_rel > 0.0) {
            return Err(Error::InvalidInput("proposal scales must be positive".into()));
        }
        Ok(())
    }

    /// Retained sample count: one per `thin` completed post-burn-in cycles.
    pub fn retained(&self) -> usize {
        (self.total - self.burn_in) / self.thin
    }
}

/// Current position of one chain, with the Gram factorization for the
/// current θ and the cached log-likelihood.
#[derive(Debug, Clone)]
pub struct ChainState {
    u: LatentVector,
    params: GwpParams,
    gram: GramMatrix,
    log_lik: f64,
}

impl ChainState {
    /// Builds a state from scratch, deriving the Gram matrix from
    /// `params.kernel.theta` and caching the log-likelihood.
    pub fn new(
        data: &[SymTensor3],
        sites: &[Site],
        u: LatentVector,
        params: GwpParams,
    ) -> Result<Self> {
        if data.len() != sites.len() || data.len() != u.n_sites() {
            return Err(Error::InvalidInput(format!(
                "state size mismatch: {} tensors, {} sites, {} latent sites",
                data.len(),
                sites.len(),
                u.n_sites()
            )));
        }
        let gram = gram(sites, params.kernel.theta)?;
        let log_lik = log_likelihood(data, &u, &params);
        Ok(Self {
            u,
            params,
            gram,
            log_lik,
        })
    }

    pub fn u(&self) -> &LatentVector {
        &self.u
    }

    pub fn params(&self) -> &GwpParams {
        &self.params
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn log_lik(&self) -> f64 {
        self.log_lik
    }

    /// Absolute difference between the cached log-likelihood and a fresh
    /// recomputation; the cache-coherence invariant bounds this by 1e-9.
    pub fn coherence_error(&self, data: &[SymTensor3]) -> f64 {
        (log_likelihood(data, &self.u, &self.params) - self.log_lik).abs()
    }

    /// Unnormalized log-posterior of the current state.
    pub fn log_posterior(&self, priors: &HyperPriors) -> Result<f64> {
        Ok(self.log_lik
            + log_prior_u(&self.u, &self.gram)
            + priors.log_prior_theta(self.params.kernel.theta)?
            + priors.log_prior_l(&self.params.l))
    }
}

/// One elliptical slice sampling update of the whole latent vector.
///
/// Draws an auxiliary prior sample v, a slice threshold below the current
/// log-likelihood, and walks the ellipse `u·cos a + v·sin a`, shrinking the
/// angle bracket toward a = 0 until the likelihood clears the threshold.
/// The move is always accepted; returns the number of shrink steps.
pub fn ess_update(
    state: &mut ChainState,
    data: &[SymTensor3],
    rng: &mut impl Rng,
) -> Result<u32> {
    if !state.log_lik.is_finite() {
        return Err(Error::Numerical(format!(
            "slice sampling entered with non-finite log-likelihood {}; theta={}, sigma_sq={}",
            state.log_lik, state.params.kernel.theta, state.params.sigma_sq
        )));
    }
    let v = LatentVector::draw_prior(state.u.nu(), &state.gram, rng);
    let threshold = state.log_lik + rng.random::<f64>().ln();

    let mut a = rng.random::<f64>() * std::f64::consts::TAU;
    let (mut a_min, mut a_max) = (a - std::f64::consts::TAU, a);
    let mut shrinks = 0;
    loop {
        let (cos_a, sin_a) = (a.cos(), a.sin());
        let proposal = LatentVector::from_vec(
            state
                .u
                .as_slice()
                .iter()
                .zip(v.as_slice())
                .map(|(ui, vi)| ui * cos_a + vi * sin_a)
                .collect(),
            state.u.nu(),
            state.u.n_sites(),
        )?;
        let ll = log_likelihood(data, &proposal, &state.params);
        if ll.is_finite() && ll > threshold {
            state.u = proposal;
            state.log_lik = ll;
            return Ok(shrinks);
        }
        shrinks += 1;
        if shrinks > MAX_SLICE_SHRINKS {
            return Err(Error::Numerical(format!(
                "slice bracket failed to close after {MAX_SLICE_SHRINKS} shrinks; \
                 log-likelihood {ll}, threshold {threshold}, theta {}",
                state.params.kernel.theta
            )));
        }
        if a < 0.0 {
            a_min = a;
        } else {
            a_max = a;
        }
        a = a_min + rng.random::<f64>() * (a_max - a_min);
    }
}

/// Outcome of one hyperparameter MH proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhOutcome {
    Accepted,
    Rejected,
    /// Proposal produced an unfactorizable Gram matrix and was rejected.
    ConditioningRejected,
}

/// One Metropolis–Hastings update of the length-scale θ.
///
/// Proposes `θ′ = θ·exp(scale·z)`; the acceptance ratio multiplies the
/// latent prior ratio `p(u|θ′)/p(u|θ)` and the prior ratio by `θ′/θ`, the
/// correction that makes the multiplicative proposal reversible. On
/// acceptance the Gram cache is rebuilt for θ′.
pub fn mh_update_theta(
    state: &mut ChainState,
    sites: &[Site],
    priors: &HyperPriors,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let theta = state.params.kernel.theta;
    let z: f64 = rng.sample(StandardNormal);
    let theta_new = theta * (scale * z).exp();
    // Draw the acceptance variate unconditionally to keep the stream
    // position independent of the proposal's fate.
    let log_u = rng.random::<f64>().ln();

    let gram_new = match gram(sites, theta_new) {
        Ok(g) => g,
        Err(Error::Conditioning(_)) => return Ok(MhOutcome::ConditioningRejected),
        Err(e) => return Err(e),
    };
    let log_ratio = log_prior_u(&state.u, &gram_new) + priors.log_prior_theta(theta_new)?
        - log_prior_u(&state.u, &state.gram)
        - priors.log_prior_theta(theta)?
        + (theta_new / theta).ln();
    if log_u < log_ratio {
        state.params.kernel = KernelParams::new(theta_new)?;
        state.gram = gram_new;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// One Metropolis–Hastings update of the scale factor L.
///
/// All six free elements move jointly: off-diagonals by an additive
/// Gaussian step, diagonals multiplicatively (`d′ = d·exp(scale·z)`) so
/// positivity is structural. The acceptance ratio is the likelihood × prior
/// ratio times `Π d′/d` for the multiplicative coordinates.
pub fn mh_update_l(
    state: &mut ChainState,
    data: &[SymTensor3],
    priors: &HyperPriors,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let l_old = state.params.l;
    let mut l_new = l_old;
    let mut log_jacobian = 0.0;
    for (i, j) in L_FREE_ELEMENTS {
        let z: f64 = rng.sample(StandardNormal);
        if i == j {
            let factor = (scale * z).exp();
            l_new[(i, j)] *= factor;
            log_jacobian += factor.ln();
        } else {
            l_new[(i, j)] += scale * z;
        }
    }
    let log_u = rng.random::<f64>().ln();

    let params_new = GwpParams::new(
        state.params.nu,
        l_new,
        state.params.sigma_sq,
        state.params.kernel,
    )?;
    let ll_new = log_likelihood(data, &state.u, &params_new);
    if !ll_new.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite log-likelihood {ll_new} for proposed scale matrix"
        )));
    }
    let log_ratio = ll_new + priors.log_prior_l(&l_new) - state.log_lik
        - priors.log_prior_l(&l_old)
        + log_jacobian;
    if log_u < log_ratio {
        state.params = params_new;
        state.log_lik = ll_new;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// One retained posterior sample, in rescaled (unit-magnitude) data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    /// Zero-based MCMC cycle index this sample was taken at.
    pub iteration: usize,
    pub theta: f64,
    /// Free elements of L in row-major lower-triangular order
    /// (l11, l21, l22, l31, l32, l33).
    pub l: [f64; 6],
    pub log_posterior: f64,
    /// Latent vector, GP-block-major, length 3νN.
    pub u: Vec<f64>,
}

impl PosteriorSample {
    pub fn l_matrix(&self) -> nalgebra::Matrix3<f64> {
        let mut l = nalgebra::Matrix3::zeros();
        for (k, (i, j)) in L_FREE_ELEMENTS.iter().enumerate() {
            l[(*i, *j)] = self.l[k];
        }
        l
    }
}

/// Acceptance-rate and diagnostic summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub theta_acceptance: f64,
    pub l_acceptance: f64,
    /// θ proposals rejected because the Gram factorization failed.
    pub conditioning_rejects: usize,
    /// Mean slice-shrink steps per elliptical update.
    pub mean_ess_shrinks: f64,
}

/// Ordered retained samples plus the metadata needed to reproduce and to
/// predict from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub n_sites: usize,
    pub nu: usize,
    /// Resolved likelihood variance, in rescaled units.
    pub sigma_sq: f64,
    /// Rescaling divisor: raw tensors = scale × rescaled tensors.
    pub scale: f64,
    /// Checksum of the training sites and raw tensors.
    pub data_checksum: String,
    pub config: McmcConfig,
    pub acceptance: AcceptanceStats,
    /// Unnormalized log-posterior after every cycle.
    pub log_posterior_trace: Vec<f64>,
    pub samples: Vec<PosteriorSample>,
}

impl PosteriorSamples {
    /// Reconstructs the tensor of sample `s` at kept-site index `site`, in
    /// raw data units.
    pub fn sample_tensor_at(&self, s: usize, site: usize) -> Result<SymTensor3> {
        let sample = self
            .samples
            .get(s)
            .ok_or_else(|| Error::InvalidInput(format!("sample index {s} out of range")))?;
        if site >= self.n_sites {
            return Err(Error::InvalidInput(format!(
                "site index {site} out of range for {} sites",
                self.n_sites
            )));
        }
        let mut u_site = Vec::with_capacity(3 * self.nu);
        for b in 0..3 * self.nu {
            u_site.push(sample.u[b * self.n_sites + site]);
        }
        Ok(crate::gwp::construct_tensor(&u_site, &sample.l_matrix()).scale(self.scale))
    }

    /// Per-site mean of the reconstructed tensors over all samples, in raw
    /// data units.
    pub fn posterior_mean_at(&self, site: usize) -> Result<SymTensor3> {
        let mut acc = SymTensor3::zero();
        for s in 0..self.samples.len() {
            acc = acc.add(&self.sample_tensor_at(s, site)?);
        }
        Ok(acc.scale(1.0 / self.samples.len() as f64))
    }
}

/// SHA-256 over the training sites and tensors, hex-encoded. Prediction
/// recomputes this from its inputs to reject archives fit to other data.
pub fn data_checksum(sites: &[Site], tensors: &[SymTensor3]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((sites.len() as u64).to_le_bytes());
    for s in sites {
        for c in s {
            hasher.update(c.to_le_bytes());
        }
    }
    for t in tensors {
        for c in t.components() {
            hasher.update(c.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Deterministic data-matched starting point for the latent field.
///
/// At every site the first three û vectors are set to the columns of the
/// Cholesky factor of L₀⁻¹·S·L₀⁻ᵀ, so the constructed tensor reproduces the
/// training tensor exactly; the remaining ν−3 vectors start at zero. This
/// puts the chain at the likelihood optimum from iteration one — a cold
/// prior draw needs a long crawl through ESS steps before the length-scale
/// update sees latents with the data's smoothness, and until then θ only
/// feels its prior. A non-positive-definite training tensor (possible with
/// user-supplied fields) is clamped to a tiny positive spectrum for the
/// start point only; the likelihood always sees the original data.
fn warm_start_u(nu: usize, scaled: &[SymTensor3], l0: &Matrix3<f64>) -> Result<LatentVector> {
    let n = scaled.len();
    let l_inv = l0.try_inverse().ok_or_else(|| {
        Error::Numerical("prior mean L is singular; cannot whiten training tensors".into())
    })?;
    let mut data = vec![0.0; 3 * nu * n];
    for (site, s) in scaled.iter().enumerate() {
        let m = l_inv * s.to_matrix() * l_inv.transpose();
        let m = 0.5 * (m + m.transpose());
        let c = match Cholesky::new(m) {
            Some(c) => c.l(),
            None => {
                let se = SymmetricEigen::new(m);
                let floor = 1e-9 * (1.0 + se.eigenvalues.amax());
                let clamped = se.eigenvalues.map(|v| v.max(floor));
                let rebuilt = se.eigenvectors
                    * Matrix3::from_diagonal(&clamped)
                    * se.eigenvectors.transpose();
                Cholesky::new(0.5 * (rebuilt + rebuilt.transpose()))
                    .ok_or_else(|| {
                        Error::Numerical(format!(
                            "warm start failed: site {site} tensor cannot be made positive \
                             definite"
                        ))
                    })?
                    .l()
            }
        };
        for i in 0..nu.min(3) {
            for d in 0..3 {
                data[(3 * i + d) * n + site] = c[(d, i)];
            }
        }
    }
    LatentVector::from_vec(data, nu, n)
}

/// Runs one MCMC chain over a training field and returns the retained
/// posterior samples.
///
/// Tensors are internally divided by their mean diffusivity; θ is
/// initialized at its prior median, L at the Cholesky factor of the scaled
/// data mean over ν, and u at the data-matched warm start.
pub fn run_chain(
    sites: &[Site],
    tensors: &[SymTensor3],
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    if sites.len() != tensors.len() {
        return Err(Error::InvalidInput(format!(
            "{} sites but {} tensors",
            sites.len(),
            tensors.len()
        )));
    }
    if sites.len() < 2 {
        return Err(Error::InvalidInput("chain needs at least 2 training sites".into()));
    }

    let scale = field_scale(tensors);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Numerical(format!(
            "mean diffusivity {scale} of training tensors is not positive"
        )));
    }
    let scaled: Vec<SymTensor3> = tensors.iter().map(|t| t.scale(1.0 / scale)).collect();
    let sigma_sq = match config.sigma_sq {
        Some(raw) => raw / (scale * scale),
        None => default_sigma_sq(&scaled),
    };
    let priors = HyperPriors::from_data(sites, &scaled, config.nu)?;

    let theta0 = priors.theta_median();
    let params = GwpParams::new(
        config.nu,
        priors.l_mean,
        sigma_sq,
        KernelParams::new(theta0)?,
    )?;
    let gram0 = gram(sites, theta0)?;
    let u0 = warm_start_u(config.nu, &scaled, &priors.l_mean)?;
    let mut state = ChainState {
        log_lik: log_likelihood(&scaled, &u0, &params),
        u: u0,
        params,
        gram: gram0,
    };
    let l_scale = config.l_proposal_rel * priors.l_sd;

    let mut samples = Vec::with_capacity(config.retained());
    let mut trace = Vec::with_capacity(config.total);
    let mut theta_accepts = 0usize;
    let mut l_accepts = 0usize;
    let mut conditioning_rejects = 0usize;
    let mut total_shrinks = 0u64;

    for t in 0..config.total {
        let iter_tag = t as u64 + 1;
        total_shrinks += ess_update(
            &mut state,
            &scaled,
            &mut stream_rng(config.seed, iter_tag, ESS_STREAM),
        )? as u64;
        match mh_update_theta(
            &mut state,
            sites,
            &priors,
            config.theta_proposal_scale,
            &mut stream_rng(config.seed, iter_tag, THETA_STREAM),
        )? {
            MhOutcome::Accepted => theta_accepts += 1,
            MhOutcome::Rejected => {}
            MhOutcome::ConditioningRejected => conditioning_rejects += 1,
        }
        if mh_update_l(
            &mut state,
            &scaled,
            &priors,
            l_scale,
            &mut stream_rng(config.seed, iter_tag, L_STREAM),
        )? == MhOutcome::Accepted
        {
            l_accepts += 1;
        }

        let lp = state.log_posterior(&priors)?;
        if !lp.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-posterior {lp} at iteration {t} (theta {})",
                state.params.kernel.theta
            )));
        }
        trace.push(lp);

        #[cfg(debug_assertions)]
        if t % 100 == 0 {
            debug_assert!(
                state.coherence_error(&scaled) < 1e-9,
                "log-likelihood cache drifted at iteration {t}"
            );
        }

        if t >= config.burn_in && (t - config.burn_in + 1) % config.thin == 0 {
            let mut l = [0.0; 6];
            for (k, (i, j)) in L_FREE_ELEMENTS.iter().enumerate() {
                l[k] = state.params.l[(*i, *j)];
            }
            samples.push(PosteriorSample {
                iteration: t,
                theta: state.params.kernel.theta,
                l,
                log_posterior: lp,
                u: state.u.as_slice().to_vec(),
            });
        }
    }

    Ok(PosteriorSamples {
        n_sites: sites.len(),
        nu: config.nu,
        sigma_sq,
        scale,
        data_checksum: data_checksum(sites, tensors),
        config: config.clone(),
        acceptance: AcceptanceStats {
            theta_acceptance: theta_accepts as f64 / config.total as f64,
            l_acceptance: l_accepts as f64 / config.total as f64,
            conditioning_rejects,
            mean_ess_shrinks: total_shrinks as f64 / config.total as f64,
        },
        log_posterior_trace: trace,
        samples,
    })
}

/// Archive header: everything in [`PosteriorSamples`] except the samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    version: u32,
    n_sites: usize,
    nu: usize,
    sigma_sq: f64,
    scale: f64,
    data_checksum: String,
    config: McmcConfig,
    acceptance: AcceptanceStats,
    log_posterior_trace: Vec<f64>,
}

/// Writes a posterior archive: one JSON header line, then one JSON record
/// per retained sample.
pub fn write_archive(samples: &PosteriorSamples, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = ArchiveHeader {
        version: 1,
        n_sites: samples.n_sites,
        nu: samples.nu,
        sigma_sq: samples.sigma_sq,
        scale: samples.scale,
        data_checksum: samples.data_checksum.clone(),
        config: samples.config.clone(),
        acceptance: samples.acceptance.clone(),
        log_posterior_trace: samples.log_posterior_trace.clone(),
    };
    serde_json::to_writer(&mut f, &header)
        .map_err(|e| Error::Validation(format!("archive header serialization failed: {e}")))?;
    f.write_all(b"\n")?;
    for s in &samples.samples {
        serde_json::to_writer(&mut f, s)
            .map_err(|e| Error::Validation(format!("archive record serialization failed: {e}")))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads an archive written by [`write_archive`], validating version,
/// record count, and latent-vector lengths.
pub fn read_archive(path: &Path) -> Result<PosteriorSamples> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: Some(1),
            msg: "empty archive".into(),
        })??;
    let header: ArchiveHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: Some(1),
        msg: format!("bad archive header: {e}"),
    })?;
    if header.version != 1 {
        return Err(Error::Validation(format!(
            "unsupported archive version {}",
            header.version
        )));
    }

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: PosteriorSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: Some(i + 2),
            msg: format!("bad archive record: {e}"),
        })?;
        if sample.u.len() != 3 * header.nu * header.n_sites {
            return Err(Error::Validation(format!(
                "archive record {} has latent length {}, expected 3·{}·{}",
                i + 1,
                sample.u.len(),
                header.nu,
                header.n_sites
            )));
        }
        samples.push(sample);
    }
    let expected = header.config.retained();
    if samples.len() != expected {
        return Err(Error::Validation(format!(
            "archive holds {} samples but config implies {expected}",
            samples.len()
        )));
    }
    Ok(PosteriorSamples {
        n_sites: header.n_sites,
        nu: header.nu,
        sigma_sq: header.sigma_sq,
        scale: header.scale,
        data_checksum: header.data_checksum,
        config: header.config,
        acceptance: header.acceptance,
        log_posterior_trace: header.log_posterior_trace,
        samples,
    })
}

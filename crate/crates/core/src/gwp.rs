//! The generalized Wishart process model.
//!
//! A tensor field `D(z)` follows a GWP when `D(z) = Σᵢ L ûᵢ(z) ûᵢ(z)ᵀ Lᵀ`
//! for i = 1..ν, where the 3ν scalar functions `u_{id}(z)` are independent
//! zero-mean Gaussian processes sharing one squared exponential kernel, and
//! `L` is the lower Cholesky factor of the scale matrix `V = LLᵀ`. The
//! process mean is `νV`.
//!
//! This module holds the kernel, the Gram matrix with its Cholesky factor,
//! tensor construction from latent values, the Gaussian misfit
//! log-likelihood, and the hyperparameter priors. The latent prior over all
//! 3νN values is block diagonal with 3ν identical N×N blocks, so everything
//! here works through one shared Gram factorization and never materializes
//! the full covariance.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spd::SymTensor3;

/// Physical position of a grid site (mm).
pub type Site = [f64; 3];

/// Initial Cholesky jitter, relative to the average Gram diagonal (which is
/// 1 + jitter for the squared exponential kernel).
pub const JITTER_INITIAL: f64 = 1e-8;
/// Jitter escalation factor.
pub const JITTER_GROWTH: f64 = 10.0;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

fn dist_sq(a: &Site, b: &Site) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Squared exponential kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Length-scale, same units as the site coordinates.
    pub theta: f64,
}

impl KernelParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "kernel length-scale must be positive and finite, got {theta}"
            )));
        }
        Ok(Self { theta })
    }
}

/// `k(z, z') = exp(−0.5‖z−z'‖²/θ²)`, in (0, 1], equal to 1 iff z = z'.
pub fn se_kernel(z: &Site, z_prime: &Site, theta: f64) -> f64 {
    (-0.5 * dist_sq(z, z_prime) / (theta * theta)).exp()
}

/// N×N kernel Gram matrix over a site set, with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    k: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    jitter: f64,
    log_det: f64,
}

/// Builds the Gram matrix `K_ij = k(z_i, z_j) + jitter·δ_ij`, escalating the
/// jitter by ×10 from 1e-8 up to 1e-4 until the Cholesky succeeds.
pub fn gram(sites: &[Site], theta: f64) -> Result<GramMatrix> {
    gram_with_jitter(sites, theta, JITTER_INITIAL)
}

/// Same as [`gram`] but starting the jitter escalation at `initial_jitter`.
pub fn gram_with_jitter(sites: &[Site], theta: f64, initial_jitter: f64) -> Result<GramMatrix> {
    KernelParams::new(theta)?;
    if sites.is_empty() {
        return Err(Error::InvalidInput("gram: empty site list".into()));
    }
    let n = sites.len();
    let mut base = DMatrix::zeros(n, n);
    for i in 0..n {
        base[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = se_kernel(&sites[i], &sites[j], theta);
            base[(i, j)] = v;
            base[(j, i)] = v;
        }
    }

    let mut jitter = initial_jitter;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = k.clone().cholesky() {
            let chol_l = chol.l();
            let log_det = 2.0 * (0..n).map(|i| chol_l[(i, i)].ln()).sum::<f64>();
            return Ok(GramMatrix {
                k,
                chol_l,
                jitter,
                log_det,
            });
        }
        jitter *= JITTER_GROWTH;
        if jitter > JITTER_MAX {
            return Err(Error::Conditioning(format!(
                "gram Cholesky failed for {n} sites at theta={theta} even with jitter {JITTER_MAX}"
            )));
        }
    }
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    /// log |K| from the Cholesky diagonal.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `L x = b` with the lower Cholesky factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol_l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Solves `K x = b` via the two triangular solves.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_lower(b);
        self.chol_l
            .transpose()
            .solve_upper_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `bᵀ K⁻¹ b` as the squared norm of `L⁻¹ b`.
    pub fn quad_form_inv(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }

    /// One zero-mean draw with covariance K: `L z`, z ~ N(0, I).
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.chol_l * z
    }
}

/// Model state of the GWP: degrees of freedom, scale factor, noise variance,
/// and kernel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GwpParams {
    /// Degrees of freedom ν ≥ 3 (number of rank-1 terms).
    pub nu: usize,
    /// Lower-triangular Cholesky factor of the scale matrix V = LLᵀ, with
    /// strictly positive diagonal.
    pub l: Matrix3<f64>,
    /// Gaussian likelihood variance, in squared tensor units.
    pub sigma_sq: f64,
    pub kernel: KernelParams,
}

impl GwpParams {
    pub fn new(nu: usize, l: Matrix3<f64>, sigma_sq: f64, kernel: KernelParams) -> Result<Self> {
        if nu < 3 {
            return Err(Error::InvalidInput(format!(
                "degrees of freedom must be >= 3, got {nu}"
            )));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "likelihood variance must be positive, got {sigma_sq}"
            )));
        }
        validate_lower_triangular(&l)?;
        Ok(Self {
            nu,
            l,
            sigma_sq,
            kernel,
        })
    }

    /// The scale matrix V = LLᵀ.
    pub fn scale_matrix(&self) -> Matrix3<f64> {
        self.l * self.l.transpose()
    }
}

pub fn validate_lower_triangular(l: &Matrix3<f64>) -> Result<()> {
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("L has non-finite entries".into()));
    }
    if l[(0, 1)] != 0.0 || l[(0, 2)] != 0.0 || l[(1, 2)] != 0.0 {
        return Err(Error::InvalidInput(
            "L must be lower triangular (upper entries zero)".into(),
        ));
    }
    if (0..3).any(|i| l[(i, i)] <= 0.0) {
        return Err(Error::InvalidInput(
            "L must have a strictly positive diagonal so LLᵀ is SPD".into(),
        ));
    }
    Ok(())
}

/// The six free (lower-triangular) positions of L, row-major.
pub const L_FREE_ELEMENTS: [(usize, usize); 6] =
    [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

/// All 3νN latent GP values.
///
/// Storage is GP-major: block `b = 3(i−1) + (d−1)` of length N holds
/// `u_{id}(z_1..z_N)`, so all blocks share the same site ordering and the
/// same N×N prior covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    data: Vec<f64>,
    nu: usize,
    n_sites: usize,
}

impl LatentVector {
    pub fn zeros(nu: usize, n_sites: usize) -> Self {
        Self {
            data: vec![0.0; 3 * nu * n_sites],
            nu,
            n_sites,
        }
    }

    pub fn from_vec(data: Vec<f64>, nu: usize, n_sites: usize) -> Result<Self> {
        if data.len() != 3 * nu * n_sites {
            return Err(Error::Validation(format!(
                "latent vector length {} != 3·{nu}·{n_sites}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent vector has non-finite values".into()));
        }
        Ok(Self {
            data,
            nu,
            n_sites,
        })
    }

    /// One zero-mean prior draw: every block is an independent N(0, K) draw.
    pub fn draw_prior(nu: usize, gram: &GramMatrix, rng: &mut impl Rng) -> Self {
        let n = gram.n();
        let mut data = Vec::with_capacity(3 * nu * n);
        for _ in 0..3 * nu {
            data.extend_from_slice(gram.sample(rng).as_slice());
        }
        Self {
            data,
            nu,
            n_sites: n,
        }
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_blocks(&self) -> usize {
        3 * self.nu
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.data[b * self.n_sites..(b + 1) * self.n_sites]
    }

    pub fn block_vector(&self, b: usize) -> DVector<f64> {
        DVector::from_column_slice(self.block(b))
    }

    /// Gathers the 3ν values at one site, ordered (i=1,d=1..3), (i=2,...), …
    pub fn site_values(&self, site: usize, out: &mut Vec<f64>) {
        out.clear();
        for b in 0..self.n_blocks() {
            out.push(self.data[b * self.n_sites + site]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Builds one tensor from the 3ν latent values at a site:
/// `D = Σᵢ L ûᵢ ûᵢᵀ Lᵀ = L (Σᵢ ûᵢ ûᵢᵀ) Lᵀ`.
///
/// The result is symmetric positive semidefinite; it is SPD whenever the ûᵢ
/// span all three dimensions (almost surely for ν ≥ 3 continuous draws).
pub fn construct_tensor(u_site: &[f64], l: &Matrix3<f64>) -> SymTensor3 {
    debug_assert_eq!(u_site.len() % 3, 0);
    let mut outer = Matrix3::zeros();
    for u in u_site.chunks_exact(3) {
        let v = Vector3::new(u[0], u[1], u[2]);
        outer += v * v.transpose();
    }
    SymTensor3::from_matrix(&(l * outer * l.transpose()))
}

/// Unnormalized Gaussian misfit log-likelihood
/// `−(1/2σ²)·Σₙ ‖S(zₙ) − D(zₙ)‖²_frob`.
///
/// σ² is fixed per run, so the dropped normalization constant cancels in
/// both slice-sampling threshold comparisons and MH acceptance ratios.
pub fn log_likelihood(data: &[SymTensor3], u: &LatentVector, params: &GwpParams) -> f64 {
    assert_eq!(data.len(), u.n_sites(), "data/latent site count mismatch");
    assert_eq!(params.nu, u.nu(), "degrees-of-freedom mismatch");
    let mut buf = Vec::with_capacity(u.n_blocks());
    let mut misfit = 0.0;
    for (n, s) in data.iter().enumerate() {
        u.site_values(n, &mut buf);
        let d = construct_tensor(&buf, &params.l);
        misfit += s.sub(&d).frob_norm_sq();
    }
    -misfit / (2.0 * params.sigma_sq)
}

/// Log-density of the latent prior: 3ν independent N(0, K) blocks.
pub fn log_prior_u(u: &LatentVector, gram: &GramMatrix) -> f64 {
    assert_eq!(u.n_sites(), gram.n(), "latent/gram size mismatch");
    let n = gram.n() as f64;
    let norm_const = -0.5 * gram.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for b in 0..u.n_blocks() {
        total += -0.5 * gram.quad_form_inv(&u.block_vector(b)) + norm_const;
    }
    total
}

/// Hyperparameter prior constants, derived from the training data.
///
/// θ gets a log-normal prior; the free elements of L get independent
/// Gaussians centered on the Cholesky factor of the data mean divided by ν
/// (so the prior mean of the process, νLLᵀ, matches the data mean).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPriors {
    /// ln(median) of the log-normal prior on θ.
    pub theta_log_median: f64,
    /// Log-scale of the log-normal prior on θ.
    pub theta_log_sd: f64,
    /// Prior mean of each free element of L.
    pub l_mean: Matrix3<f64>,
    /// Shared prior standard deviation of the free elements of L.
    pub l_sd: f64,
}

impl HyperPriors {
    /// Derives the prior constants from the training sites and tensors:
    /// θ median = 2 × mean nearest-neighbor spacing (log-sd 1.0), L prior
    /// mean = chol(mean(S)/ν), L sd = 0.5·‖chol(mean(S)/ν)‖_frob.
    pub fn from_data(sites: &[Site], tensors: &[SymTensor3], nu: usize) -> Result<Self> {
        if sites.len() != tensors.len() || sites.len() < 2 {
            return Err(Error::InvalidInput(
                "hyperpriors need >= 2 sites with matching tensors".into(),
            ));
        }
        let mut nn_sum = 0.0;
        for (i, a) in sites.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, b) in sites.iter().enumerate() {
                if i != j {
                    best = best.min(dist_sq(a, b));
                }
            }
            nn_sum += best.sqrt();
        }
        let mean_nn = nn_sum / sites.len() as f64;
        if !(mean_nn > 0.0) {
            return Err(Error::InvalidInput(
                "hyperpriors: coincident sites give zero nearest-neighbor spacing".into(),
            ));
        }

        let mut mean = Matrix3::zeros();
        for t in tensors {
            mean += t.to_matrix();
        }
        mean /= tensors.len() as f64;
        let scaled = mean / nu as f64;
        let chol = scaled.cholesky().ok_or_else(|| {
            Error::NotSpd("hyperpriors: mean training tensor is not positive definite".into())
        })?;
        let l_mean = chol.l();
        let l_sd = 0.5 * l_mean.norm();

        Ok(Self {
            theta_log_median: (2.0 * mean_nn).ln(),
            theta_log_sd: 1.0,
            l_mean,
            l_sd,
        })
    }

    pub fn theta_median(&self) -> f64 {
        self.theta_log_median.exp()
    }

    /// Log-normal log-density of θ.
    pub fn log_prior_theta(&self, theta: f64) -> Result<f64> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "theta must be positive, got {theta}"
            )));
        }
        let s = self.theta_log_sd;
        let z = (theta.ln() - self.theta_log_median) / s;
        Ok(-theta.ln() - 0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Independent Gaussian log-density over the six free elements of L.
    pub fn log_prior_l(&self, l: &Matrix3<f64>) -> f64 {
        let mut total = 0.0;
        for (i, j) in L_FREE_ELEMENTS {
            let z = (l[(i, j)] - self.l_mean[(i, j)]) / self.l_sd;
            total += -0.5 * z * z - self.l_sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        total
    }
}

/// Divisor used to bring raw tensors (~1e-3 mm²/s) to unit scale before
/// inference: the mean of trace/3 over the training tensors.
pub fn field_scale(tensors: &[SymTensor3]) -> f64 {
    let sum: f64 = tensors.iter().map(|t| t.trace() / 3.0).sum();
    sum / tensors.len() as f64
}

/// Default likelihood variance: (0.05 × mean Frobenius norm)².
pub fn default_sigma_sq(tensors: &[SymTensor3]) -> f64 {
    let mean_frob: f64 =
        tensors.iter().map(SymTensor3::frob_norm).sum::<f64>() / tensors.len() as f64;
    (0.05 * mean_frob).powi(2)
}

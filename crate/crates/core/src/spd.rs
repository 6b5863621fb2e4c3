//! Exact small-matrix numerics for 3×3 symmetric tensors.
//!
//! Diffusion tensors are symmetric 3×3 matrices (units mm²/s), stored here by
//! their six unique components. Matrix functions (log, exp, inverse square
//! root) go through the eigendecomposition, which is exact for symmetric 3×3
//! input, and the two distances used for benchmarking — Frobenius and the
//! affine-invariant Riemannian metric — live here as well.

use nalgebra::{Matrix3, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff of the SPD check: a symmetric matrix is
/// accepted iff `min_eig > SPD_EIG_TOL * max(1, max_eig)`. Diffusion tensors
/// are ~1e-3 mm²/s, so the cutoff must scale with the matrix.
pub const SPD_EIG_TOL: f64 = 1e-12;

/// A symmetric 3×3 tensor stored by its six unique components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor3 {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
}

impl SymTensor3 {
    pub const fn new(dxx: f64, dyy: f64, dzz: f64, dxy: f64, dxz: f64, dyz: f64) -> Self {
        Self {
            dxx,
            dyy,
            dzz,
            dxy,
            dxz,
            dyz,
        }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    }

    pub const fn from_diagonal(a: f64, b: f64, c: f64) -> Self {
        Self::new(a, b, c, 0.0, 0.0, 0.0)
    }

    /// Builds from a full matrix, averaging the off-diagonal pairs.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self::new(
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            0.5 * (m[(1, 2)] + m[(2, 1)]),
        )
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.dxx, self.dxy, self.dxz, //
            self.dxy, self.dyy, self.dyz, //
            self.dxz, self.dyz, self.dzz,
        )
    }

    /// Components in file order `[dxx, dyy, dzz, dxy, dxz, dyz]`.
    pub fn components(&self) -> [f64; 6] {
        [self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz]
    }

    pub fn from_components(c: [f64; 6]) -> Self {
        Self::new(c[0], c[1], c[2], c[3], c[4], c[5])
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        self.dxx + self.dyy + self.dzz
    }

    /// Squared Frobenius norm; off-diagonal components count twice.
    pub fn frob_norm_sq(&self) -> f64 {
        self.dxx * self.dxx
            + self.dyy * self.dyy
            + self.dzz * self.dzz
            + 2.0 * (self.dxy * self.dxy + self.dxz * self.dxz + self.dyz * self.dyz)
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(
            self.dxx * s,
            self.dyy * s,
            self.dzz * s,
            self.dxy * s,
            self.dxz * s,
            self.dyz * s,
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.dxx + other.dxx,
            self.dyy + other.dyy,
            self.dzz + other.dzz,
            self.dxy + other.dxy,
            self.dxz + other.dxz,
            self.dyz + other.dyz,
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn determinant(&self) -> f64 {
        self.to_matrix().determinant()
    }
}

// The field file format stores tensors as `[dxx, dyy, dzz, dxy, dxz, dyz]`.
impl Serialize for SymTensor3 {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.components().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymTensor3 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let c = <[f64; 6]>::deserialize(deserializer)?;
        if !c.iter().all(|v| v.is_finite()) {
            return Err(D::Error::custom("tensor components must be finite"));
        }
        Ok(Self::from_components(c))
    }
}

/// A symmetric positive definite tensor; the SPD check runs at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdTensor3(SymTensor3);

impl SpdTensor3 {
    /// Validates finiteness and the relative eigenvalue cutoff.
    pub fn try_new(t: SymTensor3) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::InvalidInput(
                "tensor components must be finite".into(),
            ));
        }
        let e = eig(&t)?;
        if !is_spd_spectrum(&e.eigenvalues) {
            return Err(Error::NotSpd(format!(
                "min eigenvalue {:.6e} fails the SPD cutoff (max eigenvalue {:.6e})",
                e.eigenvalues[2], e.eigenvalues[0]
            )));
        }
        Ok(Self(t))
    }

    /// Caller guarantees positivity (e.g. output of `matrix_exp`).
    pub(crate) fn new_unchecked(t: SymTensor3) -> Self {
        Self(t)
    }

    pub fn sym(&self) -> &SymTensor3 {
        &self.0
    }

    pub fn into_sym(self) -> SymTensor3 {
        self.0
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.0.to_matrix()
    }
}

impl std::ops::Deref for SpdTensor3 {
    type Target = SymTensor3;
    fn deref(&self) -> &SymTensor3 {
        &self.0
    }
}

impl TryFrom<SymTensor3> for SpdTensor3 {
    type Error = Error;
    fn try_from(t: SymTensor3) -> Result<Self> {
        Self::try_new(t)
    }
}

fn is_spd_spectrum(eigenvalues: &[f64; 3]) -> bool {
    let max = eigenvalues[0];
    let min = eigenvalues[2];
    min > SPD_EIG_TOL * max.max(1.0)
}

/// `true` iff the tensor passes the same check `SpdTensor3::try_new` runs.
pub fn spd_check(t: &SymTensor3) -> bool {
    t.is_finite() && eig(t).map(|e| is_spd_spectrum(&e.eigenvalues)).unwrap_or(false)
}

/// Eigendecomposition of a symmetric 3×3 matrix.
///
/// Eigenvalues are sorted descending; eigenvectors are the matching columns
/// of an orthogonal matrix with a deterministic sign convention (the
/// largest-magnitude component of each column is positive).
#[derive(Debug, Clone)]
pub struct EigenDecomp3 {
    /// λ1 ≥ λ2 ≥ λ3.
    pub eigenvalues: [f64; 3],
    /// Columns are the eigenvectors for the sorted eigenvalues.
    pub eigenvectors: Matrix3<f64>,
}

impl EigenDecomp3 {
    /// QΛQᵀ.
    pub fn reconstruct(&self) -> Matrix3<f64> {
        let q = &self.eigenvectors;
        let l = Matrix3::from_diagonal(&Vector3::from(self.eigenvalues));
        q * l * q.transpose()
    }

    /// Q f(Λ) Qᵀ for a scalar function applied to the eigenvalues.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> SymTensor3 {
        let q = &self.eigenvectors;
        let l = Matrix3::from_diagonal(&Vector3::new(
            f(self.eigenvalues[0]),
            f(self.eigenvalues[1]),
            f(self.eigenvalues[2]),
        ));
        SymTensor3::from_matrix(&(q * l * q.transpose()))
    }
}

/// Symmetric eigendecomposition with sorted eigenvalues and the sign
/// convention described on [`EigenDecomp3`].
pub fn eig(t: &SymTensor3) -> Result<EigenDecomp3> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(
            "eig: tensor components must be finite".into(),
        ));
    }
    let se = t.to_matrix().symmetric_eigen();

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| se.eigenvalues[b].total_cmp(&se.eigenvalues[a]));

    let mut eigenvalues = [0.0; 3];
    let mut eigenvectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = se.eigenvalues[src];
        let mut col = se.eigenvectors.column(src).into_owned();
        // Sign convention: largest-magnitude component positive.
        let mut imax = 0;
        for k in 1..3 {
            if col[k].abs() > col[imax].abs() {
                imax = k;
            }
        }
        if col[imax] < 0.0 {
            col = -col;
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(EigenDecomp3 {
        eigenvalues,
        eigenvectors,
    })
}

/// Matrix logarithm of an SPD tensor, `Q log(Λ) Qᵀ`.
pub fn matrix_log(t: &SpdTensor3) -> SymTensor3 {
    let e = eig(t.sym()).expect("SpdTensor3 components are finite");
    e.map_eigenvalues(f64::ln)
}

/// Matrix exponential of a symmetric tensor; the result is SPD because the
/// exponentiated eigenvalues are positive.
pub fn matrix_exp(t: &SymTensor3) -> Result<SpdTensor3> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(
            "matrix_exp: tensor components must be finite".into(),
        ));
    }
    let e = eig(t)?;
    Ok(SpdTensor3::new_unchecked(e.map_eigenvalues(f64::exp)))
}

/// Frobenius distance `√trace((a−b)ᵀ(a−b))`.
pub fn frob_distance(a: &SymTensor3, b: &SymTensor3) -> f64 {
    a.sub(b).frob_norm()
}

/// Affine-invariant Riemannian distance
/// `√trace(log(a^{-1/2} b a^{-1/2})ᵀ log(a^{-1/2} b a^{-1/2}))`.
pub fn riem_distance(a: &SpdTensor3, b: &SpdTensor3) -> f64 {
    let ea = eig(a.sym()).expect("SpdTensor3 components are finite");
    let inv_sqrt = ea.map_eigenvalues(|l| 1.0 / l.sqrt()).to_matrix();
    let m = inv_sqrt * b.to_matrix() * inv_sqrt;
    let inner = SpdTensor3::new_unchecked(SymTensor3::from_matrix(&m));
    matrix_log(&inner).frob_norm()
}

/// Fractional anisotropy `√(3/2)·‖λ−λ̄‖/‖λ‖`, in [0, 1].
pub fn fractional_anisotropy(t: &SpdTensor3) -> f64 {
    let e = eig(t.sym()).expect("SpdTensor3 components are finite");
    let [l1, l2, l3] = e.eigenvalues;
    let mean = (l1 + l2 + l3) / 3.0;
    let dev = (l1 - mean).powi(2) + (l2 - mean).powi(2) + (l3 - mean).powi(2);
    let norm = l1 * l1 + l2 * l2 + l3 * l3;
    (1.5 * dev / norm).sqrt().min(1.0)
}

/// Ellipsoid glyph of a tensor: the level surface `rᵀ D⁻¹ r = c`.
///
/// Semi-axis lengths are `√(c·λᵢ)` along the eigenvector directions, so the
/// radii ordering matches the eigenvalue ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Glyph {
    /// Position of the glyph center (mm).
    pub center: [f64; 3],
    /// Semi-axis lengths, r1 ≥ r2 ≥ r3 > 0 (mm).
    pub radii: [f64; 3],
    /// Orthogonal matrix whose columns are the semi-axis directions,
    /// column-major.
    pub axes: [[f64; 3]; 3],
}

impl Glyph {
    pub fn axes_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[
            Vector3::from(self.axes[0]),
            Vector3::from(self.axes[1]),
            Vector3::from(self.axes[2]),
        ])
    }

    pub fn with_center(mut self, center: [f64; 3]) -> Self {
        self.center = center;
        self
    }
}

/// Glyph of the level set `rᵀ D⁻¹ r = c`, centered at the origin.
pub fn ellipsoid_glyph(t: &SpdTensor3, c: f64) -> Result<Glyph> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "glyph constant must be positive and finite, got {c}"
        )));
    }
    let e = eig(t.sym()).expect("SpdTensor3 components are finite");
    let radii = [
        (c * e.eigenvalues[0]).sqrt(),
        (c * e.eigenvalues[1]).sqrt(),
        (c * e.eigenvalues[2]).sqrt(),
    ];
    let q = e.eigenvectors;
    let axes = [
        [q[(0, 0)], q[(1, 0)], q[(2, 0)]],
        [q[(0, 1)], q[(1, 1)], q[(2, 1)]],
        [q[(0, 2)], q[(1, 2)], q[(2, 2)]],
    ];
    Ok(Glyph {
        center: [0.0; 3],
        radii,
        axes,
    })
}

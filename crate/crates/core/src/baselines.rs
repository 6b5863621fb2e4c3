//! Baseline tensor-field interpolators: componentwise linear and
//! log-Euclidean.
//!
//! Linear interpolation averages tensor components directly. It is fast and
//! exact at grid nodes but is known to swell: the determinant of an
//! interpolated tensor can exceed both endpoints, and results near the SPD
//! boundary can leave the cone. Violations are counted and reported, never
//! repaired — the comparison is against the method as practitioners use it.
//!
//! Log-Euclidean interpolation maps each source tensor through the matrix
//! logarithm, interpolates componentwise in log space, and maps back with
//! the matrix exponential. Results are SPD by construction and determinants
//! interpolate geometrically, which removes the swelling artifact.

use crate::error::{Error, Result};
use crate::field::TensorGrid;
use crate::spd::{matrix_exp, matrix_log, SpdTensor3, SymTensor3};

/// Treatment of targets outside the source grid's convex hull.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Outside targets are a domain error.
    Strict,
    /// Coordinates are clamped to the hull face, degrading to edge-linear
    /// interpolation along the axes that remain in range. Used by the
    /// upsampling protocol when an even-length axis leaves its last fine
    /// site past the coarse lattice.
    Clamp,
}

/// Slack for targets that sit on the hull boundary up to roundoff.
const HULL_TOL: f64 = 1e-9;

/// Componentwise weights of the enclosing cell corners for one target.
struct CellWeights {
    /// (linear index, weight) for each corner with nonzero weight.
    corners: Vec<(usize, f64)>,
}

fn cell_weights(grid: &TensorGrid, target: &[f64; 3], policy: BoundaryPolicy) -> Result<CellWeights> {
    let dims = grid.dims();
    let spacing = grid.spacing();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for ax in 0..3 {
        let extent = (dims[ax] - 1) as f64;
        let mut u = target[ax] / spacing[ax];
        if u < -HULL_TOL || u > extent + HULL_TOL {
            match policy {
                BoundaryPolicy::Strict => {
                    return Err(Error::InvalidInput(format!(
                        "target {target:?} lies outside the source grid on axis {ax} \
                         (coordinate {:.6}, valid range [0, {:.6}])",
                        target[ax],
                        extent * spacing[ax]
                    )));
                }
                BoundaryPolicy::Clamp => u = u.clamp(0.0, extent),
            }
        }
        u = u.clamp(0.0, extent);
        // Last-node targets fold into the final cell with fraction 1.
        let i0 = (u.floor() as usize).min(dims[ax].saturating_sub(2));
        base[ax] = i0;
        frac[ax] = if dims[ax] == 1 { 0.0 } else { u - i0 as f64 };
    }

    let mut corners = Vec::with_capacity(8);
    let mut total = 0.0;
    for dz in 0..=usize::from(dims[2] > 1) {
        for dy in 0..=usize::from(dims[1] > 1) {
            for dx in 0..=usize::from(dims[0] > 1) {
                let idx = [base[0] + dx, base[1] + dy, base[2] + dz];
                let w = [dx, dy, dz]
                    .iter()
                    .zip(&frac)
                    .map(|(&d, &t)| if d == 1 { t } else { 1.0 - t })
                    .product::<f64>();
                if w == 0.0 {
                    continue;
                }
                let linear = grid.linear_index(idx)?;
                if grid.is_valid(linear) {
                    corners.push((linear, w));
                    total += w;
                }
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Validation(format!(
            "every corner of the cell enclosing {target:?} is masked out"
        )));
    }
    // Masked corners drop out; remaining weights are renormalized so the
    // interpolant stays an affine combination of valid neighbors.
    for (_, w) in corners.iter_mut() {
        *w /= total;
    }
    Ok(CellWeights { corners })
}

/// Componentwise bi/trilinear interpolation of the source field at each
/// target. Returns the interpolated tensors and the number of them that
/// fail the SPD check.
pub fn linear_interpolate(
    source: &TensorGrid,
    targets: &[[f64; 3]],
    policy: BoundaryPolicy,
) -> Result<(Vec<SymTensor3>, usize)> {
    let mut out = Vec::with_capacity(targets.len());
    let mut violations = 0usize;
    for target in targets {
        let weights = cell_weights(source, target, policy)?;
        let mut acc = SymTensor3::zero();
        for (linear, w) in &weights.corners {
            acc = acc.add(&source.tensor(*linear).scale(*w));
        }
        if SpdTensor3::try_new(acc).is_err() {
            violations += 1;
        }
        out.push(acc);
    }
    Ok((out, violations))
}

/// Log-Euclidean interpolation: matrix log per source voxel, componentwise
/// linear interpolation in log space, matrix exp per target. Every source
/// voxel that participates must be SPD; the result is SPD by construction.
pub fn logeuclid_interpolate(
    source: &TensorGrid,
    targets: &[[f64; 3]],
    policy: BoundaryPolicy,
) -> Result<Vec<SpdTensor3>> {
    // Log-map the whole field once; voxels are validated here so the error
    // names the offending site rather than surfacing mid-interpolation.
    let mut logs: Vec<Option<SymTensor3>> = vec![None; source.len()];
    for linear in source.valid_indices() {
        let spd = SpdTensor3::try_new(*source.tensor(linear)).map_err(|_| {
            Error::NotSpd(format!(
                "source voxel {:?} (linear index {linear}) is not positive definite; \
                 log-Euclidean interpolation requires an SPD source field",
                source.grid_index(linear)
            ))
        })?;
        logs[linear] = Some(matrix_log(&spd));
    }

    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let weights = cell_weights(source, target, policy)?;
        let mut acc = SymTensor3::zero();
        for (linear, w) in &weights.corners {
            let log = logs[*linear].as_ref().expect("corner validated above");
            acc = acc.add(&log.scale(*w));
        }
        out.push(matrix_exp(&acc)?);
    }
    Ok(out)
}

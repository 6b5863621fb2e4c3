//! Glyph export: tensors as ellipsoids, either as a JSON listing or as an
//! SVG rendering of one z slice.
//!
//! A tensor's glyph is the level surface rᵀD⁻¹r = c — semi-axes √(c·λᵢ)
//! along the eigenvectors. The SVG view projects each glyph onto the slice
//! plane by taking the in-plane 2×2 block of the tensor, draws the
//! resulting ellipse, and colors it by fractional anisotropy. Voxels that
//! fail the SPD check have no ellipsoid; they are emitted as flagged
//! markers rather than silently dropped.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use gwp_dti_core::field::TensorGrid;
use gwp_dti_core::spd::{eig, ellipsoid_glyph, fractional_anisotropy, SpdTensor3};
use gwp_dti_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const GLYPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlyphRecord {
    /// Linear site index in the source grid.
    pub site: usize,
    pub center: [f64; 3],
    /// Set on voxels that fail the SPD check; such records carry no
    /// ellipsoid geometry.
    #[serde(default)]
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axes: Option<[[f64; 3]; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fa: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlyphFile {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Level-set constant the radii were computed with.
    pub c: f64,
    pub glyphs: Vec<GlyphRecord>,
}

/// A level-set constant that sizes the mean glyph to roughly half a voxel:
/// c = (0.45·min spacing)² / mean largest eigenvalue over SPD voxels.
pub fn auto_glyph_scale(grid: &TensorGrid) -> f64 {
    let r = 0.45 * grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut count = 0usize;
    for linear in grid.valid_indices() {
        if SpdTensor3::try_new(*grid.tensor(linear)).is_ok() {
            sum += eig(grid.tensor(linear)).expect("finite tensor").eigenvalues[0];
            count += 1;
        }
    }
    if count == 0 || sum <= 0.0 {
        return 1.0;
    }
    r * r / (sum / count as f64)
}

fn glyph_records(grid: &TensorGrid, c: f64) -> Result<Vec<GlyphRecord>> {
    let mut records = Vec::new();
    for linear in grid.valid_indices() {
        let center = grid.site_coordinates_linear(linear)?;
        match SpdTensor3::try_new(*grid.tensor(linear)) {
            Ok(spd) => {
                let g = ellipsoid_glyph(&spd, c)?;
                records.push(GlyphRecord {
                    site: linear,
                    center,
                    flagged: false,
                    radii: Some(g.radii),
                    axes: Some(g.axes),
                    fa: Some(fractional_anisotropy(&spd)),
                });
            }
            Err(_) => records.push(GlyphRecord {
                site: linear,
                center,
                flagged: true,
                radii: None,
                axes: None,
                fa: None,
            }),
        }
    }
    Ok(records)
}

pub fn export_glyph_json(grid: &TensorGrid, c: f64, path: &Path) -> Result<()> {
    let file = GlyphFile {
        version: GLYPH_VERSION,
        dims: grid.dims(),
        spacing: grid.spacing(),
        c,
        glyphs: glyph_records(grid, c)?,
    };
    let w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(w, &file)
        .map_err(|e| Error::Validation(format!("glyph serialization failed: {e}")))?;
    Ok(())
}

/// Reads a glyph file back, checking the schema invariants: supported
/// version and geometry present exactly on unflagged records.
pub fn read_glyph_json(path: &Path) -> Result<GlyphFile> {
    let r = BufReader::new(fs::File::open(path)?);
    let file: GlyphFile = serde_json::from_reader(r).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: Some(e.line()).filter(|&l| l > 0),
        msg: e.to_string(),
    })?;
    if file.version != GLYPH_VERSION {
        return Err(Error::Validation(format!(
            "unsupported glyph file version {} (expected {GLYPH_VERSION})",
            file.version
        )));
    }
    for g in &file.glyphs {
        let has_geometry = g.radii.is_some() && g.axes.is_some() && g.fa.is_some();
        if g.flagged == has_geometry {
            return Err(Error::Validation(format!(
                "glyph at site {} violates the schema: flagged={} but geometry present={}",
                g.site, g.flagged, has_geometry
            )));
        }
        if let Some(r) = g.radii {
            if !(r[0] >= r[1] && r[1] >= r[2] && r[2] > 0.0) {
                return Err(Error::Validation(format!(
                    "glyph at site {} has non-descending or non-positive radii {r:?}",
                    g.site
                )));
            }
        }
    }
    Ok(file)
}

fn fa_color(fa: f64) -> String {
    // Blue (isotropic) to red (anisotropic).
    let t = fa.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(30.0, 220.0), lerp(80.0, 40.0), lerp(200.0, 30.0))
}

/// In-plane ellipse of a tensor: semi-axes √(c·μᵢ) and orientation of the
/// 2×2 xy block [dxx dxy; dxy dyy].
fn plane_ellipse(t: &gwp_dti_core::spd::SymTensor3, c: f64) -> (f64, f64, f64) {
    let [dxx, dyy, _, dxy, _, _] = t.components();
    let half_trace = 0.5 * (dxx + dyy);
    let delta = (0.25 * (dxx - dyy).powi(2) + dxy * dxy).sqrt();
    let mu1 = (half_trace + delta).max(0.0);
    let mu2 = (half_trace - delta).max(0.0);
    let angle = 0.5 * (2.0 * dxy).atan2(dxx - dyy);
    ((c * mu1).sqrt(), (c * mu2).sqrt(), angle.to_degrees())
}

/// Renders the z = `slice` plane as an SVG of FA-colored ellipses; flagged
/// (non-SPD) voxels become gray crosses.
pub fn export_svg_slice(grid: &TensorGrid, c: f64, slice: usize, path: &Path) -> Result<()> {
    let [nx, ny, nz] = grid.dims();
    if slice >= nz {
        return Err(Error::Usage(format!(
            "slice index {slice} out of range for {nz} z planes"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "glyph constant must be positive and finite, got {c}"
        )));
    }
    let [sx, sy, _] = grid.spacing();
    let (w, h) = ((nx - 1) as f64 * sx, (ny - 1) as f64 * sy);
    let margin = 0.75 * sx.max(sy);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.5} {:.5} {:.5} {:.5}">"#,
        -margin,
        -margin,
        w + 2.0 * margin,
        h + 2.0 * margin
    )
    .expect("writing to String cannot fail");
    writeln!(svg, r#"<rect x="{:.5}" y="{:.5}" width="{:.5}" height="{:.5}" fill="white"/>"#,
        -margin, -margin, w + 2.0 * margin, h + 2.0 * margin).expect("writing to String cannot fail");

    for iy in 0..ny {
        for ix in 0..nx {
            let linear = grid.linear_index([ix, iy, slice])?;
            if !grid.is_valid(linear) {
                continue;
            }
            let cx = ix as f64 * sx;
            // SVG y grows downward; flip so the grid renders with y up.
            let cy = h - iy as f64 * sy;
            match SpdTensor3::try_new(*grid.tensor(linear)) {
                Ok(spd) => {
                    let (rx, ry, deg) = plane_ellipse(spd.sym(), c);
                    let fa = fractional_anisotropy(&spd);
                    writeln!(
                        svg,
                        r#"<ellipse cx="0" cy="0" rx="{rx:.5}" ry="{ry:.5}" transform="translate({cx:.5} {cy:.5}) rotate({:.5})" fill="{}" fill-opacity="0.85"/>"#,
                        -deg,
                        fa_color(fa)
                    )
                    .expect("writing to String cannot fail");
                }
                Err(_) => {
                    let r = 0.3 * sx.min(sy);
                    writeln!(
                        svg,
                        r##"<path d="M {:.5} {:.5} L {:.5} {:.5} M {:.5} {:.5} L {:.5} {:.5}" stroke="#888888" stroke-width="{:.5}"/>"##,
                        cx - r, cy - r, cx + r, cy + r, cx - r, cy + r, cx + r, cy - r,
                        0.25 * r
                    )
                    .expect("writing to String cannot fail");
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

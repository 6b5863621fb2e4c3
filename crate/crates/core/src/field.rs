//! Tensor field grids, coordinate mapping, the downsample-by-two validation
//! split, and field file I/O.
//!
//! Grids are regular with row-major, x-fastest storage. Site coordinates are
//! `index · spacing` with the origin at index (0,0,0); 2D fields are grids
//! with `nz = 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SymTensor3;

pub const FIELD_ORDER: &str = "row-major-x-fastest";
pub const FIELD_UNITS: &str = "mm^2/s";

/// A regular 2D/3D grid of symmetric tensors with optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    tensors: Vec<SymTensor3>,
    mask: Option<Vec<bool>>,
}

impl TensorGrid {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        tensors: Vec<SymTensor3>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "grid dims must all be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!(
                "grid spacing must be strictly positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if tensors.len() != n {
            return Err(Error::Validation(format!(
                "tensor count {} does not match dims {:?} (expected {})",
                tensors.len(),
                dims,
                n
            )));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::Validation(format!(
                    "mask length {} does not match site count {}",
                    m.len(),
                    n
                )));
            }
        }
        if let Some(bad) = tensors.iter().position(|t| !t.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor at site {bad} has non-finite components"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            tensors,
            mask,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[SymTensor3] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [SymTensor3] {
        &mut self.tensors
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn tensor(&self, linear: usize) -> &SymTensor3 {
        &self.tensors[linear]
    }

    /// A site is valid when there is no mask or its mask entry is set.
    pub fn is_valid(&self, linear: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[linear])
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_valid(i)).collect()
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> Result<usize> {
        let [nx, ny, nz] = self.dims;
        let [ix, iy, iz] = idx;
        if ix >= nx || iy >= ny || iz >= nz {
            return Err(Error::Validation(format!(
                "site index {idx:?} out of range for dims {:?}",
                self.dims
            )));
        }
        Ok(ix + nx * (iy + ny * iz))
    }

    pub fn grid_index(&self, linear: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        let ix = linear % nx;
        let iy = (linear / nx) % ny;
        let iz = linear / (nx * ny);
        [ix, iy, iz]
    }

    /// Physical coordinates of a site: `index · spacing`, origin at zero.
    pub fn site_coordinates(&self, idx: [usize; 3]) -> Result<[f64; 3]> {
        self.linear_index(idx)?;
        Ok([
            idx[0] as f64 * self.spacing[0],
            idx[1] as f64 * self.spacing[1],
            idx[2] as f64 * self.spacing[2],
        ])
    }

    pub fn site_coordinates_linear(&self, linear: usize) -> Result<[f64; 3]> {
        if linear >= self.len() {
            return Err(Error::Validation(format!(
                "linear site index {linear} out of range ({} sites)",
                self.len()
            )));
        }
        self.site_coordinates(self.grid_index(linear))
    }

    /// Coordinates and tensors of every valid site, in linear-index order.
    /// This is the canonical (site, tensor) pairing that fitting and
    /// prediction must agree on.
    pub fn active_sites(&self) -> Result<(Vec<[f64; 3]>, Vec<SymTensor3>)> {
        let mut sites = Vec::new();
        let mut tensors = Vec::new();
        for linear in self.valid_indices() {
            sites.push(self.site_coordinates_linear(linear)?);
            tensors.push(self.tensors[linear]);
        }
        Ok((sites, tensors))
    }
}

/// Partition of a grid's valid sites into kept (training) and held-out
/// (evaluation) sets, both as linear indices into the original grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub kept: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Downsamples a grid by a factor of two, keeping the even-index lattice.
///
/// Returns the low-resolution grid (dims ⌈n/2⌉ per axis, doubled spacing) and
/// the split of the original grid's valid sites. Kept tensors are
/// value-identical to the originals, and kept sites keep their physical
/// coordinates because the spacing doubling compensates the index halving.
pub fn downsample_by_two(grid: &TensorGrid) -> Result<(TensorGrid, HoldoutSplit)> {
    let [nx, ny, nz] = grid.dims();
    let low_dims = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let [sx, sy, sz] = grid.spacing();
    let low_spacing = [sx * 2.0, sy * 2.0, sz * 2.0];

    let mut low_tensors = Vec::with_capacity(low_dims[0] * low_dims[1] * low_dims[2]);
    let mut low_mask = grid.mask().map(|_| Vec::new());
    for iz in 0..low_dims[2] {
        for iy in 0..low_dims[1] {
            for ix in 0..low_dims[0] {
                let src = grid.linear_index([2 * ix, 2 * iy, 2 * iz])?;
                low_tensors.push(*grid.tensor(src));
                if let Some(m) = &mut low_mask {
                    m.push(grid.is_valid(src));
                }
            }
        }
    }

    let mut kept = Vec::new();
    let mut held_out = Vec::new();
    for linear in 0..grid.len() {
        if !grid.is_valid(linear) {
            continue;
        }
        let [ix, iy, iz] = grid.grid_index(linear);
        if ix % 2 == 0 && iy % 2 == 0 && iz % 2 == 0 {
            kept.push(linear);
        } else {
            held_out.push(linear);
        }
    }
    if held_out.is_empty() {
        return Err(Error::Validation(
            "downsample_by_two: grid has no sites to hold out (degenerate dims or mask)".into(),
        ));
    }

    let low = TensorGrid::new(low_dims, low_spacing, low_tensors, low_mask)?;
    Ok((low, HoldoutSplit { kept, held_out }))
}

#[derive(Serialize, Deserialize)]
struct FieldFile {
    version: u32,
    dims: [usize; 3],
    spacing: [f64; 3],
    order: String,
    units: String,
    tensors: Vec<SymTensor3>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

/// Serializes a grid in the versioned field file format.
pub fn write_field_to(grid: &TensorGrid, w: impl Write) -> Result<()> {
    let file = FieldFile {
        version: 1,
        dims: grid.dims(),
        spacing: grid.spacing(),
        order: FIELD_ORDER.to_string(),
        units: FIELD_UNITS.to_string(),
        tensors: grid.tensors().to_vec(),
        mask: grid
            .mask()
            .map(|m| m.iter().map(|&b| u8::from(b)).collect()),
    };
    serde_json::to_writer(w, &file)
        .map_err(|e| Error::Validation(format!("field serialization failed: {e}")))
}

pub fn write_field(grid: &TensorGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_field_to(grid, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a field file, reporting the line/column on parse errors.
pub fn read_field_from(r: impl Read, origin: &str) -> Result<TensorGrid> {
    let file: FieldFile = serde_json::from_reader(r).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(Error::Validation(format!(
            "unsupported field file version {} (expected 1)",
            file.version
        )));
    }
    if file.order != FIELD_ORDER {
        return Err(Error::Validation(format!(
            "unsupported tensor order {:?} (expected {:?})",
            file.order, FIELD_ORDER
        )));
    }
    let mask = match file.mask {
        None => None,
        Some(raw) => {
            if let Some(bad) = raw.iter().find(|&&v| v > 1) {
                return Err(Error::Validation(format!(
                    "mask entries must be 0 or 1, got {bad}"
                )));
            }
            Some(raw.into_iter().map(|v| v == 1).collect())
        }
    };
    TensorGrid::new(file.dims, file.spacing, file.tensors, mask)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<TensorGrid> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path)?);
    read_field_from(r, &path.display().to_string())
}

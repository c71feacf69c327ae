//! Core raster types, the PVOL on-disk format, dataset manifests and run
//! configuration.

mod config;
mod manifest;
mod pvol;

pub use config::{parse_config, ClusterLossNorm, ClusterSource, GcnNorm, KdeSource, OptimizerKind, RegionNorm, RunConfig};
pub use manifest::{load_manifest, write_manifest, DatasetSplit, Sample, Role};
pub use pvol::{load_tensor, load_volume, save_label_map, save_tensor, save_volume, Raster, PVOL_HEADER_LEN};

use crate::error::{Error, Result};

/// Spatial extents of a raster in row-major order (last axis fastest).
///
/// Rank-2 rasters are `[rows, cols]`, rank-3 rasters `[depth, rows, cols]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    rank: usize,
    ext: [usize; 3],
}

impl Dims {
    pub fn new2(rows: usize, cols: usize) -> Result<Self> {
        Self::from_slice(&[rows, cols])
    }

    pub fn new3(depth: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::from_slice(&[depth, rows, cols])
    }

    pub fn from_slice(extents: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) {
            return Err(Error::Validation(format!(
                "rank must be 2 or 3, got {}",
                extents.len()
            )));
        }
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Validation(format!(
                "all extents must be >= 1, got {extents:?}"
            )));
        }
        let mut ext = [1usize; 3];
        ext[..extents.len()].copy_from_slice(extents);
        Ok(Dims {
            rank: extents.len(),
            ext,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn extents(&self) -> &[usize] {
        &self.ext[..self.rank]
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Extents as `[depth, rows, cols]`, with depth 1 for rank-2 rasters.
    pub fn dhw(&self) -> [usize; 3] {
        if self.rank == 2 {
            [1, self.ext[0], self.ext[1]]
        } else {
            self.ext
        }
    }

    /// Raw header triple (unused trailing dims = 1).
    pub(crate) fn header_triple(&self) -> [usize; 3] {
        self.ext
    }
}

/// Physical voxel size per axis, aligned with [`Dims::extents`].
pub type Spacing = [f32; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

/// Single-channel image intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Validation(format!(
                "volume data has {} elements, dims {:?} require {}",
                data.len(),
                dims.extents(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite intensity {} at index {i}",
                data[i]
            )));
        }
        validate_spacing(&spacing)?;
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            spacing: UNIT_SPACING,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Intensities widened to `f64` for the network.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Integer class map with values in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if !(1..=256).contains(&num_classes) {
            return Err(Error::Validation(format!(
                "num_classes must be in 1..=256, got {num_classes}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::Validation(format!(
                "label data has {} elements, dims {:?} require {}",
                data.len(),
                dims.extents(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "label value {} at index {i} outside 0..={}",
                data[i],
                num_classes - 1
            )));
        }
        validate_spacing(&spacing)?;
        Ok(LabelMap {
            dims,
            spacing,
            data,
            num_classes,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Re-declares the class count, validating every value against it.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        LabelMap::new(self.dims, self.spacing, self.data, num_classes)
    }

    /// Binary raster of voxels equal to `class`.
    pub fn binarize(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

/// Binary copy-paste mask over `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Validation(format!(
                "mask data has {} elements, dims require {}",
                data.len(),
                dims.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Mask { dims, data })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        Mask {
            dims,
            data: vec![value as u8; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// The complementary mask `1 - S`.
    pub fn complement(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v == 1).collect()
    }
}

fn validate_spacing(spacing: &Spacing) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    Ok(())
}

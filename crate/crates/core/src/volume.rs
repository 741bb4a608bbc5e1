//! In-memory volume and label-map carriers.
//!
//! Voxels are stored densely in X-fastest order: linear index
//! `x + nx * (y + ny * z)`. Intensities are kept as `f64` regardless of the
//! on-disk datatype so the whole pipeline shares one numeric path.

use crate::error::{Error, Result};

/// Dense 3-D scalar grid with voxel spacing (mm) and world origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    voxels: Vec<f64>,
}

/// Dense 3-D small-integer label grid sharing `Volume`'s geometry fields.
/// Background is label 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    labels: Vec<u8>,
}

fn check_geometry(shape: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n == 0 || len != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            got: vec![len],
        });
    }
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "voxel spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        voxels: Vec<f64>,
    ) -> Result<Self> {
        check_geometry(shape, spacing, voxels.len())?;
        Ok(Self {
            shape,
            spacing,
            origin,
            voxels,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            spacing,
            origin,
            voxels: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    pub(crate) fn set_origin(&mut self, origin: [f64; 3]) {
        self.origin = origin;
    }
}

impl LabelMap {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        labels: Vec<u8>,
    ) -> Result<Self> {
        check_geometry(shape, spacing, labels.len())?;
        Ok(Self {
            shape,
            spacing,
            origin,
            labels,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            spacing,
            origin,
            labels: vec![0; n],
        }
    }

    /// Convert a volume whose voxels are (near-)integers into a label map.
    /// Fails if any voxel deviates from an integer in 0..=255 by more than 1e-6.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let mut labels = Vec::with_capacity(v.len());
        for &x in v.voxels() {
            let r = x.round();
            if (x - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "voxel value {x} is not a small integer label"
                )));
            }
            labels.push(r as u8);
        }
        Self::new(v.shape(), v.spacing(), v.origin(), labels)
    }

    /// View the labels as a float volume (for integer-datatype file output).
    pub fn to_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
            voxels: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, l: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = l;
    }

    pub(crate) fn set_origin(&mut self, origin: [f64; 3]) {
        self.origin = origin;
    }

    /// Number of voxels carrying the given label.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

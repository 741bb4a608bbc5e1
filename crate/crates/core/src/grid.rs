//! Geometric operations on volumes and label maps: crop, paste, pad.
//!
//! Crops are total functions: out-of-bounds reads produce the caller's fill
//! value, so region boxes near a volume edge never fail. Pastes silently drop
//! the portion of the box that falls outside the destination.

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};
use serde::{Deserialize, Serialize};

/// Axis-aligned voxel box: inclusive start (may be negative) plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub start: [i64; 3],
    pub shape: [usize; 3],
}

impl BoxRegion {
    pub fn new(start: [i64; 3], shape: [usize; 3]) -> Self {
        assert!(shape.iter().all(|&s| s >= 1), "box extents must be >= 1");
        Self { start, shape }
    }

    /// Box covering the whole of `shape` starting at the origin.
    pub fn full(shape: [usize; 3]) -> Self {
        Self::new([0, 0, 0], shape)
    }

    pub fn num_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Exclusive end coordinates.
    pub fn end(&self) -> [i64; 3] {
        [
            self.start[0] + self.shape[0] as i64,
            self.start[1] + self.shape[1] as i64,
            self.start[2] + self.shape[2] as i64,
        ]
    }

    /// True if the box lies entirely inside a grid of the given shape.
    pub fn within(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] >= 0 && self.end()[a] <= shape[a] as i64)
    }
}

fn crop_raw<T: Copy>(src: &[T], src_shape: [usize; 3], b: &BoxRegion, fill: T) -> Vec<T> {
    let [nx, ny, nz] = src_shape;
    let [ox, oy, oz] = b.shape;
    let mut out = vec![fill; b.num_voxels()];
    // Per output row (fixed y,z), copy the in-bounds X segment in one slice op.
    let sx0 = b.start[0];
    let x_lo = sx0.max(0).min(nx as i64) as usize; // first in-bounds source x
    let x_hi = (sx0 + ox as i64).max(0).min(nx as i64) as usize;
    if x_lo >= x_hi {
        return out;
    }
    let dst_x0 = (x_lo as i64 - sx0) as usize;
    let seg = x_hi - x_lo;
    for z in 0..oz {
        let sz = b.start[2] + z as i64;
        if sz < 0 || sz >= nz as i64 {
            continue;
        }
        for y in 0..oy {
            let sy = b.start[1] + y as i64;
            if sy < 0 || sy >= ny as i64 {
                continue;
            }
            let src_base = x_lo + nx * (sy as usize + ny * sz as usize);
            let dst_base = dst_x0 + ox * (y + oy * z);
            out[dst_base..dst_base + seg].copy_from_slice(&src[src_base..src_base + seg]);
        }
    }
    out
}

fn paste_raw<T: Copy>(dst: &mut [T], dst_shape: [usize; 3], src: &[T], b: &BoxRegion) {
    let [nx, ny, nz] = dst_shape;
    let [ox, oy, oz] = b.shape;
    let sx0 = b.start[0];
    let x_lo = sx0.max(0).min(nx as i64) as usize;
    let x_hi = (sx0 + ox as i64).max(0).min(nx as i64) as usize;
    if x_lo >= x_hi {
        return;
    }
    let src_x0 = (x_lo as i64 - sx0) as usize;
    let seg = x_hi - x_lo;
    for z in 0..oz {
        let dz = b.start[2] + z as i64;
        if dz < 0 || dz >= nz as i64 {
            continue;
        }
        for y in 0..oy {
            let dy = b.start[1] + y as i64;
            if dy < 0 || dy >= ny as i64 {
                continue;
            }
            let dst_base = x_lo + nx * (dy as usize + ny * dz as usize);
            let src_base = src_x0 + ox * (y + oy * z);
            dst[dst_base..dst_base + seg].copy_from_slice(&src[src_base..src_base + seg]);
        }
    }
}

fn shifted_origin(origin: [f64; 3], spacing: [f64; 3], start: [i64; 3]) -> [f64; 3] {
    [
        origin[0] + start[0] as f64 * spacing[0],
        origin[1] + start[1] as f64 * spacing[1],
        origin[2] + start[2] as f64 * spacing[2],
    ]
}

/// Placement of a centered pad: floor bias toward low indices.
fn centered_placement(shape: [usize; 3], target: [usize; 3]) -> Result<BoxRegion> {
    for a in 0..3 {
        if target[a] < shape[a] {
            return Err(Error::ShrinkRequested { shape, target });
        }
    }
    let start = [
        ((target[0] - shape[0]) / 2) as i64,
        ((target[1] - shape[1]) / 2) as i64,
        ((target[2] - shape[2]) / 2) as i64,
    ];
    Ok(BoxRegion::new(start, shape))
}

impl Volume {
    /// Extract `b` from the volume; out-of-bounds voxels read as `fill`.
    pub fn crop(&self, b: &BoxRegion, fill: f64) -> Volume {
        let voxels = crop_raw(self.voxels(), self.shape(), b, fill);
        let mut out = Volume::new(b.shape, self.spacing(), self.origin(), voxels)
            .expect("crop shape is valid");
        out.set_origin(shifted_origin(self.origin(), self.spacing(), b.start));
        out
    }

    /// Overwrite the voxels of `b` with `src`; the part of `b` outside the
    /// destination is dropped.
    pub fn paste(&mut self, src: &Volume, b: &BoxRegion) -> Result<()> {
        if src.shape() != b.shape {
            return Err(Error::ShapeMismatch {
                expected: b.shape.to_vec(),
                got: src.shape().to_vec(),
            });
        }
        let shape = self.shape();
        paste_raw(self.voxels_mut(), shape, src.voxels(), b);
        Ok(())
    }

    /// Center the volume in a fill-valued grid of `target` shape.
    /// Returns the padded volume and the placement box needed to un-pad.
    pub fn pad_to(&self, target: [usize; 3], fill: f64) -> Result<(Volume, BoxRegion)> {
        let placement = centered_placement(self.shape(), target)?;
        let mut out = Volume::new(
            target,
            self.spacing(),
            shifted_origin(self.origin(), self.spacing(), [
                -placement.start[0],
                -placement.start[1],
                -placement.start[2],
            ]),
            vec![fill; target.iter().product()],
        )
        .expect("pad shape is valid");
        out.paste(self, &placement)?;
        Ok((out, placement))
    }
}

impl LabelMap {
    pub fn crop(&self, b: &BoxRegion, fill: u8) -> LabelMap {
        let labels = crop_raw(self.labels(), self.shape(), b, fill);
        let mut out = LabelMap::new(b.shape, self.spacing(), self.origin(), labels)
            .expect("crop shape is valid");
        out.set_origin(shifted_origin(self.origin(), self.spacing(), b.start));
        out
    }

    pub fn paste(&mut self, src: &LabelMap, b: &BoxRegion) -> Result<()> {
        if src.shape() != b.shape {
            return Err(Error::ShapeMismatch {
                expected: b.shape.to_vec(),
                got: src.shape().to_vec(),
            });
        }
        let shape = self.shape();
        paste_raw(self.labels_mut(), shape, src.labels(), b);
        Ok(())
    }

    pub fn pad_to(&self, target: [usize; 3], fill: u8) -> Result<(LabelMap, BoxRegion)> {
        let placement = centered_placement(self.shape(), target)?;
        let mut out = LabelMap::new(
            target,
            self.spacing(),
            shifted_origin(self.origin(), self.spacing(), [
                -placement.start[0],
                -placement.start[1],
                -placement.start[2],
            ]),
            vec![fill; target.iter().product()],
        )
        .expect("pad shape is valid");
        out.paste(self, &placement)?;
        Ok((out, placement))
    }
}

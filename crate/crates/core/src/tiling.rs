//! Patch-based baseline machinery: plan overlapping patch grids, extract
//! patches, and stitch per-patch class probabilities back together.
//!
//! Volumes whose extent is not stride-compatible are centered in a minimally
//! padded grid first, so the boxes always tile the padded shape exactly.
//! Overlapping predictions are recombined by arithmetic mean, which preserves
//! per-voxel normalization.

use crate::error::{Error, Result};
use crate::grid::BoxRegion;
use crate::tensor::Tensor;
use crate::volume::Volume;

/// A tiling of a (possibly padded) volume into overlapping patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub patch_shape: [usize; 3],
    pub stride: [usize; 3],
    /// Patch boxes in the padded frame, ordered lexicographically by
    /// (z, y, x) start.
    pub boxes: Vec<BoxRegion>,
    pub padded_shape: [usize; 3],
    /// Where the original volume sits inside the padded frame.
    pub placement: BoxRegion,
    /// Shape the plan was built for.
    pub input_shape: [usize; 3],
}

/// Plan a patch grid over `shape`. Per axis the padded extent is the smallest
/// value `>= shape` with `(padded - patch) % stride == 0`, and the patch count
/// is `(padded - patch) / stride + 1`.
pub fn plan_patches(
    shape: [usize; 3],
    patch_shape: [usize; 3],
    stride: [usize; 3],
) -> Result<PatchPlan> {
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig("stride components must be >= 1".into()));
    }
    if patch_shape.iter().any(|&p| p == 0) || shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig("shapes must be positive".into()));
    }
    // Strides beyond the patch extent would leave voxels uncovered, breaking
    // the full-coverage invariant the stitcher relies on.
    if (0..3).any(|a| stride[a] > patch_shape[a]) {
        return Err(Error::InvalidConfig(format!(
            "stride {stride:?} exceeds patch shape {patch_shape:?}"
        )));
    }
    let mut padded = [0usize; 3];
    let mut counts = [0usize; 3];
    for a in 0..3 {
        if shape[a] <= patch_shape[a] {
            padded[a] = patch_shape[a];
            counts[a] = 1;
        } else {
            let over = shape[a] - patch_shape[a];
            let steps = over.div_ceil(stride[a]);
            padded[a] = patch_shape[a] + steps * stride[a];
            counts[a] = steps + 1;
        }
    }
    let mut boxes = Vec::with_capacity(counts.iter().product());
    for zi in 0..counts[2] {
        for yi in 0..counts[1] {
            for xi in 0..counts[0] {
                boxes.push(BoxRegion::new(
                    [
                        (xi * stride[0]) as i64,
                        (yi * stride[1]) as i64,
                        (zi * stride[2]) as i64,
                    ],
                    patch_shape,
                ));
            }
        }
    }
    // Placement of the original volume: centered with floor bias, matching
    // Volume::pad_to.
    let placement = BoxRegion::new(
        [
            ((padded[0] - shape[0]) / 2) as i64,
            ((padded[1] - shape[1]) / 2) as i64,
            ((padded[2] - shape[2]) / 2) as i64,
        ],
        shape,
    );
    Ok(PatchPlan {
        patch_shape,
        stride,
        boxes,
        padded_shape: padded,
        placement,
        input_shape: shape,
    })
}

impl PatchPlan {
    pub fn num_patches(&self) -> usize {
        self.boxes.len()
    }

    /// Total voxels processed when every patch is inferred once.
    pub fn voxels_processed(&self) -> usize {
        self.num_patches() * self.patch_shape.iter().product::<usize>()
    }

    /// How many patches cover each voxel of the padded frame.
    pub fn coverage(&self) -> Vec<u32> {
        let [nx, ny, nz] = self.padded_shape;
        let mut cov = vec![0u32; nx * ny * nz];
        for b in &self.boxes {
            for z in 0..b.shape[2] {
                for y in 0..b.shape[1] {
                    let base = (b.start[0] as usize)
                        + nx * ((b.start[1] as usize + y) + ny * (b.start[2] as usize + z));
                    for c in &mut cov[base..base + b.shape[0]] {
                        *c += 1;
                    }
                }
            }
        }
        cov
    }
}

/// Extract every planned patch from `v` (padding with `fill` first).
pub fn extract(v: &Volume, plan: &PatchPlan, fill: f64) -> Result<Vec<Volume>> {
    if v.shape() != plan.input_shape {
        return Err(Error::PlanMismatch(format!(
            "plan built for {:?}, volume is {:?}",
            plan.input_shape,
            v.shape()
        )));
    }
    let (padded, _) = v.pad_to(plan.padded_shape, fill)?;
    Ok(plan.boxes.iter().map(|b| padded.crop(b, fill)).collect())
}

/// Average per-class probability patches back into a full-size field.
///
/// `prob_patches[i]` must be shaped `[num_classes, px, py, pz]` and align
/// with `plan.boxes[i]`. The result is `[num_classes, X, Y, Z]` over the
/// original (un-padded) shape; every voxel is covered by at least one patch,
/// so the mean is always defined.
pub fn stitch(
    prob_patches: &[Tensor],
    plan: &PatchPlan,
    num_classes: usize,
) -> Result<Tensor> {
    if prob_patches.len() != plan.boxes.len() {
        return Err(Error::PlanMismatch(format!(
            "{} patches supplied for {} boxes",
            prob_patches.len(),
            plan.boxes.len()
        )));
    }
    let [px, py, pz] = plan.patch_shape;
    let expected = vec![num_classes, px, py, pz];
    for p in prob_patches {
        if p.shape() != expected.as_slice() {
            return Err(Error::PlanMismatch(format!(
                "patch shaped {:?}, expected {:?}",
                p.shape(),
                expected
            )));
        }
        if p.data().iter().any(|&v| v < 0.0) {
            return Err(Error::PlanMismatch(
                "negative probability in patch".into(),
            ));
        }
    }

    let [nx, ny, nz] = plan.padded_shape;
    let pvox = nx * ny * nz;
    let mut acc = vec![0.0; num_classes * pvox];
    let mut cov = vec![0u32; pvox];
    // Padded-frame layout here is x-fastest to match Volume.
    for (patch, b) in prob_patches.iter().zip(&plan.boxes) {
        let data = patch.data();
        let (sx, sy, sz) = (b.start[0] as usize, b.start[1] as usize, b.start[2] as usize);
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let at = (sx + x) + nx * ((sy + y) + ny * (sz + z));
                    // Patch tensor layout is [c, x, y, z] row-major (z fastest).
                    for c in 0..num_classes {
                        acc[c * pvox + at] += data[((c * px + x) * py + y) * pz + z];
                    }
                }
            }
        }
        // Coverage counts once per voxel, not per class.
        for z in 0..pz {
            for y in 0..py {
                let base = sx + nx * ((sy + y) + ny * (sz + z));
                for c in &mut cov[base..base + px] {
                    *c += 1;
                }
            }
        }
    }
    for c in 0..num_classes {
        for (v, &n) in acc[c * pvox..(c + 1) * pvox].iter_mut().zip(&cov) {
            debug_assert!(n >= 1, "tiling invariant: full coverage");
            *v /= n as f64;
        }
    }

    // Un-pad back to the original shape, keeping the [c, x, y, z] layout.
    let [ox, oy, oz] = plan.input_shape;
    let p = &plan.placement;
    let mut out = vec![0.0; num_classes * ox * oy * oz];
    for c in 0..num_classes {
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    let at = (x + p.start[0] as usize)
                        + nx * ((y + p.start[1] as usize) + ny * (z + p.start[2] as usize));
                    out[((c * ox + x) * oy + y) * oz + z] = acc[c * pvox + at];
                }
            }
        }
    }
    Tensor::new(vec![num_classes, ox, oy, oz], out)
}

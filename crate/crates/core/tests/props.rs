//! Property tests for the file format and grid invariants.

#[allow(dead_code)]
mod common;

use common::{byte_swapped, le_header};
use proptest::prelude::*;
use regionseg::grid::BoxRegion;
use regionseg::nifti::{parse_header, read_volume, write_volume, Datatype};
use regionseg::tiling::plan_patches;
use regionseg::volume::Volume;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any float32-valued volume survives a write/read cycle bit-identically.
    #[test]
    fn nifti_round_trip_is_bit_exact(
        nx in 1usize..6,
        ny in 1usize..6,
        nz in 1usize..6,
        seed in any::<u32>(),
    ) {
        let n = nx * ny * nz;
        // f32-representable values with varied magnitudes.
        let voxels: Vec<f64> = (0..n)
            .map(|i| {
                let raw = (seed as f64 + i as f64 * 17.3).sin() * 1.0e3;
                raw as f32 as f64
            })
            .collect();
        let v = Volume::new([nx, ny, nz], [0.5, 1.0, 2.0], [1.0, -2.0, 3.0], voxels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.nii");
        write_volume(&v, Datatype::Float32, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.voxels(), v.voxels());
        prop_assert_eq!(back.shape(), v.shape());
        prop_assert_eq!(back.spacing(), v.spacing());
        prop_assert_eq!(back.origin(), v.origin());
    }

    /// A header and its byte-swapped twin decode to the same fields.
    #[test]
    fn endianness_is_transparent(
        nx in 1i16..300,
        ny in 1i16..300,
        nz in 1i16..300,
        pixdim in 0.1f32..5.0,
        slope in -3.0f32..3.0,
        inter in -10.0f32..10.0,
    ) {
        let le = le_header([nx, ny, nz], pixdim, slope, inter);
        let be = byte_swapped(&le);
        let a = parse_header(&le).unwrap();
        let b = parse_header(&be).unwrap();
        prop_assert!(b.big_endian);
        prop_assert_eq!(a.dim, b.dim);
        prop_assert_eq!(a.pixdim, b.pixdim);
        prop_assert_eq!(a.scl_slope, b.scl_slope);
        prop_assert_eq!(a.scl_inter, b.scl_inter);
        prop_assert_eq!(a.vox_offset, b.vox_offset);
    }

    /// Crop agrees with a direct triple-loop copy for arbitrary boxes,
    /// including out-of-bounds reads.
    #[test]
    fn crop_matches_direct_copy(
        nx in 1usize..10,
        ny in 1usize..10,
        nz in 1usize..10,
        sx in -4i64..10,
        sy in -4i64..10,
        sz in -4i64..10,
        ox in 1usize..8,
        oy in 1usize..8,
        oz in 1usize..8,
        fill in -5.0f64..5.0,
    ) {
        let n = nx * ny * nz;
        let v = Volume::new(
            [nx, ny, nz],
            [1.0; 3],
            [0.0; 3],
            (0..n).map(|i| i as f64).collect(),
        )
        .unwrap();
        let b = BoxRegion::new([sx, sy, sz], [ox, oy, oz]);
        let cropped = v.crop(&b, fill);
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let (gx, gy, gz) = (sx + x as i64, sy + y as i64, sz + z as i64);
                    let inside = gx >= 0
                        && gy >= 0
                        && gz >= 0
                        && gx < nx as i64
                        && gy < ny as i64
                        && gz < nz as i64;
                    let expect = if inside {
                        v.at(gx as usize, gy as usize, gz as usize)
                    } else {
                        fill
                    };
                    prop_assert_eq!(cropped.at(x, y, z), expect);
                }
            }
        }
    }

    /// The patch plan always tiles the padded shape exactly and covers the
    /// input shape; strides that would leave gaps are rejected.
    #[test]
    fn patch_plans_tile_exactly(
        nx in 1usize..40,
        ny in 1usize..40,
        nz in 1usize..40,
        px in 1usize..10,
        py in 1usize..10,
        pz in 1usize..10,
        sx in 1usize..10,
        sy in 1usize..10,
        sz in 1usize..10,
    ) {
        let result = plan_patches([nx, ny, nz], [px, py, pz], [sx, sy, sz]);
        if sx > px || sy > py || sz > pz {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let plan = result.unwrap();
        for a in 0..3 {
            prop_assert!(plan.padded_shape[a] >= [nx, ny, nz][a]);
            let span = plan.padded_shape[a] - plan.patch_shape[a];
            prop_assert_eq!(span % [sx, sy, sz][a], 0);
        }
        let last = plan.boxes.last().unwrap();
        for a in 0..3 {
            prop_assert_eq!(last.end()[a] as usize, plan.padded_shape[a]);
        }
        prop_assert!(plan.coverage().iter().all(|&c| c >= 1));
    }
}

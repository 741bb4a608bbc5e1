//! Deterministic synthetic brain phantoms: paired intensity volumes and
//! 12-structure label maps.
//!
//! A large "brain" ellipsoid carries three background tissue shells (CSF rim,
//! GM shell, WM core) so the fuzzy c-means normalization has realistic modes
//! to find; the twelve structures are smaller ellipsoids placed strictly
//! inside their designated region boxes, each with its own mean intensity.
//! Gaussian noise and a smooth multiplicative polynomial bias field emulate
//! scanner variation. Everything is a pure function of the `PhantomSpec` (seed
//! included), so datasets regenerate bit-identically.

use crate::error::{Error, Result};
use crate::regions::{RegionConfig, NUM_STRUCTURES};
use crate::volume::{LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub label: u8,
    /// Ellipsoid center as a fraction of the volume shape per axis.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub semi_axes: [f64; 3],
    pub mean_intensity: f64,
    pub noise_sigma: f64,
}

/// Intensity modes of the background tissue shells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTissue {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
    pub noise_sigma: f64,
}

/// Bounded random perturbation of structure geometry between samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    /// Maximum center displacement per axis, voxels.
    pub center_voxels: f64,
    /// Maximum relative change of each semi-axis.
    pub axes_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub structures: Vec<StructureSpec>,
    pub background: BackgroundTissue,
    /// Relative amplitude of the multiplicative bias field (0 disables it).
    pub bias_amplitude: f64,
    pub seed: u64,
    pub jitter: Option<JitterSpec>,
    /// Region layout the structures must respect.
    pub regions: RegionConfig,
}

/// Structure layout shared by all scales: center and semi-axes as fractions
/// of the frame, mean intensity. Placements keep every pair of ellipsoids
/// separated along at least one axis and leave enough margin that the default
/// jitter cannot push a structure out of its region box.
const LAYOUT: [(u8, [f64; 3], [f64; 3], f64); 12] = [
    // Brainstem group.
    (1, [0.5000000, 0.4765625, 0.3828125], [0.0781250, 0.0781250, 0.0468750], 640.0), // midbrain
    (2, [0.5000000, 0.4687500, 0.2734375], [0.0937500, 0.0859375, 0.0500000], 700.0), // pons
    (3, [0.5000000, 0.4843750, 0.1718750], [0.0703125, 0.0703125, 0.0437500], 670.0), // medulla
    (4, [0.5000000, 0.6015625, 0.3281250], [0.0500000, 0.0406250, 0.0406250], 745.0), // SCP
    // Ventricular group.
    (5, [0.3750000, 0.4687500, 0.6250000], [0.0625000, 0.1093750, 0.0781250], 160.0), // L lateral
    (6, [0.6250000, 0.4687500, 0.6250000], [0.0625000, 0.1093750, 0.0781250], 170.0), // R lateral
    (7, [0.5000000, 0.4375000, 0.5468750], [0.0390625, 0.0781250, 0.0625000], 150.0), // third
    (8, [0.5000000, 0.3359375, 0.4296875], [0.0468750, 0.0546875, 0.0468750], 185.0), // fourth
    // Striatal group.
    (9, [0.4218750, 0.5000000, 0.7812500], [0.0468750, 0.0703125, 0.0625000], 470.0), // L caudate
    (10, [0.5781250, 0.5000000, 0.7812500], [0.0468750, 0.0703125, 0.0625000], 490.0), // R caudate
    (11, [0.3906250, 0.3671875, 0.7656250], [0.0437500, 0.0546875, 0.0546875], 650.0), // L putamen
    (12, [0.6093750, 0.3671875, 0.7656250], [0.0437500, 0.0546875, 0.0546875], 670.0), // R putamen
];

impl PhantomSpec {
    fn from_layout(shape: [usize; 3], regions: RegionConfig, seed: u64) -> Self {
        let structures = LAYOUT
            .iter()
            .map(|&(label, center, axes_frac, mean)| StructureSpec {
                label,
                center,
                semi_axes: [
                    axes_frac[0] * shape[0] as f64,
                    axes_frac[1] * shape[1] as f64,
                    axes_frac[2] * shape[2] as f64,
                ],
                mean_intensity: mean,
                noise_sigma: 10.0,
            })
            .collect();
        Self {
            shape,
            spacing: [1.0; 3],
            structures,
            background: BackgroundTissue {
                csf: 180.0,
                gm: 560.0,
                wm: 800.0,
                noise_sigma: 12.0,
            },
            // Inputs to the pipeline are assumed inhomogeneity-corrected;
            // a mild residual field still exercises the normalization.
            bias_amplitude: 0.06,
            seed,
            jitter: Some(JitterSpec {
                center_voxels: 1.5,
                axes_fraction: 0.12,
            }),
            regions,
        }
    }

    /// 64^3 phantom matching the desk-scale region layout.
    pub fn desk_scale(seed: u64) -> Self {
        Self::from_layout([64, 64, 64], RegionConfig::desk_scale(), seed)
    }

    /// Full 240x285x240 frame with the full-size region boxes.
    pub fn full_scale(seed: u64) -> Self {
        Self::from_layout([240, 285, 240], RegionConfig::full_scale(), seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.regions.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct PlacedStructure {
    label: u8,
    center: [f64; 3],
    axes: [f64; 3],
    mean: f64,
    sigma: f64,
}

/// Generate the paired intensity volume and label map.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    let (v, l, _) = generate_with_mask(spec)?;
    Ok((v, l))
}

/// Like [`generate`], additionally returning the brain mask (1 inside the
/// brain ellipsoid).
pub fn generate_with_mask(spec: &PhantomSpec) -> Result<(Volume, LabelMap, LabelMap)> {
    if spec.structures.len() != NUM_STRUCTURES {
        return Err(Error::InvalidConfig(format!(
            "phantom needs all {NUM_STRUCTURES} structures, got {}",
            spec.structures.len()
        )));
    }
    spec.regions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.shape;

    // 1. Place structures (jitter first so containment checks see the final
    // geometry).
    let mut placed = Vec::with_capacity(spec.structures.len());
    for s in &spec.structures {
        let mut center = [
            s.center[0] * nx as f64,
            s.center[1] * ny as f64,
            s.center[2] * nz as f64,
        ];
        let mut axes = s.semi_axes;
        if let Some(j) = spec.jitter {
            for c in &mut center {
                *c += rng.random_range(-j.center_voxels..=j.center_voxels);
            }
            for a in &mut axes {
                *a *= 1.0 + rng.random_range(-j.axes_fraction..=j.axes_fraction);
            }
        }
        placed.push(PlacedStructure {
            label: s.label,
            center,
            axes,
            mean: s.mean_intensity,
            sigma: s.noise_sigma,
        });
    }

    // 2. Containment: each structure strictly inside its region's box.
    for p in &placed {
        let region = spec
            .regions
            .regions
            .iter()
            .find(|r| r.global_labels.contains(&p.label))
            .ok_or_else(|| {
                Error::InvalidConfig(format!("label {} not owned by any region", p.label))
            })?;
        let b = &region.crop;
        for a in 0..3 {
            let lo = p.center[a] - p.axes[a];
            let hi = p.center[a] + p.axes[a];
            if lo <= b.start[a] as f64 || hi >= b.end()[a] as f64 {
                return Err(Error::StructureOutsideRegion(
                    crate::regions::structure_name(p.label)
                        .unwrap_or("structure")
                        .to_string(),
                ));
            }
        }
    }

    // 3. Rasterize labels; later structures overwrite earlier on overlap.
    let mut labels = LabelMap::zeros(spec.shape, spec.spacing, [0.0; 3]);
    for p in &placed {
        let lo = |a: usize| ((p.center[a] - p.axes[a]).floor().max(0.0)) as usize;
        let hi = |a: usize, n: usize| ((p.center[a] + p.axes[a]).ceil() as usize).min(n - 1);
        for z in lo(2)..=hi(2, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(0)..=hi(0, nx) {
                    let r = ellipsoid_radius([x, y, z], p.center, p.axes);
                    if r <= 1.0 {
                        labels.set(x, y, z, p.label);
                    }
                }
            }
        }
    }

    // 4. Bias field coefficients (drawn before the per-voxel stream).
    let coeffs: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let coeff_norm: f64 = coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1e-12);

    // 5. Intensities: tissue shells inside the brain ellipsoid, structure
    // means where labeled, noise and bias inside the brain, exact zero
    // outside (skull-stripped background).
    let brain_center = [nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0];
    let brain_axes = [
        0.46 * nx as f64,
        0.46 * ny as f64,
        0.46 * nz as f64,
    ];
    let mut volume = Volume::zeros(spec.shape, spec.spacing, [0.0; 3]);
    let mut mask = LabelMap::zeros(spec.shape, spec.spacing, [0.0; 3]);
    let unit_noise = Normal::new(0.0, 1.0).expect("valid parameters");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let rho = ellipsoid_radius([x, y, z], brain_center, brain_axes);
                if rho > 1.0 {
                    continue;
                }
                mask.set(x, y, z, 1);
                let label = labels.at(x, y, z);
                let (mean, sigma) = if label > 0 {
                    let p = placed.iter().find(|p| p.label == label).expect("placed");
                    (p.mean, p.sigma)
                } else if rho > 0.90 {
                    (spec.background.csf, spec.background.noise_sigma)
                } else if rho > 0.75 {
                    (spec.background.gm, spec.background.noise_sigma)
                } else {
                    (spec.background.wm, spec.background.noise_sigma)
                };
                let noise = if sigma > 0.0 {
                    sigma * unit_noise.sample(&mut rng)
                } else {
                    0.0
                };
                let bias = if spec.bias_amplitude > 0.0 {
                    let cx = 2.0 * x as f64 / (nx - 1).max(1) as f64 - 1.0;
                    let cy = 2.0 * y as f64 / (ny - 1).max(1) as f64 - 1.0;
                    let cz = 2.0 * z as f64 / (nz - 1).max(1) as f64 - 1.0;
                    let basis = [
                        cx,
                        cy,
                        cz,
                        cx * cy,
                        cx * cz,
                        cy * cz,
                        cx * cx,
                        cy * cy,
                        cz * cz,
                    ];
                    let p: f64 = coeffs
                        .iter()
                        .zip(&basis)
                        .map(|(c, b)| c * b)
                        .sum::<f64>()
                        / coeff_norm;
                    1.0 + spec.bias_amplitude * p
                } else {
                    1.0
                };
                volume.set(x, y, z, (mean + noise) * bias);
            }
        }
    }

    Ok((volume, labels, mask))
}

#[inline]
fn ellipsoid_radius(v: [usize; 3], center: [f64; 3], axes: [f64; 3]) -> f64 {
    let dx = (v[0] as f64 - center[0]) / axes[0];
    let dy = (v[1] as f64 - center[1]) / axes[1];
    let dz = (v[2] as f64 - center[2]) / axes[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

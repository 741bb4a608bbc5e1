//! The three focal regions: label palette, global/local label remapping, and
//! fusion of per-region predictions into one full-size map.
//!
//! Twelve deep-brain structures split into three groups of four. Each region
//! crops a fixed box out of the registered frame and works with local labels
//! 1..=4 (0 = background); fusion translates back to global ids, resolving
//! overlap claims by explicit region priority (higher wins).

use crate::error::{Error, Result};
use crate::grid::BoxRegion;
use crate::volume::LabelMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Global structure labels. Background is 0.
pub const PALETTE: [(u8, &str); 12] = [
    (1, "midbrain"),
    (2, "pons"),
    (3, "medulla"),
    (4, "scp"),
    (5, "lateral_ventricle_left"),
    (6, "lateral_ventricle_right"),
    (7, "third_ventricle"),
    (8, "fourth_ventricle"),
    (9, "caudate_left"),
    (10, "caudate_right"),
    (11, "putamen_left"),
    (12, "putamen_right"),
];

pub const NUM_STRUCTURES: usize = 12;
/// Classes for a whole-volume model: background + all structures.
pub const NUM_GLOBAL_CLASSES: usize = NUM_STRUCTURES + 1;
/// Classes for one region model: background + four structures.
pub const NUM_REGION_CLASSES: usize = 5;

pub fn structure_name(label: u8) -> Option<&'static str> {
    PALETTE
        .iter()
        .find(|(id, _)| *id == label)
        .map(|(_, name)| *name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionName {
    Brainstem,
    Ventricles,
    Striatum,
}

impl RegionName {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Brainstem => "brainstem",
            Self::Ventricles => "ventricles",
            Self::Striatum => "striatum",
        }
    }

    pub fn all() -> [RegionName; 3] {
        [Self::Brainstem, Self::Ventricles, Self::Striatum]
    }
}

impl std::str::FromStr for RegionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brainstem" => Ok(Self::Brainstem),
            "ventricles" => Ok(Self::Ventricles),
            "striatum" => Ok(Self::Striatum),
            other => Err(Error::InvalidConfig(format!("unknown region '{other}'"))),
        }
    }
}

/// One region's crop box, label mapping, and fusion rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: RegionName,
    #[serde(rename = "box")]
    pub crop: BoxRegion,
    /// Global labels mapped to local ids 1..=4, in order.
    pub global_labels: [u8; 4],
    /// Fusion rank: on overlap, the higher priority wins.
    pub priority: u32,
}

impl RegionSpec {
    /// Local id (1..=4) for a global label, if this region owns it.
    pub fn local_of(&self, global: u8) -> Option<u8> {
        self.global_labels
            .iter()
            .position(|&g| g == global)
            .map(|i| (i + 1) as u8)
    }

    /// Global label for a local id (1..=4).
    pub fn global_of(&self, local: u8) -> Option<u8> {
        if (1..=4).contains(&local) {
            Some(self.global_labels[(local - 1) as usize])
        } else {
            None
        }
    }
}

/// The full three-region configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub regions: Vec<RegionSpec>,
}

impl RegionConfig {
    /// Full-size boxes (96 / 128x160x128 / 96) positioned over the structure
    /// groups in the 240x285x240 registered frame.
    pub fn full_scale() -> Self {
        Self {
            regions: vec![
                RegionSpec {
                    name: RegionName::Brainstem,
                    crop: BoxRegion::new([72, 96, 18], [96, 96, 96]),
                    global_labels: [1, 2, 3, 4],
                    priority: 1,
                },
                RegionSpec {
                    name: RegionName::Ventricles,
                    crop: BoxRegion::new([52, 40, 60], [128, 160, 128]),
                    global_labels: [5, 6, 7, 8],
                    priority: 2,
                },
                RegionSpec {
                    name: RegionName::Striatum,
                    crop: BoxRegion::new([68, 78, 130], [96, 96, 96]),
                    global_labels: [9, 10, 11, 12],
                    priority: 3,
                },
            ],
        }
    }

    /// Desk-scale boxes for 64^3 phantoms (24^3, 32x40x32, 24^3).
    pub fn desk_scale() -> Self {
        Self {
            regions: vec![
                RegionSpec {
                    name: RegionName::Brainstem,
                    crop: BoxRegion::new([20, 22, 6], [24, 24, 24]),
                    global_labels: [1, 2, 3, 4],
                    priority: 1,
                },
                RegionSpec {
                    name: RegionName::Ventricles,
                    crop: BoxRegion::new([16, 12, 22], [32, 40, 32]),
                    global_labels: [5, 6, 7, 8],
                    priority: 2,
                },
                RegionSpec {
                    name: RegionName::Striatum,
                    crop: BoxRegion::new([20, 18, 38], [24, 24, 24]),
                    global_labels: [9, 10, 11, 12],
                    priority: 3,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "expected 3 regions, got {}",
                self.regions.len()
            )));
        }
        let mut seen = [false; NUM_GLOBAL_CLASSES];
        let mut priorities = std::collections::BTreeSet::new();
        for r in &self.regions {
            for &g in &r.global_labels {
                if g == 0 || g as usize >= NUM_GLOBAL_CLASSES {
                    return Err(Error::InvalidConfig(format!(
                        "region {} lists invalid label {g}",
                        r.name.as_str()
                    )));
                }
                if seen[g as usize] {
                    return Err(Error::InvalidConfig(format!(
                        "label {g} claimed by more than one region"
                    )));
                }
                seen[g as usize] = true;
            }
            if !priorities.insert(r.priority) {
                return Err(Error::InvalidConfig(
                    "region priorities must be distinct".into(),
                ));
            }
        }
        if !seen[1..].iter().all(|&s| s) {
            return Err(Error::InvalidConfig(
                "the three regions must jointly cover all 12 structures".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn get(&self, name: RegionName) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.name == name)
    }
}

/// Crop a full-size label map to a region's box and translate its four
/// structures to local ids 1..=4; everything else (including other regions'
/// structures visible in the crop) becomes background.
pub fn remap_to_local(full: &LabelMap, spec: &RegionSpec) -> LabelMap {
    let mut local = full.crop(&spec.crop, 0);
    for l in local.labels_mut() {
        *l = spec.local_of(*l).unwrap_or(0);
    }
    local
}

/// Fuse per-region local predictions into one full-size global map.
///
/// Regions are applied in ascending priority; non-background voxels overwrite,
/// so where two regions claim a voxel the higher priority wins. The output is
/// independent of the order `preds` is supplied in.
pub fn fuse_regions(
    preds: &[(LabelMap, &RegionSpec)],
    full_shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<LabelMap> {
    for (pred, spec) in preds {
        if pred.shape() != spec.crop.shape {
            return Err(Error::ShapeMismatch {
                expected: spec.crop.shape.to_vec(),
                got: pred.shape().to_vec(),
            });
        }
        if let Some(&bad) = pred.labels().iter().find(|&&l| l > 4) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: NUM_REGION_CLASSES,
            });
        }
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by_key(|&i| preds[i].1.priority);

    let mut full = LabelMap::zeros(full_shape, spacing, origin);
    let [nx, ny, nz] = full_shape;
    for &i in &order {
        let (pred, spec) = &preds[i];
        let b = &spec.crop;
        for z in 0..b.shape[2] {
            let gz = b.start[2] + z as i64;
            if gz < 0 || gz >= nz as i64 {
                continue;
            }
            for y in 0..b.shape[1] {
                let gy = b.start[1] + y as i64;
                if gy < 0 || gy >= ny as i64 {
                    continue;
                }
                for x in 0..b.shape[0] {
                    let gx = b.start[0] + x as i64;
                    if gx < 0 || gx >= nx as i64 {
                        continue;
                    }
                    let local = pred.at(x, y, z);
                    if local == 0 {
                        continue;
                    }
                    let global = spec.global_of(local).expect("validated above");
                    full.set(gx as usize, gy as usize, gz as usize, global);
                }
            }
        }
    }
    Ok(full)
}

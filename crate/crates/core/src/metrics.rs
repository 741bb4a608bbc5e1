//! Segmentation evaluation: per-structure Dice, 95th-percentile surface
//! distance in millimeters, the Wilcoxon signed-rank paired test, and
//! summary tables.
//!
//! Surface distances are exact: boundary voxels (six-connected definition,
//! volume border counts as outside) are fed through a separable exact
//! Euclidean distance transform that honors anisotropic spacing, then sampled
//! at the opposing boundary's voxel centers.

use crate::error::{Error, Result};
use crate::volume::LabelMap;
use std::fmt::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// Dice similarity coefficient for one label: `2|A∩B| / (|A|+|B|)`.
/// Both sets empty -> 1.0; exactly one empty -> 0.0.
pub fn dsc(a: &LabelMap, b: &LabelMap, label: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        let ia = la == label;
        let ib = lb == label;
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (na + nb) as f64,
    })
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (squared), anisotropic
// ---------------------------------------------------------------------------

const FAR: f64 = 1e30;

/// 1-D lower-envelope pass over parabolas rooted at `positions` with heights
/// `f`, writing squared distances into `f`.
fn dt_1d(f: &mut [f64], positions: &[f64], v: &mut [usize], zints: &mut [f64], d: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    zints[0] = f64::NEG_INFINITY;
    zints[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + positions[q] * positions[q])
                - (f[p] + positions[p] * positions[p]))
                / (2.0 * positions[q] - 2.0 * positions[p]);
            if s <= zints[k] {
                if k == 0 {
                    // Degenerate: replace the root parabola.
                    v[0] = q;
                    zints[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zints[k] = s;
                zints[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while zints[k + 1] < positions[q] {
            k += 1;
        }
        let p = v[k];
        d[q] = f[p] + (positions[q] - positions[p]) * (positions[q] - positions[p]);
    }
    f.copy_from_slice(&d[..n]);
}

/// Squared Euclidean distance (mm^2) from every voxel center to the nearest
/// `true` voxel center, respecting anisotropic spacing.
pub fn distance_transform_sq(
    mask: &[bool],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    let nmax = nx.max(ny).max(nz);
    let mut row = vec![0.0; nmax];
    let mut pos = vec![0.0; nmax];
    let mut v = vec![0usize; nmax];
    let mut zints = vec![0.0; nmax + 1];
    let mut scratch = vec![0.0; nmax];

    // X pass (x-fastest layout: rows are contiguous).
    for i in 0..nx {
        pos[i] = i as f64 * spacing[0];
    }
    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            row[..nx].copy_from_slice(&dist[base..base + nx]);
            dt_1d(&mut row[..nx], &pos[..nx], &mut v, &mut zints, &mut scratch);
            dist[base..base + nx].copy_from_slice(&row[..nx]);
        }
    }
    // Y pass.
    for i in 0..ny {
        pos[i] = i as f64 * spacing[1];
    }
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                row[y] = dist[x + nx * (y + ny * z)];
            }
            dt_1d(&mut row[..ny], &pos[..ny], &mut v, &mut zints, &mut scratch);
            for y in 0..ny {
                dist[x + nx * (y + ny * z)] = row[y];
            }
        }
    }
    // Z pass.
    for i in 0..nz {
        pos[i] = i as f64 * spacing[2];
    }
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                row[z] = dist[x + nx * (y + ny * z)];
            }
            dt_1d(&mut row[..nz], &pos[..nz], &mut v, &mut zints, &mut scratch);
            for z in 0..nz {
                dist[x + nx * (y + ny * z)] = row[z];
            }
        }
    }
    dist
}

/// Voxels carrying `label` that touch a six-connected non-label neighbor
/// (the volume border counts as non-label).
pub fn boundary_mask(m: &LabelMap, label: u8) -> Vec<bool> {
    let [nx, ny, nz] = m.shape();
    let mut out = vec![false; m.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.at(x, y, z) != label {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || z == 0
                    || x == nx - 1
                    || y == ny - 1
                    || z == nz - 1
                    || m.at(x - 1, y, z) != label
                    || m.at(x + 1, y, z) != label
                    || m.at(x, y - 1, z) != label
                    || m.at(x, y + 1, z) != label
                    || m.at(x, y, z - 1) != label
                    || m.at(x, y, z + 1) != label;
                if edge {
                    out[x + nx * (y + ny * z)] = true;
                }
            }
        }
    }
    out
}

/// Directed boundary-to-boundary distances `(a -> b, b -> a)` in mm.
pub fn surface_distances(
    a: &LabelMap,
    b: &LabelMap,
    label: u8,
    spacing: [f64; 3],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if a.count(label) == 0 || b.count(label) == 0 {
        return Err(Error::EmptyStructure(label));
    }
    let ba = boundary_mask(a, label);
    let bb = boundary_mask(b, label);
    let shape = a.shape();
    let dist_to_b = distance_transform_sq(&bb, shape, spacing);
    let dist_to_a = distance_transform_sq(&ba, shape, spacing);
    let a_to_b: Vec<f64> = ba
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| dist_to_b[i].sqrt())
        .collect();
    let b_to_a: Vec<f64> = bb
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| dist_to_a[i].sqrt())
        .collect();
    Ok((a_to_b, b_to_a))
}

/// Percentile with linear interpolation between order statistics
/// (`q` in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Which distance pool the 95th percentile is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hd95Mode {
    /// 95th percentile of the pooled union of both directed sets (symmetric).
    #[default]
    PooledUnion,
    /// Maximum of the two per-direction 95th percentiles.
    MaxDirected,
}

pub fn hd95_with_mode(
    a: &LabelMap,
    b: &LabelMap,
    label: u8,
    spacing: [f64; 3],
    mode: Hd95Mode,
) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, label, spacing)?;
    Ok(match mode {
        Hd95Mode::PooledUnion => {
            let mut pooled = ab;
            pooled.extend(ba);
            percentile(&pooled, 0.95)
        }
        Hd95Mode::MaxDirected => percentile(&ab, 0.95).max(percentile(&ba, 0.95)),
    })
}

/// 95th-percentile Hausdorff distance (pooled-union convention), mm.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u8, spacing: [f64; 3]) -> Result<f64> {
    hd95_with_mode(a, b, label, spacing, Hd95Mode::PooledUnion)
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    /// True if the exact distribution was used (n <= 25).
    pub exact: bool,
}

const WILCOXON_EXACT_LIMIT: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; |differences| are ranked with average ranks
/// on ties. For n <= 25 the p-value is exact (distribution of the rank sum
/// under random signs); beyond that a normal approximation with tie and
/// continuity corrections is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.len()],
            got: vec![y.len()],
        });
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();

    // Average ranks of |d|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let (p, exact) = if n <= WILCOXON_EXACT_LIMIT {
        (exact_two_sided_p(&ranks, w), true)
    } else {
        (normal_two_sided_p(&ranks, w), false)
    };

    Ok(WilcoxonResult {
        w,
        w_plus,
        w_minus,
        n,
        p: p.min(1.0),
        exact,
    })
}

/// Exact two-sided p: 2 * P(W+ <= w) under random sign assignment, computed
/// by dynamic programming over the rank-sum distribution. Ranks are doubled
/// so average ranks (multiples of 0.5) become integers.
fn exact_two_sided_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W+ equal to s.
    // Counts fit f64 exactly (< 2^53 for n <= 25).
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2 = (2.0 * w).round() as usize;
    let below: f64 = counts[..=w2.min(total)].iter().sum();
    let denom = (counts.iter().sum::<f64>()).max(1.0);
    (2.0 * below / denom).min(1.0)
}

/// Normal approximation with tie correction (via the actual rank values) and
/// a 0.5 continuity correction.
fn normal_two_sided_p(ranks: &[f64], w: f64) -> f64 {
    let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
    let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    let sd = var.sqrt();
    if sd == 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / sd;
    let phi = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    (2.0 * phi).min(1.0)
}

// ---------------------------------------------------------------------------
// Records and summaries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StructureEval {
    pub label: u8,
    pub dsc: f64,
    /// `None` when the structure is empty in either mask.
    pub hd95: Option<f64>,
}

/// Per-subject evaluation across the labels of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub subject: String,
    pub structures: Vec<StructureEval>,
}

/// Evaluate a prediction against ground truth for the given labels.
pub fn evaluate_pair(
    subject: &str,
    pred: &LabelMap,
    truth: &LabelMap,
    labels: &[u8],
) -> Result<EvalRecord> {
    let mut structures = Vec::with_capacity(labels.len());
    for &label in labels {
        let d = dsc(pred, truth, label)?;
        let h = match hd95(pred, truth, label, truth.spacing()) {
            Ok(v) => Some(v),
            Err(Error::EmptyStructure(_)) => None,
            Err(e) => return Err(e),
        };
        structures.push(StructureEval {
            label,
            dsc: d,
            hd95: h,
        });
    }
    Ok(EvalRecord {
        subject: subject.to_string(),
        structures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: u8,
    pub name: String,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: Option<f64>,
    /// Records contributing to the DSC statistics.
    pub n: usize,
    /// Records with a defined HD95.
    pub n_hd95: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    /// Grand averages over structures (mean of per-structure means/stds).
    pub average: SummaryRow,
}

fn sample_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 1);
    let mean = values.iter().sum::<f64>() / n as f64;
    // Single observation: STD 0 by convention.
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Table 1-style cell: `0.901±0.044`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

/// Aggregate per-subject records into per-structure means and stds.
pub fn summarize(records: &[EvalRecord]) -> SummaryTable {
    assert!(!records.is_empty(), "summarize needs at least one record");
    let mut labels: Vec<u8> = records[0].structures.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    let mut rows = Vec::with_capacity(labels.len());
    for &label in &labels {
        let dscs: Vec<f64> = records
            .iter()
            .flat_map(|r| r.structures.iter().filter(|s| s.label == label))
            .map(|s| s.dsc)
            .collect();
        let hds: Vec<f64> = records
            .iter()
            .flat_map(|r| r.structures.iter().filter(|s| s.label == label))
            .filter_map(|s| s.hd95)
            .collect();
        let (dsc_mean, dsc_std) = sample_mean_std(&dscs);
        let hd95_mean = if hds.is_empty() {
            None
        } else {
            Some(hds.iter().sum::<f64>() / hds.len() as f64)
        };
        rows.push(SummaryRow {
            label,
            name: crate::regions::structure_name(label)
                .unwrap_or("structure")
                .to_string(),
            dsc_mean,
            dsc_std,
            hd95_mean,
            n: dscs.len(),
            n_hd95: hds.len(),
        });
    }
    let dsc_means: Vec<f64> = rows.iter().map(|r| r.dsc_mean).collect();
    let dsc_stds: Vec<f64> = rows.iter().map(|r| r.dsc_std).collect();
    let hd_means: Vec<f64> = rows.iter().filter_map(|r| r.hd95_mean).collect();
    let average = SummaryRow {
        label: 0,
        name: "average".to_string(),
        dsc_mean: dsc_means.iter().sum::<f64>() / dsc_means.len() as f64,
        dsc_std: dsc_stds.iter().sum::<f64>() / dsc_stds.len() as f64,
        hd95_mean: if hd_means.is_empty() {
            None
        } else {
            Some(hd_means.iter().sum::<f64>() / hd_means.len() as f64)
        },
        n: rows.iter().map(|r| r.n).min().unwrap_or(0),
        n_hd95: rows.iter().map(|r| r.n_hd95).min().unwrap_or(0),
    };
    SummaryTable { rows, average }
}

impl SummaryTable {
    /// CSV: structure, dsc_mean, dsc_std, hd95_mean, n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure,dsc_mean,dsc_std,hd95_mean,n\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let hd = r
                .hd95_mean
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{}",
                r.name, r.dsc_mean, r.dsc_std, hd, r.n
            );
        }
        out
    }

    /// Aligned text table with `mean±std` cells.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(std::iter::once("average".len()))
            .max()
            .unwrap_or(8)
            .max("structure".len());
        let mut out = format!(
            "{:<width$}  {:>13}  {:>9}\n",
            "structure", "DSC", "HD95 (mm)"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let hd = r
                .hd95_mean
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "{:<width$}  {:>13}  {:>9}",
                r.name,
                format_mean_std(r.dsc_mean, r.dsc_std),
                hd
            );
        }
        out
    }
}

/// Per-record CSV: subject, structure, dsc, hd95 (empty when undefined).
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("subject,structure,dsc,hd95\n");
    for r in records {
        for s in &r.structures {
            let hd = s.hd95.map(|v| format!("{v:.6}")).unwrap_or_default();
            let name = crate::regions::structure_name(s.label).unwrap_or("structure");
            let _ = writeln!(out, "{},{},{:.6},{}", r.subject, name, s.dsc, hd);
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(shape: [usize; 3], spacing: [f64; 3], voxels: &[(usize, usize, usize)]) -> LabelMap {
        let mut m = LabelMap::zeros(shape, spacing, [0.0; 3]);
        for &(x, y, z) in voxels {
            m.set(x, y, z, 1);
        }
        m
    }

    #[test]
    fn dsc_identity_disjoint_and_half() {
        let a = map_from([3, 3, 3], [1.0; 3], &[(0, 0, 0), (1, 0, 0)]);
        let b = map_from([3, 3, 3], [1.0; 3], &[(2, 2, 2)]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);

        // |A| = 8, |B| = 8, overlap 4 -> 0.5 on an enumerated 3^3 fixture.
        let a: Vec<(usize, usize, usize)> = (0..8).map(|i| (i % 2, (i / 2) % 2, i / 4)).collect();
        let b: Vec<(usize, usize, usize)> =
            (0..8).map(|i| (i % 2, (i / 2) % 2, 1 + i / 4)).collect();
        let a = map_from([3, 3, 3], [1.0; 3], &a);
        let b = map_from([3, 3, 3], [1.0; 3], &b);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn dsc_empty_conventions() {
        let empty = LabelMap::zeros([2, 2, 2], [1.0; 3], [0.0; 3]);
        let one = map_from([2, 2, 2], [1.0; 3], &[(0, 0, 0)]);
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &one, 1).unwrap(), 0.0);
        assert_eq!(dsc(&one, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dsc_is_symmetric_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut m = LabelMap::zeros([6, 6, 6], [1.0; 3], [0.0; 3]);
                for l in m.labels_mut() {
                    *l = rng.random_range(0..=1);
                }
                m
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        }
    }

    #[test]
    fn identical_masks_have_zero_distances() {
        let a = map_from([5, 5, 5], [1.0; 3], &[(2, 2, 2), (3, 2, 2)]);
        let (ab, ba) = surface_distances(&a, &a, 1, [1.0; 3]).unwrap();
        assert!(ab.iter().all(|&d| d == 0.0));
        assert!(ba.iter().all(|&d| d == 0.0));
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn single_voxel_pair_respects_anisotropic_spacing() {
        // Two single-voxel structures 3 voxels apart on X with 2 mm X spacing:
        // directed distances are both exactly 6 mm.
        let a = map_from([8, 3, 3], [2.0, 1.0, 1.0], &[(1, 1, 1)]);
        let b = map_from([8, 3, 3], [2.0, 1.0, 1.0], &[(4, 1, 1)]);
        let (ab, ba) = surface_distances(&a, &b, 1, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(ab, vec![6.0]);
        assert_eq!(ba, vec![6.0]);
    }

    #[test]
    fn empty_structure_is_reported() {
        let a = map_from([3, 3, 3], [1.0; 3], &[(1, 1, 1)]);
        let empty = LabelMap::zeros([3, 3, 3], [1.0; 3], [0.0; 3]);
        assert!(matches!(
            surface_distances(&a, &empty, 1, [1.0; 3]),
            Err(Error::EmptyStructure(1))
        ));
    }

    /// O(n^2) oracle: minimum pairwise distance voxel-center to voxel-center.
    fn brute_force_directed(
        from: &[bool],
        to: &[bool],
        shape: [usize; 3],
        spacing: [f64; 3],
    ) -> Vec<f64> {
        let [nx, ny, _] = shape;
        let coords = |i: usize| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            (x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2])
        };
        let targets: Vec<(f64, f64, f64)> = to
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| coords(i))
            .collect();
        from.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| {
                let (x, y, z) = coords(i);
                targets
                    .iter()
                    .map(|&(tx, ty, tz)| {
                        ((x - tx).powi(2) + (y - ty).powi(2) + (z - tz).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..25 {
            let shape = [
                rng.random_range(2..10),
                rng.random_range(2..10),
                rng.random_range(2..10),
            ];
            let spacing = [
                rng.random_range(1..=3) as f64,
                rng.random_range(1..=3) as f64,
                rng.random_range(1..=3) as f64,
            ];
            let n: usize = shape.iter().product();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.2).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let sq = distance_transform_sq(&mask, shape, spacing);
            let all: Vec<bool> = vec![true; n];
            let brute = brute_force_directed(&all, &mask, shape, spacing);
            for (i, (&s, b)) in sq.iter().zip(&brute).enumerate() {
                assert!(
                    (s.sqrt() - b).abs() < 1e-9,
                    "trial {trial} voxel {i}: {} vs {b}",
                    s.sqrt()
                );
            }
        }
    }

    #[test]
    fn hd95_interpolates_between_order_statistics() {
        // Pooled distances: nineteen zeros and one ten. The 95th percentile
        // index is 0.95 * 19 = 18.05, interpolating to 0.5.
        let mut vals = vec![0.0; 19];
        vals.push(10.0);
        assert!((percentile(&vals, 0.95) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hd95_is_symmetric_in_pooled_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut m = LabelMap::zeros([6, 6, 6], [1.0; 3], [0.0; 3]);
                for l in m.labels_mut() {
                    *l = (rng.random_range(0.0..1.0) < 0.3) as u8;
                }
                m
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            if a.count(1) == 0 || b.count(1) == 0 {
                continue;
            }
            let ab = hd95(&a, &b, 1, [1.0; 3]).unwrap();
            let ba = hd95(&b, &a, 1, [1.0; 3]).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn wilcoxon_all_zero_differences_is_an_error() {
        let x = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x),
            Err(Error::AllZeroDifferences)
        ));
    }

    #[test]
    fn wilcoxon_textbook_fixture() {
        // Differences {1,-2,3,4,5,6,7,8,9,10}: |d| are 1..10 so ranks equal
        // |d|; W- = 2, W+ = 53.
        let y = vec![0.0; 10];
        let x = vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.w_minus, 2.0);
        assert_eq!(r.w_plus, 53.0);
        assert_eq!(r.w, 2.0);
        assert!(r.exact);
        // Exhaustive 2^10 enumeration.
        let mut count = 0usize;
        let ranks: Vec<f64> = (1..=10).map(f64::from).collect();
        for signs in 0..1u32 << 10 {
            let wp: f64 = (0..10)
                .filter(|i| signs >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if wp <= 2.0 {
                count += 1;
            }
        }
        let expect = 2.0 * count as f64 / 1024.0;
        assert!((r.p - expect).abs() < 1e-12, "{} vs {expect}", r.p);
    }

    #[test]
    fn exact_p_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(6..=12);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64).collect();
            let r = match wilcoxon_signed_rank(&x, &y) {
                Ok(r) => r,
                Err(_) => continue, // all-zero differences
            };
            // Recompute ranks independently for the enumeration.
            let diffs: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(a, b)| a - b)
                .filter(|d| *d != 0.0)
                .collect();
            let m = diffs.len();
            let mut abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
            abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank_of = |v: f64| {
                let lo = abs.iter().filter(|&&a| a < v).count();
                let eq = abs.iter().filter(|&&a| a == v).count();
                (2 * lo + eq + 1) as f64 / 2.0
            };
            let ranks: Vec<f64> = diffs.iter().map(|d| rank_of(d.abs())).collect();
            let mut count = 0usize;
            for signs in 0..1u64 << m {
                let wp: f64 = (0..m)
                    .filter(|i| signs >> i & 1 == 1)
                    .map(|i| ranks[i])
                    .sum();
                if wp <= r.w + 1e-12 {
                    count += 1;
                }
            }
            let expect = (2.0 * count as f64 / (1u64 << m) as f64).min(1.0);
            assert!((r.p - expect).abs() < 1e-12, "{} vs {expect}", r.p);
        }
    }

    #[test]
    fn summary_math_and_formatting() {
        let rec = |subject: &str, d: f64| EvalRecord {
            subject: subject.into(),
            structures: vec![StructureEval {
                label: 1,
                dsc: d,
                hd95: Some(1.0),
            }],
        };
        let single = summarize(&[rec("a", 0.9)]);
        assert_eq!(single.rows[0].dsc_mean, 0.9);
        assert_eq!(single.rows[0].dsc_std, 0.0);

        let two = summarize(&[rec("a", 0.8), rec("b", 0.9)]);
        assert!((two.rows[0].dsc_mean - 0.85).abs() < 1e-12);
        assert!((two.rows[0].dsc_std - 0.0707106781).abs() < 1e-9);

        assert_eq!(format_mean_std(0.9012, 0.0441), "0.901±0.044");
    }

    #[test]
    fn csv_schemas() {
        let rec = EvalRecord {
            subject: "s01".into(),
            structures: vec![
                StructureEval {
                    label: 1,
                    dsc: 0.5,
                    hd95: Some(2.0),
                },
                StructureEval {
                    label: 2,
                    dsc: 1.0,
                    hd95: None,
                },
            ],
        };
        let csv = records_to_csv(&[rec.clone()]);
        assert!(csv.starts_with("subject,structure,dsc,hd95\n"));
        assert!(csv.contains("s01,midbrain,0.500000,2.000000"));
        assert!(csv.contains("s01,pons,1.000000,\n"));
        let table = summarize(&[rec]);
        assert!(table.to_csv().starts_with("structure,dsc_mean,dsc_std,hd95_mean,n\n"));
        assert!(table.to_text().contains("±"));
    }
}

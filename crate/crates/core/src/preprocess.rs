//! Fuzzy c-means intensity normalization.
//!
//! Volumes acquired with different scanners or phantom generators land on a
//! common scale by clustering the masked intensities into `c` tissue modes
//! and dividing the whole volume by the brightest centroid (the white-matter
//! proxy in T1-weighted images), mapping it to 1.0.

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Default cluster count: CSF / GM / WM.
pub const DEFAULT_CLUSTERS: usize = 3;
/// Default fuzziness exponent.
pub const DEFAULT_FUZZINESS: f64 = 2.0;
/// Default absolute centroid-shift tolerance.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 200;

/// Outcome of a fuzzy c-means run.
#[derive(Debug, Clone)]
pub struct FcmResult {
    /// Cluster centers, sorted ascending.
    pub centroids: Vec<f64>,
    /// Row-major memberships: `memberships[i * c + k]` is the degree to which
    /// sample `i` belongs to cluster `k`. Rows sum to 1.
    pub memberships: Vec<f64>,
    /// Iterations actually performed.
    pub iterations: usize,
    /// Maximum centroid movement at the final iteration.
    pub final_shift: f64,
}

/// Fuzzy c-means on a scalar sample set.
///
/// Initial centroids are the data quantiles at `(k + 0.5) / c`, so the run is
/// deterministic; `seed` is accepted for interface stability but the default
/// initializer does not consume randomness. The alternating update runs until
/// the maximum centroid shift drops below `tol` or `max_iter` is hit
/// (hitting the cap is not an error; the caller can inspect `iterations`).
pub fn fcm_cluster(
    intensities: &[f64],
    c: usize,
    m: f64,
    tol: f64,
    max_iter: usize,
    _seed: u64,
) -> Result<FcmResult> {
    assert!(c >= 2, "cluster count must be at least 2");
    assert!(m > 1.0, "fuzziness exponent must exceed 1");
    let n = intensities.len();

    let mut distinct = intensities.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("intensities must be finite"));
    distinct.dedup();
    if distinct.len() < c {
        return Err(Error::DegenerateData);
    }

    // Quantile initialization over the sorted sample.
    let mut sorted = intensities.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut centroids: Vec<f64> = (0..c)
        .map(|k| {
            let q = (k as f64 + 0.5) / c as f64;
            let h = q * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect();
    // Coincident quantiles (heavily repeated data) collapse clusters; nudge
    // duplicates onto the nearest unused distinct value.
    for k in 1..c {
        if centroids[k] <= centroids[k - 1] {
            let next = distinct
                .iter()
                .copied()
                .find(|&d| d > centroids[k - 1])
                .expect("distinct count >= c guarantees a larger value");
            centroids[k] = next;
        }
    }

    let exponent = 2.0 / (m - 1.0);
    // m = 2 is the default; squaring beats powf in the per-voxel loops.
    let pow_e = |r: f64| if exponent == 2.0 { r * r } else { r.powf(exponent) };
    let pow_m = |u: f64| if m == 2.0 { u * u } else { u.powf(m) };
    let mut memberships = vec![0.0; n * c];
    let mut iterations = 0;
    let mut final_shift = f64::INFINITY;
    let mut prev_objective = f64::INFINITY;

    for iter in 0..max_iter {
        iterations = iter + 1;

        // Membership update. A sample coinciding with a centroid belongs
        // fully to (the first of) its coincident cluster(s).
        for (i, &x) in intensities.iter().enumerate() {
            let row = &mut memberships[i * c..(i + 1) * c];
            if let Some(hit) = centroids.iter().position(|&ck| x == ck) {
                row.fill(0.0);
                row[hit] = 1.0;
                continue;
            }
            let mut denom_sum = 0.0;
            for k in 0..c {
                let dk = (x - centroids[k]).abs();
                let mut inv = 0.0;
                for &cj in centroids.iter() {
                    inv += pow_e(dk / (x - cj).abs());
                }
                row[k] = 1.0 / inv;
                denom_sum += row[k];
            }
            // Guard against accumulated rounding: renormalize the row.
            for u in row.iter_mut() {
                *u /= denom_sum;
            }
        }

        // Centroid update with fixed-order accumulation.
        let mut shift: f64 = 0.0;
        for k in 0..c {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &x) in intensities.iter().enumerate() {
                let um = pow_m(memberships[i * c + k]);
                num += um * x;
                den += um;
            }
            let next = if den > 0.0 { num / den } else { centroids[k] };
            shift = shift.max((next - centroids[k]).abs());
            centroids[k] = next;
        }
        final_shift = shift;

        if cfg!(debug_assertions) {
            let objective: f64 = intensities
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    (0..c)
                        .map(|k| pow_m(memberships[i * c + k]) * (x - centroids[k]).powi(2))
                        .sum::<f64>()
                })
                .sum();
            debug_assert!(
                objective <= prev_objective * (1.0 + 1e-9) + 1e-12,
                "FCM objective increased: {prev_objective} -> {objective}"
            );
            prev_objective = objective;
        }

        if shift < tol {
            break;
        }
    }

    // Present centroids in ascending order, permuting membership columns.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap());
    let sorted_centroids: Vec<f64> = order.iter().map(|&k| centroids[k]).collect();
    let mut sorted_memberships = vec![0.0; n * c];
    for i in 0..n {
        for (kk, &k) in order.iter().enumerate() {
            sorted_memberships[i * c + kk] = memberships[i * c + k];
        }
    }

    Ok(FcmResult {
        centroids: sorted_centroids,
        memberships: sorted_memberships,
        iterations,
        final_shift,
    })
}

/// Summary of one normalization run.
#[derive(Debug, Clone)]
pub struct NormalizeSummary {
    /// Tissue centroids in the input intensity units, ascending.
    pub centroids: Vec<f64>,
    /// Factor the volume was divided by (the largest centroid).
    pub scale: f64,
    pub iterations: usize,
}

/// Normalize a volume so its brightest masked tissue mode maps to 1.0.
///
/// Clustering runs on the masked voxels only; the resulting scale divides
/// every voxel, masked or not. Intensities are internally mapped to [0, 1]
/// before clustering so the stopping rule is independent of the input scale,
/// which makes the whole operation scale-invariant.
pub fn normalize_wm(v: &Volume, brain_mask: &LabelMap, c: usize) -> Result<Volume> {
    normalize_wm_detailed(v, brain_mask, c).map(|(out, _)| out)
}

pub fn normalize_wm_detailed(
    v: &Volume,
    brain_mask: &LabelMap,
    c: usize,
) -> Result<(Volume, NormalizeSummary)> {
    if v.shape() != brain_mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: v.shape().to_vec(),
            got: brain_mask.shape().to_vec(),
        });
    }
    let masked: Vec<f64> = v
        .voxels()
        .iter()
        .zip(brain_mask.labels())
        .filter(|(_, &m)| m != 0)
        .map(|(&x, _)| x)
        .collect();
    if masked.is_empty() {
        return Err(Error::DegenerateData);
    }

    let lo = masked.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::DegenerateData);
    }
    let canonical: Vec<f64> = masked.iter().map(|&x| (x - lo) / range).collect();

    let fcm = fcm_cluster(
        &canonical,
        c,
        DEFAULT_FUZZINESS,
        DEFAULT_TOL,
        DEFAULT_MAX_ITER,
        0,
    )?;
    // Map canonical centroids back to input units.
    let centroids: Vec<f64> = fcm.centroids.iter().map(|&ck| lo + ck * range).collect();
    let scale = *centroids.last().expect("c >= 2");
    if !(scale > 0.0) {
        return Err(Error::DegenerateData);
    }

    let voxels: Vec<f64> = v.voxels().iter().map(|&x| x / scale).collect();
    let out = Volume::new(v.shape(), v.spacing(), v.origin(), voxels)?;
    Ok((
        out,
        NormalizeSummary {
            centroids,
            scale,
            iterations: fcm.iterations,
        },
    ))
}

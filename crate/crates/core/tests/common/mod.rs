//! Independent oracles shared by the integration and acceptance suites.
//!
//! Everything here is written against the mathematical definitions, not the
//! library's implementation paths: naive loops, brute-force enumeration, and
//! central finite differences. Keeping these in test code guarantees the
//! production kernels are checked against genuinely separate arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

pub struct GradCheck {
    #[allow(dead_code)]
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central-difference check of `analytic` against `f` perturbed elementwise.
/// `f` must be a pure function of the input vector.
///
/// Components whose absolute error sits below the finite-difference noise
/// floor (roundoff is O(|f| * eps / h) ~ 1e-11 here) pass outright; the
/// relative error is reported over the rest.
pub fn finite_difference_check<F>(
    f: F,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len());
    const NOISE_FLOOR: f64 = 1e-8;
    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let abs_err = (a - numeric).abs();
        max_abs_err = max_abs_err.max(abs_err);
        if abs_err <= NOISE_FLOOR {
            continue;
        }
        let denom = a.abs().max(numeric.abs());
        max_rel_err = max_rel_err.max(abs_err / denom);
    }
    GradCheck {
        max_abs_err,
        max_rel_err,
        checked: x0.len(),
    }
}

pub fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Naive seven-loop convolution oracle
// ---------------------------------------------------------------------------

/// 3x3x3 convolution, padding 1, computed with seven nested loops and one
/// rounding step per tap in `(ci, dx, dy, dz)` order.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_naive(
    input: &[f64],
    b: usize,
    cin: usize,
    x: usize,
    y: usize,
    z: usize,
    weight: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let vox = x * y * z;
    let mut out = vec![0.0; b * cout * vox];
    for bi in 0..b {
        for co in 0..cout {
            for xo in 0..x {
                for yo in 0..y {
                    for zo in 0..z {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for dx in 0..3usize {
                                for dy in 0..3usize {
                                    for dz in 0..3usize {
                                        let xi = xo as i64 + dx as i64 - 1;
                                        let yi = yo as i64 + dy as i64 - 1;
                                        let zi = zo as i64 + dz as i64 - 1;
                                        let val = if xi >= 0
                                            && yi >= 0
                                            && zi >= 0
                                            && xi < x as i64
                                            && yi < y as i64
                                            && zi < z as i64
                                        {
                                            input[((bi * cin + ci) * x + xi as usize) * y * z
                                                + (yi as usize) * z
                                                + zi as usize]
                                        } else {
                                            0.0
                                        };
                                        let w = weight
                                            [((co * cin + ci) * 3 + dx) * 9 + dy * 3 + dz];
                                        acc += w * val;
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * x + xo) * y * z + yo * z + zo] = acc;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force surface distances and reference percentile
// ---------------------------------------------------------------------------

use regionseg::volume::LabelMap;

/// Boundary voxels straight from the definition: labeled voxels with a
/// six-connected neighbor (or volume border) that is not the label.
pub fn boundary_voxels(m: &LabelMap, label: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.at(x, y, z) != label {
                    continue;
                }
                let mut edge = x == 0 || y == 0 || z == 0;
                edge |= x == nx - 1 || y == ny - 1 || z == nz - 1;
                if !edge {
                    edge = m.at(x - 1, y, z) != label
                        || m.at(x + 1, y, z) != label
                        || m.at(x, y - 1, z) != label
                        || m.at(x, y + 1, z) != label
                        || m.at(x, y, z - 1) != label
                        || m.at(x, y, z + 1) != label;
                }
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// O(n^2) directed distances between boundary point sets, in mm.
pub fn brute_force_directed(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    spacing: [f64; 3],
) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    let dx = (a[0] as f64 - b[0] as f64) * spacing[0];
                    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
                    let dz = (a[2] as f64 - b[2] as f64) * spacing[2];
                    (dx * dx + dy * dy + dz * dz).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linear-interpolation percentile, written independently of the library.
pub fn reference_percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lower = pos.floor() as usize;
    let frac = pos - lower as f64;
    if lower + 1 < n {
        sorted[lower] * (1.0 - frac) + sorted[lower + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Brute-force HD95 on the pooled union of both directed distance sets.
pub fn brute_force_hd95(
    a: &LabelMap,
    b: &LabelMap,
    label: u8,
    spacing: [f64; 3],
) -> Option<f64> {
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let mut pooled = brute_force_directed(&ba, &bb, spacing);
    pooled.extend(brute_force_directed(&bb, &ba, spacing));
    Some(reference_percentile(&pooled, 0.95))
}

/// Random small label mask for metric stress tests.
pub fn random_mask(shape: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> LabelMap {
    let n: usize = shape.iter().product();
    let labels: Vec<u8> = (0..n)
        .map(|_| (rng.random_range(0.0..1.0) < density) as u8)
        .collect();
    LabelMap::new(shape, [1.0; 3], [0.0; 3], labels).unwrap()
}

// ---------------------------------------------------------------------------
// Exhaustive Wilcoxon oracle
// ---------------------------------------------------------------------------

/// Exact two-sided p by enumerating all 2^n sign assignments over the given
/// paired samples. Mirrors: drop zero differences, average ranks on ties,
/// p = 2 * P(W+ <= min(W+, W-)).
pub fn wilcoxon_enumeration_p(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return None;
    }
    let n = diffs.len();
    assert!(n <= 20, "enumeration oracle is exponential");
    let mut abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank_of = |v: f64| {
        let below = abs.iter().filter(|&&a| a < v).count();
        let equal = abs.iter().filter(|&&a| a == v).count();
        (2 * below + equal + 1) as f64 / 2.0
    };
    let ranks: Vec<f64> = diffs.iter().map(|d| rank_of(d.abs())).collect();
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_obs = w_plus.min(total - w_plus);

    let mut count = 0u64;
    for signs in 0..(1u64 << n) {
        let wp: f64 = (0..n)
            .filter(|i| signs >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if wp <= w_obs + 1e-12 {
            count += 1;
        }
    }
    let p = (2.0 * count as f64 / (1u64 << n) as f64).min(1.0);
    Some((w_obs, p))
}

// ---------------------------------------------------------------------------
// NIfTI header fixtures
// ---------------------------------------------------------------------------

use regionseg::nifti::HEADER_LEN;

/// Hand-built little-endian single-file float32 header.
pub fn le_header(shape: [i16; 3], pixdim: f32, slope: f32, inter: f32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, shape[0], shape[1], shape[2], 1, 1, 1, 1];
    for (a, d) in dim.iter().enumerate() {
        h[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    for a in 0..8 {
        h[76 + 4 * a..80 + 4 * a].copy_from_slice(&pixdim.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Byte-swap every numeric field the parser reads (magic stays as chars).
pub fn byte_swapped(le: &[u8; HEADER_LEN]) -> [u8; HEADER_LEN] {
    let mut be = *le;
    let mut swap = |at: usize, width: usize, count: usize| {
        for k in 0..count {
            be[at + k * width..at + (k + 1) * width].reverse();
        }
    };
    swap(0, 4, 1);
    swap(40, 2, 8);
    swap(68, 2, 3);
    swap(76, 4, 8);
    swap(108, 4, 3);
    swap(252, 2, 2);
    swap(256, 4, 18);
    be
}

// ---------------------------------------------------------------------------
// Reference fuzzy c-means
// ---------------------------------------------------------------------------

/// Textbook FCM with quantile initialization, kept deliberately plain.
pub fn reference_fcm(data: &[f64], c: usize, m: f64, iterations: usize) -> Vec<f64> {
    let n = data.len();
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut centers: Vec<f64> = (0..c)
        .map(|k| {
            let h = (k as f64 + 0.5) / c as f64 * (n - 1) as f64;
            let lo = h.floor() as usize;
            sorted[lo] + (h - lo as f64) * (sorted[h.ceil() as usize] - sorted[lo])
        })
        .collect();
    let mut u = vec![vec![0.0f64; c]; n];
    for _ in 0..iterations {
        for (i, &xi) in data.iter().enumerate() {
            if let Some(k) = centers.iter().position(|&ck| ck == xi) {
                for (kk, uu) in u[i].iter_mut().enumerate() {
                    *uu = if kk == k { 1.0 } else { 0.0 };
                }
                continue;
            }
            for k in 0..c {
                let mut s = 0.0;
                for j in 0..c {
                    s += ((xi - centers[k]).abs() / (xi - centers[j]).abs())
                        .powf(2.0 / (m - 1.0));
                }
                u[i][k] = 1.0 / s;
            }
        }
        for k in 0..c {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &xi) in data.iter().enumerate() {
                let umk = u[i][k].powf(m);
                num += umk * xi;
                den += umk;
            }
            centers[k] = num / den;
        }
    }
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    centers
}

//! Convolution kernels (forward and backward) shared by the tape.
//!
//! All kernels are sequential with a fixed accumulation order, so results are
//! run-to-run deterministic. The forward path additionally fixes the
//! per-output-voxel order to `(channel, dx, dy, dz)` ascending with one
//! rounding step per tap, which makes it bit-comparable against a naive
//! seven-loop reference using the same order. The direct path pads the input
//! once and applies all 27 taps in a single pass over each output row; an
//! im2col route through the same arithmetic is provided as an alternative
//! path and must agree bit-for-bit with the direct one.
//!
//! Reductions (weight/bias gradients) use a fixed eight-lane strided
//! accumulator so the compiler can vectorize them without reassociating a
//! serial chain; the lane split is part of the kernel definition, not a
//! scheduling artifact, so those results are deterministic too.

/// Zero-pad the spatial axes of `[b, c, x, y, z]` data by `pad` on each side.
pub fn pad_spatial(
    src: &[f64],
    b: usize,
    c: usize,
    x: usize,
    y: usize,
    z: usize,
    pad: usize,
) -> Vec<f64> {
    let (px, py, pz) = (x + 2 * pad, y + 2 * pad, z + 2 * pad);
    let mut out = vec![0.0; b * c * px * py * pz];
    for slab in 0..b * c {
        let sbase = slab * x * y * z;
        let dbase = slab * px * py * pz;
        for xi in 0..x {
            for yi in 0..y {
                let s = sbase + (xi * y + yi) * z;
                let d = dbase + ((xi + pad) * py + (yi + pad)) * pz + pad;
                out[d..d + z].copy_from_slice(&src[s..s + z]);
            }
        }
    }
    out
}

/// Dot product with a fixed 8-lane strided accumulation scheme.
#[inline]
fn dot_strided(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    for (j, (va, vb)) in ra.iter().zip(rb).enumerate() {
        lanes[j] += va * vb;
    }
    let s0 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let s1 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    s0 + s1
}

/// Three simultaneous dot products of `go` against `p` at offsets 0, 1, 2
/// (`p.len() >= go.len() + 2`), with the fixed 8-lane scheme.
#[inline]
fn dot3_strided(go: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let z = go.len();
    assert!(p.len() >= z + 2);
    let mut l0 = [0.0f64; 8];
    let mut l1 = [0.0f64; 8];
    let mut l2 = [0.0f64; 8];
    let mut i = 0;
    while i + 8 <= z {
        // SAFETY: i + 8 <= z <= go.len() and p.len() >= z + 2.
        unsafe {
            for j in 0..8 {
                let g = *go.get_unchecked(i + j);
                l0[j] += g * p.get_unchecked(i + j);
                l1[j] += g * p.get_unchecked(i + j + 1);
                l2[j] += g * p.get_unchecked(i + j + 2);
            }
        }
        i += 8;
    }
    let mut j = 0;
    while i < z {
        let g = go[i];
        l0[j] += g * p[i];
        l1[j] += g * p[i + 1];
        l2[j] += g * p[i + 2];
        i += 1;
        j += 1;
    }
    (fold8(&l0), fold8(&l1), fold8(&l2))
}

#[inline]
fn fold8(lanes: &[f64; 8]) -> f64 {
    let s0 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let s1 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    s0 + s1
}

/// Sum with the same fixed 8-lane scheme as [`dot_strided`].
#[inline]
fn sum_strided(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for xa in ca {
        for j in 0..8 {
            lanes[j] += xa[j];
        }
    }
    for (j, va) in ra.iter().enumerate() {
        lanes[j] += va;
    }
    let s0 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let s1 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    s0 + s1
}

/// Apply all 27 taps of one 3x3x3 kernel to one output row.
///
/// `rows` holds the nine padded source rows (length `z + 2`) for the
/// `(dx, dy)` offsets in ascending order; `w` holds the 27 weights in
/// `(dx, dy, dz)` order. Each tap is added with its own rounding step, in
/// order, preserving bit-exactness against a one-tap-at-a-time reference.
#[inline]
fn accumulate_row_27(orow: &mut [f64], rows: &[&[f64]; 9], w: &[f64]) {
    let z = orow.len();
    for r in rows {
        assert!(r.len() >= z + 2);
    }
    assert!(w.len() >= 27);
    for i in 0..z {
        // SAFETY: i < z, every row has length >= z + 2 (asserted above), and
        // w has at least 27 entries, so all indices below are in bounds.
        unsafe {
            let mut acc = *orow.get_unchecked(i);
            let mut t = 0;
            for r in rows {
                acc += w.get_unchecked(t) * r.get_unchecked(i);
                acc += w.get_unchecked(t + 1) * r.get_unchecked(i + 1);
                acc += w.get_unchecked(t + 2) * r.get_unchecked(i + 2);
                t += 3;
            }
            *orow.get_unchecked_mut(i) = acc;
        }
    }
}

#[inline]
fn nine_rows<'a>(slab: &'a [f64], xo: usize, yo: usize, py: usize, pz: usize, z: usize) -> [&'a [f64]; 9] {
    let row = |dx: usize, dy: usize| {
        let p = ((xo + dx) * py + (yo + dy)) * pz;
        &slab[p..p + z + 2]
    };
    [
        row(0, 0),
        row(0, 1),
        row(0, 2),
        row(1, 0),
        row(1, 1),
        row(1, 2),
        row(2, 0),
        row(2, 1),
        row(2, 2),
    ]
}

/// 3x3x3 convolution, zero padding 1, stride 1 (cross-correlation semantics).
///
/// `input`: `[b, cin, x, y, z]`, `weight`: `[cout, cin, 3, 3, 3]`,
/// `bias`: `[cout]`. Output: `[b, cout, x, y, z]`.
pub fn conv3d_forward(
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
    let pin = pad_spatial(input, b, cin, x, y, z, 1);
    let (py, pz) = (y + 2, z + 2);
    let pvox = (x + 2) * py * pz;
    let vox = x * y * z;
    let mut out = vec![0.0; b * cout * vox];
    for bi in 0..b {
        for co in 0..cout {
            let out_slab = &mut out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
            out_slab.fill(bias[co]);
            for ci in 0..cin {
                let pin_slab = &pin[(bi * cin + ci) * pvox..(bi * cin + ci + 1) * pvox];
                let w = &weight[(co * cin + ci) * 27..(co * cin + ci) * 27 + 27];
                for xo in 0..x {
                    for yo in 0..y {
                        let rows = nine_rows(pin_slab, xo, yo, py, pz, z);
                        let orow = &mut out_slab[(xo * y + yo) * z..(xo * y + yo) * z + z];
                        accumulate_row_27(orow, &rows, w);
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3d_forward`].
/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv3d_backward(
    input: &[f64],
    b: usize,
    cin: usize,
    x: usize,
    y: usize,
    z: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (py, pz) = (y + 2, z + 2);
    let pvox = (x + 2) * py * pz;
    let vox = x * y * z;

    // grad wrt input: correlate the padded upstream gradient with the
    // spatially flipped kernel, channels transposed. Flipping reverses the
    // tap order, so the weights are re-laid-out once per (co, ci) pair to
    // reuse the fused row kernel.
    let pgout = pad_spatial(grad_out, b, cout, x, y, z, 1);
    let mut gin = vec![0.0; b * cin * vox];
    let mut wf = [0.0f64; 27];
    for bi in 0..b {
        for ci in 0..cin {
            let gin_slab = &mut gin[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
            for co in 0..cout {
                let pg_slab = &pgout[(bi * cout + co) * pvox..(bi * cout + co + 1) * pvox];
                let w = &weight[(co * cin + ci) * 27..(co * cin + ci) * 27 + 27];
                for (t, wt) in wf.iter_mut().enumerate() {
                    *wt = w[26 - t];
                }
                for xi in 0..x {
                    for yi in 0..y {
                        let rows = nine_rows(pg_slab, xi, yi, py, pz, z);
                        let grow = &mut gin_slab[(xi * y + yi) * z..(xi * y + yi) * z + z];
                        accumulate_row_27(grow, &rows, &wf);
                    }
                }
            }
        }
    }

    // grad wrt weight: correlate padded input with the upstream gradient,
    // sweeping each row pair once per (dx, dy) and accumulating all three dz
    // taps from the shared grad-out load.
    let pin = pad_spatial(input, b, cin, x, y, z, 1);
    let mut gweight = vec![0.0; cout * cin * 27];
    for co in 0..cout {
        for ci in 0..cin {
            let mut acc = [0.0f64; 27];
            for bi in 0..b {
                let go_slab = &grad_out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
                let pin_slab = &pin[(bi * cin + ci) * pvox..(bi * cin + ci + 1) * pvox];
                for xo in 0..x {
                    for yo in 0..y {
                        let o = (xo * y + yo) * z;
                        let grow = &go_slab[o..o + z];
                        for dx in 0..3 {
                            for dy in 0..3 {
                                let p = ((xo + dx) * py + (yo + dy)) * pz;
                                let (s0, s1, s2) = dot3_strided(grow, &pin_slab[p..p + z + 2]);
                                let t = (dx * 3 + dy) * 3;
                                acc[t] += s0;
                                acc[t + 1] += s1;
                                acc[t + 2] += s2;
                            }
                        }
                    }
                }
            }
            gweight[(co * cin + ci) * 27..(co * cin + ci) * 27 + 27].copy_from_slice(&acc);
        }
    }

    let mut gbias = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let go_slab = &grad_out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
            gbias[co] += sum_strided(go_slab);
        }
    }

    (gin, gweight, gbias)
}

/// im2col route for the same 3x3x3 convolution: unfolds the padded input into
/// a `[cin*27, vox]` matrix per batch element and applies the weights as a
/// matrix product with the `k` (row) loop outermost, reproducing the direct
/// path's per-voxel accumulation order exactly.
pub fn conv3d_forward_im2col(
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
    let pin = pad_spatial(input, b, cin, x, y, z, 1);
    let (py, pz) = (y + 2, z + 2);
    let pvox = (x + 2) * py * pz;
    let vox = x * y * z;
    let k_total = cin * 27;
    let mut cols = vec![0.0; k_total * vox];
    let mut out = vec![0.0; b * cout * vox];

    for bi in 0..b {
        for ci in 0..cin {
            let pin_slab = &pin[(bi * cin + ci) * pvox..(bi * cin + ci + 1) * pvox];
            for dx in 0..3 {
                for dy in 0..3 {
                    for dz in 0..3 {
                        let k = ci * 27 + (dx * 3 + dy) * 3 + dz;
                        let row = &mut cols[k * vox..(k + 1) * vox];
                        for xo in 0..x {
                            for yo in 0..y {
                                let p = ((xo + dx) * py + (yo + dy)) * pz + dz;
                                let o = (xo * y + yo) * z;
                                row[o..o + z].copy_from_slice(&pin_slab[p..p + z]);
                            }
                        }
                    }
                }
            }
        }
        for co in 0..cout {
            let out_slab = &mut out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
            out_slab.fill(bias[co]);
            for k in 0..k_total {
                let w = weight[co * k_total + k];
                let row = &cols[k * vox..(k + 1) * vox];
                for (ov, rv) in out_slab.iter_mut().zip(row) {
                    *ov += w * *rv;
                }
            }
        }
    }
    out
}

/// Transposed 3-D convolution, kernel 2, stride 2, no padding: the exact
/// geometric inverse of 2x pooling. `input`: `[b, cin, x, y, z]`,
/// `weight`: `[cin, cout, 2, 2, 2]`. Output: `[b, cout, 2x, 2y, 2z]`.
pub fn tconv3d_forward(
    input: &[f64],
    b: usize,
    cin: usize,
    x: usize,
    y: usize,
    z: usize,
    weight: &[f64],
    cout: usize,
) -> Vec<f64> {
    let (ox, oy, oz) = (2 * x, 2 * y, 2 * z);
    let ovox = ox * oy * oz;
    let vox = x * y * z;
    let mut out = vec![0.0; b * cout * ovox];
    for bi in 0..b {
        for co in 0..cout {
            let out_slab = &mut out[(bi * cout + co) * ovox..(bi * cout + co + 1) * ovox];
            for ci in 0..cin {
                let in_slab = &input[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
                let wbase = (ci * cout + co) * 8;
                for dx in 0..2 {
                    for dy in 0..2 {
                        let w0 = weight[wbase + (dx * 2 + dy) * 2];
                        let w1 = weight[wbase + (dx * 2 + dy) * 2 + 1];
                        for xi in 0..x {
                            for yi in 0..y {
                                let irow = &in_slab[(xi * y + yi) * z..(xi * y + yi) * z + z];
                                let obase = ((2 * xi + dx) * oy + (2 * yi + dy)) * oz;
                                let orow = &mut out_slab[obase..obase + oz];
                                for (zi, iv) in irow.iter().enumerate() {
                                    orow[2 * zi] += w0 * *iv;
                                    orow[2 * zi + 1] += w1 * *iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`tconv3d_forward`]. Returns `(grad_input, grad_weight)`.
pub fn tconv3d_backward(
    input: &[f64],
    b: usize,
    cin: usize,
    x: usize,
    y: usize,
    z: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oy, oz) = (2 * y, 2 * z);
    let ovox = 2 * x * oy * oz;
    let vox = x * y * z;

    let mut gin = vec![0.0; b * cin * vox];
    for bi in 0..b {
        for ci in 0..cin {
            let gin_slab = &mut gin[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
            for co in 0..cout {
                let go_slab = &grad_out[(bi * cout + co) * ovox..(bi * cout + co + 1) * ovox];
                let wbase = (ci * cout + co) * 8;
                for dx in 0..2 {
                    for dy in 0..2 {
                        let w0 = weight[wbase + (dx * 2 + dy) * 2];
                        let w1 = weight[wbase + (dx * 2 + dy) * 2 + 1];
                        for xi in 0..x {
                            for yi in 0..y {
                                let gbase = ((2 * xi + dx) * oy + (2 * yi + dy)) * oz;
                                let go_row = &go_slab[gbase..gbase + oz];
                                let grow =
                                    &mut gin_slab[(xi * y + yi) * z..(xi * y + yi) * z + z];
                                for (zi, gv) in grow.iter_mut().enumerate() {
                                    let mut acc = *gv;
                                    acc += w0 * go_row[2 * zi];
                                    acc += w1 * go_row[2 * zi + 1];
                                    *gv = acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut gweight = vec![0.0; cin * cout * 8];
    for ci in 0..cin {
        for co in 0..cout {
            let wbase = (ci * cout + co) * 8;
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let in_slab =
                                &input[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
                            let go_slab = &grad_out
                                [(bi * cout + co) * ovox..(bi * cout + co + 1) * ovox];
                            for xi in 0..x {
                                for yi in 0..y {
                                    let irow =
                                        &in_slab[(xi * y + yi) * z..(xi * y + yi) * z + z];
                                    let gbase =
                                        ((2 * xi + dx) * oy + (2 * yi + dy)) * oz + dz;
                                    let mut lanes = [0.0f64; 8];
                                    let mut zi = 0;
                                    while zi + 8 <= z {
                                        for j in 0..8 {
                                            lanes[j] +=
                                                irow[zi + j] * go_slab[gbase + 2 * (zi + j)];
                                        }
                                        zi += 8;
                                    }
                                    let mut j = 0;
                                    while zi < z {
                                        lanes[j] += irow[zi] * go_slab[gbase + 2 * zi];
                                        zi += 1;
                                        j += 1;
                                    }
                                    let s0 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                                    let s1 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
                                    acc += s0 + s1;
                                }
                            }
                        }
                        gweight[wbase + (dx * 2 + dy) * 2 + dz] = acc;
                    }
                }
            }
        }
    }

    (gin, gweight)
}

/// 1x1x1 convolution (per-voxel channel projection): the classifier head.
/// `weight`: `[cout, cin]`, `bias`: `[cout]`.
pub fn pointwise_forward(
    input: &[f64],
    b: usize,
    cin: usize,
    vox: usize,
    weight: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * vox];
    for bi in 0..b {
        for co in 0..cout {
            let out_slab = &mut out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
            out_slab.fill(bias[co]);
            for ci in 0..cin {
                let w = weight[co * cin + ci];
                let in_slab = &input[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
                for (ov, iv) in out_slab.iter_mut().zip(in_slab) {
                    *ov += w * *iv;
                }
            }
        }
    }
    out
}

/// Backward pass of [`pointwise_forward`].
pub fn pointwise_backward(
    input: &[f64],
    b: usize,
    cin: usize,
    vox: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; b * cin * vox];
    for bi in 0..b {
        for ci in 0..cin {
            let gin_slab = &mut gin[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
            for co in 0..cout {
                let w = weight[co * cin + ci];
                let go_slab = &grad_out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
                for (gv, ov) in gin_slab.iter_mut().zip(go_slab) {
                    *gv += w * *ov;
                }
            }
        }
    }

    let mut gweight = vec![0.0; cout * cin];
    for co in 0..cout {
        for ci in 0..cin {
            let mut acc = 0.0;
            for bi in 0..b {
                let go_slab = &grad_out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox];
                let in_slab = &input[(bi * cin + ci) * vox..(bi * cin + ci + 1) * vox];
                acc += dot_strided(go_slab, in_slab);
            }
            gweight[co * cin + ci] = acc;
        }
    }

    let mut gbias = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            gbias[co] += sum_strided(&grad_out[(bi * cout + co) * vox..(bi * cout + co + 1) * vox]);
        }
    }

    (gin, gweight, gbias)
}

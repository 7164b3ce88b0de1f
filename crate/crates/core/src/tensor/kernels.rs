//! Slice-level numeric kernels behind the graph operations.

/// `c = alpha * a * b + beta * c` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above spell out the bounds every call site guarantees.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·k·k, OH·OW]` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image. `cols` must hold `patch_len × out_len` values
/// and is left holding the unfolded input.
pub(crate) fn conv_forward_item(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeom,
    c_out: usize,
    cols: &mut [f64],
    out: &mut [f64],
) {
    let kk = g.patch_len();
    let p = g.out_len();
    im2col(x, g, cols);
    for (o, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    gemm(c_out, kk, p, 1.0, weight, (kk, 1), cols, (p, 1), 1.0, out, (p, 1));
}

/// Weight gradient contribution of one image, accumulated in place.
pub(crate) fn conv_backward_weight_item(dout: &[f64], cols: &[f64], g: &ConvGeom, c_out: usize, dweight: &mut [f64]) {
    let kk = g.patch_len();
    let p = g.out_len();
    gemm(c_out, p, kk, 1.0, dout, (p, 1), cols, (1, p), 1.0, dweight, (kk, 1));
}

/// Input gradient of one image, accumulated into `dx`.
pub(crate) fn conv_backward_input_item(
    dout: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    c_out: usize,
    dcols: &mut [f64],
    dx: &mut [f64],
) {
    let kk = g.patch_len();
    let p = g.out_len();
    gemm(kk, c_out, p, 1.0, weight, (1, kk), dout, (p, 1), 0.0, dcols, (p, 1));
    col2im(dcols, g, dx);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Group normalization of `[N, C, HW]` data. Returns output, normalized values and
/// per-(item, group) inverse standard deviations.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let len = cg * hw;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for item in 0..n {
        for grp in 0..groups {
            let start = (item * c + grp * cg) * hw;
            let block = &x[start..start + len];
            let mean = block.iter().sum::<f64>() / len as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[item * groups + grp] = is;
            for ci in 0..cg {
                let ch = grp * cg + ci;
                for s in 0..hw {
                    let idx = start + ci * hw + s;
                    let xh = (x[idx] - mean) * is;
                    xhat[idx] = xh;
                    out[idx] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (out, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let cg = c / groups;
    let len = cg * hw;
    if let Some(dgamma) = dgamma {
        for item in 0..n {
            for (ch, dg) in dgamma.iter_mut().enumerate() {
                let start = (item * c + ch) * hw;
                *dg += (0..hw).map(|s| dy[start + s] * xhat[start + s]).sum::<f64>();
            }
        }
    }
    if let Some(dbeta) = dbeta {
        for item in 0..n {
            for (ch, db) in dbeta.iter_mut().enumerate() {
                let start = (item * c + ch) * hw;
                *db += dy[start..start + hw].iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        for item in 0..n {
            for grp in 0..groups {
                let start = (item * c + grp * cg) * hw;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for ci in 0..cg {
                    let g = gamma[grp * cg + ci];
                    for s in 0..hw {
                        let idx = start + ci * hw + s;
                        let d = dy[idx] * g;
                        sum_d += d;
                        sum_dx += d * xhat[idx];
                    }
                }
                let is = inv_std[item * groups + grp];
                let mean_d = sum_d / len as f64;
                let mean_dx = sum_dx / len as f64;
                for ci in 0..cg {
                    let g = gamma[grp * cg + ci];
                    for s in 0..hw {
                        let idx = start + ci * hw + s;
                        dx[idx] += is * (dy[idx] * g - mean_d - xhat[idx] * mean_dx);
                    }
                }
            }
        }
    }
}

/// Reflection index for positions outside `[0, n)` (edge sample not repeated).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

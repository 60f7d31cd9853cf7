//! Numeric kernels behind the tape operations. Everything here works on
//! `f64` scratch buffers with a fixed loop order so results are
//! reproducible bit for bit.

use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Output extent along one spatial axis.
    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(format!(
                "kernel span {span} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Rows of one group's patch matrix.
    pub fn patch_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    pub fn patch_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `lo..hi` whose tap `ox * stride + dx` lands inside a row
/// of length `w`.
fn valid_range(dx: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if dx < 0 { ((-dx + s - 1) / s) as usize } else { 0 };
    let hi = if (w as isize) <= dx {
        0
    } else {
        (((w as isize - dx) + s - 1) / s) as usize
    };
    let hi = hi.min(wo);
    (lo.min(hi), hi)
}

/// Gather the receptive fields of sample `n`, group `g` into a
/// `(cin_g * k * k) x (ho * wo)` matrix.
pub(crate) fn im2col(x: &[f64], geom: &ConvGeom, n: usize, g: usize, col: &mut [f64]) {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        ho,
        wo,
        spec,
        ..
    } = *geom;
    let cin_g = geom.cin_g();
    let p = ho * wo;
    let pad = spec.padding as isize;
    for ci in 0..cin_g {
        let plane = &x[((n * cin) + g * cin_g + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * p;
                let dst = &mut col[row..row + p];
                let dy = (ky * spec.dilation) as isize - pad;
                let dx = (kx * spec.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + dy;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(dx, spec.stride, w, wo);
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if spec.stride == 1 {
                        let start = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[((ox * spec.stride) as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input gradient.
pub(crate) fn col2im(col: &[f64], geom: &ConvGeom, n: usize, g: usize, gx: &mut [f64]) {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        ho,
        wo,
        spec,
        ..
    } = *geom;
    let cin_g = geom.cin_g();
    let p = ho * wo;
    let pad = spec.padding as isize;
    for ci in 0..cin_g {
        let plane = &mut gx[((n * cin) + g * cin_g + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * p;
                let src = &col[row..row + p];
                let dy = (ky * spec.dilation) as isize - pad;
                let dx = (kx * spec.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(dx, spec.stride, w, wo);
                    if spec.stride == 1 {
                        let start = (lo as isize + dx) as usize;
                        for (d, s) in dst[start..start + hi - lo]
                            .iter_mut()
                            .zip(&src[oy * wo + lo..oy * wo + hi])
                        {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[((ox * spec.stride) as isize + dx) as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`, all row-major. Each output entry
/// is summed over `k` in order starting from zero, then added to `c`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const NB: usize = 16;
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        let mut j = 0;
        while j + NB <= n {
            if rows == 4 {
                let mut acc = [[0.0f64; NB]; 4];
                for kk in 0..k {
                    let bv: &[f64; NB] = b[kk * n + j..kk * n + j + NB].try_into().expect("tile width");
                    let av = [
                        a[i * k + kk],
                        a[(i + 1) * k + kk],
                        a[(i + 2) * k + kk],
                        a[(i + 3) * k + kk],
                    ];
                    for r in 0..4 {
                        for t in 0..NB {
                            acc[r][t] += av[r] * bv[t];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    for (cv, av) in c[(i + r) * n + j..(i + r) * n + j + NB].iter_mut().zip(row) {
                        *cv += av;
                    }
                }
            } else {
                for r in i..i + rows {
                    let mut acc = [0.0f64; NB];
                    for kk in 0..k {
                        let av = a[r * k + kk];
                        for (t, bv) in b[kk * n + j..kk * n + j + NB].iter().enumerate() {
                            acc[t] += av * bv;
                        }
                    }
                    for (cv, av) in c[r * n + j..r * n + j + NB].iter_mut().zip(&acc) {
                        *cv += av;
                    }
                }
            }
            j += NB;
        }
        for r in i..i + rows {
            for jj in j..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[r * k + kk] * b[kk * n + jj];
                }
                c[r * n + jj] += acc;
            }
        }
        i += rows;
    }
}

/// Dot product with eight independent lanes, reduced in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

/// `c (m x k) += a (m x n) * b^T` where `b` is `k x n`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            c[i * k + kk] += dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `c (k x n) += a^T * b` where `a` is `m x k` and `b` is `m x n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let crow = &mut c[kk * n..(kk + 1) * n];
        let mut i = 0;
        while i + 4 <= m {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            i += 4;
        }
        while i < m {
            let av = a[i * k + kk];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
            i += 1;
        }
    }
}

/// Per-sample convolution forward into `out` (`cout x ho x wo`, f64).
pub(crate) fn conv_forward_sample(
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    geom: &ConvGeom,
    n: usize,
    col: &mut [f64],
    out: &mut [f64],
) {
    let rows = geom.patch_rows();
    let p = geom.patch_cols();
    let cout_g = geom.cout_g();
    out.fill(0.0);
    for g in 0..geom.spec.groups {
        im2col(x, geom, n, g, col);
        let w_g = &wt[g * cout_g * rows..(g + 1) * cout_g * rows];
        let o_g = &mut out[g * cout_g * p..(g + 1) * cout_g * p];
        gemm_nn(w_g, col, o_g, cout_g, rows, p);
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for o in &mut out[co * p..(co + 1) * p] {
                *o += bv;
            }
        }
    }
}

/// Per-sample convolution backward. `gout` is the sample's output gradient;
/// weight and input gradients are accumulated into `gw` / `gx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    geom: &ConvGeom,
    n: usize,
    col: &mut [f64],
    dcol: &mut [f64],
    gw: Option<&mut [f64]>,
    gx: Option<&mut [f64]>,
) {
    let rows = geom.patch_rows();
    let p = geom.patch_cols();
    let cout_g = geom.cout_g();
    let mut gw = gw;
    let mut gx = gx;
    for g in 0..geom.spec.groups {
        let go_g = &gout[g * cout_g * p..(g + 1) * cout_g * p];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(x, geom, n, g, col);
            let gw_g = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
            gemm_nt(go_g, col, gw_g, cout_g, p, rows);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let w_g = &wt[g * cout_g * rows..(g + 1) * cout_g * rows];
            dcol.fill(0.0);
            gemm_tn(w_g, go_g, dcol, cout_g, rows, p);
            col2im(dcol, geom, n, g, gx);
        }
    }
}

/// Source taps for align-corners=false bilinear resampling along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_formula() {
        let s = ConvSpec::new(1, 2, 2, 1);
        assert_eq!(s.out_len(8, 3).unwrap(), 8);
        let s = ConvSpec::new(2, 1, 1, 1);
        assert_eq!(s.out_len(64, 3).unwrap(), 32);
        assert!(ConvSpec::default().out_len(2, 5).is_err());
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 11);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let r: f64 = (0..k).map(|q| a[i * k + q] * b[q * n + j]).sum();
                assert!((c[i * n + j] - r).abs() < 1e-12);
            }
        }
        // a (m x k) viewed as m x n' with b2 (k' x n').
        let b2: Vec<f64> = (0..3 * k).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut c2 = vec![0.0; m * 3];
        gemm_nt(&a, &b2, &mut c2, m, k, 3);
        for i in 0..m {
            for j in 0..3 {
                let r: f64 = (0..k).map(|q| a[i * k + q] * b2[j * k + q]).sum();
                assert!((c2[i * 3 + j] - r).abs() < 1e-12);
            }
        }
        let bb: Vec<f64> = (0..m * n).map(|i| (i as f64).sqrt()).collect();
        let mut c3 = vec![0.0; k * n];
        gemm_tn(&a, &bb, &mut c3, m, k, n);
        for q in 0..k {
            for j in 0..n {
                let r: f64 = (0..m).map(|i| a[i * k + q] * bb[i * n + j]).sum();
                assert!((c3[q * n + j] - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilinear_taps_identity_and_degenerate() {
        for (o, &(i0, _, l)) in bilinear_taps(8, 8).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(l, 0.0);
        }
        assert!(bilinear_taps(1, 4).iter().all(|&(a, b, _)| a == 0 && b == 0));
    }
}

//! Slice-level numeric kernels shared by the tape ops. All in `f64`.

use alloc::vec;
use alloc::vec::Vec;

// Register tile: MR output rows by NR output columns accumulate across the
// whole inner dimension before touching memory. 4×4 fits the SSE2 register file.
const MR: usize = 4;
const NR: usize = 4;

/// Packing costs `k·n` copies; below these sizes the plain loops win.
fn worth_tiling(m: usize, k: usize, n: usize) -> bool {
    m >= 16 && k >= 16 && n >= NR
}

/// Tiled `out[i][j] += Σ_p lhs(i, p) · b[p·n + j]` where `lhs(i, p)` is
/// `a[i·sa_i + p·sa_p]`. `b` is first repacked into contiguous NR-column
/// panels so the inner loop streams memory in order.
#[inline(always)]
fn gemm_tiled(a: &[f64], (sa_i, sa_p): (usize, usize), b: &[f64], out: &mut [f64], (m, k, n): (usize, usize, usize)) {
    if !worth_tiling(m, k, n) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * sa_i + p * sa_p];
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        return;
    }
    let full = n / NR;
    let mut packed = Vec::with_capacity(full * k * NR);
    for jp in 0..full {
        for p in 0..k {
            packed.extend_from_slice(&b[p * n + jp * NR..p * n + (jp + 1) * NR]);
        }
    }
    let mut a_tile = vec![0.0f64; k * MR];
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        if rows == MR {
            for p in 0..k {
                for r in 0..MR {
                    a_tile[p * MR + r] = a[(i + r) * sa_i + p * sa_p];
                }
            }
            for (jp, panel) in packed.chunks_exact(k * NR).enumerate() {
                let j = jp * NR;
                let mut acc = [[0.0f64; NR]; MR];
                for (ap, bp) in a_tile.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
                    for r in 0..MR {
                        for c in 0..NR {
                            acc[r][c] += ap[r] * bp[c];
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                    for c in 0..NR {
                        o[c] += acc_r[c];
                    }
                }
            }
        }
        let first_col = if rows == MR { full * NR } else { 0 };
        for r in 0..rows {
            for c in first_col..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[(i + r) * sa_i + p * sa_p] * b[p * n + c];
                }
                out[(i + r) * n + c] += s;
            }
        }
        i += MR;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_tiled(a, (k, 1), b, out, (m, k, n));
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if worth_tiling(k, m, n) {
        return gemm_tiled(&transpose(a, m, k), (m, 1), b, out, (k, m, n));
    }
    gemm_tiled(a, (1, k), b, out, (k, m, n));
}

/// `[r×c]` row-major into `[c×r]`.
fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(r * c);
    for j in 0..c {
        t.extend((0..r).map(|i| x[i * c + j]));
    }
    t
}

/// Dot product with independent lane accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const L: usize = 8;
    let mut acc = [0.0f64; L];
    let ar = a.len() / L * L;
    for (x, y) in a.chunks_exact(L).zip(b.chunks_exact(L)) {
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = 0.0;
    for (x, y) in a[ar..].iter().zip(&b[ar..]) {
        s += x * y;
    }
    acc.iter().sum::<f64>() + s
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if worth_tiling(m, k, n) {
        return gemm_tiled(a, (k, 1), &transpose(b, n, k), out, (m, k, n));
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds NHWC input into `[N·OH·OW, KH·KW·Cin]` patches; padding reads as 0.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut dx = vec![0.0; g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let src = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(linear_index, offset)` for every element of `shape`, where
/// `offset` is the dot product of the multi-index with `map_strides`.
pub(crate) fn for_each_mapped(shape: &[usize], map_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..total {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += map_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= map_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        gemm_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
        // b transposed: 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut out2 = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut out2, 2, 3, 2);
        assert_eq!(out, out2);
        // aᵀ where at = a stored 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out3 = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut out3, 3, 2, 2);
        assert_eq!(out, out3);
    }

    #[test]
    fn tiled_paths_match_naive_loops() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (16, 16, 4), (17, 33, 9), (40, 20, 23), (5, 64, 130)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 29) as f64 - 14.0) / 5.0).collect();
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                }
            }
            let close = |got: &[f64]| got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-9);

            let mut out = vec![0.0; m * n];
            gemm_acc(&a, &b, &mut out, m, k, n);
            assert!(close(&out), "nn {m}x{k}x{n}");

            let bt = transpose(&b, k, n);
            let mut out = vec![0.0; m * n];
            gemm_nt_acc(&a, &bt, &mut out, m, k, n);
            assert!(close(&out), "nt {m}x{k}x{n}");

            let at = transpose(&a, m, k);
            let mut out = vec![0.0; m * n];
            gemm_tn_acc(&at, &b, &mut out, k, m, n);
            assert!(close(&out), "tn {m}x{k}x{n}");
        }
    }

    #[test]
    fn mapped_iteration_handles_broadcast_strides() {
        let mut seen = Vec::new();
        for_each_mapped(&[2, 3], &[1, 0], |lin, off| seen.push((lin, off)));
        assert_eq!(seen, [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)]);
    }
}

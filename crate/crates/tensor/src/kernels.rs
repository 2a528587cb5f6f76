//! Raw forward/backward kernels over contiguous buffers.
//!
//! Everything here is single-threaded and allocation-order deterministic, so
//! repeated evaluation on identical inputs is bitwise reproducible.

use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `0..w`.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[C, H, W]` sample into `Ho*Wo` columns of a `[C*K*K, _]`
/// patch matrix whose rows are `row_stride` apart, starting at column `col`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], row_stride: usize, col: usize) {
    let plane_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * row_stride + col..row * row_stride + col + plane_out];
                let (lo, hi) = valid_range(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (v, &s) in out_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters one sample's patch gradients onto its input.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = valid_range(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &s) in dst_row[first..first + hi - lo].iter_mut().zip(src_row) {
                            *d = *d + s;
                        }
                    } else {
                        for (d, &s) in dst_row[first..].iter_mut().step_by(g.stride).zip(src_row) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Planes at most this large are convolved for the whole batch in one
/// product; larger planes already fill a product on their own.
const BATCHED_PLANE: usize = 256;

/// `[N, C, P]` -> `[C, N*P]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * p..(ci * n + ni + 1) * p].copy_from_slice(&x[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`.
fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize, out: &mut [T]) {
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p].copy_from_slice(&x[(ci * n + ni) * p..(ci * n + ni + 1) * p]);
        }
    }
}

/// Patch matrix `[C*K*K, N*P]` of the whole batch, samples side by side.
fn im2col_batch<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![T::zero(); g.rows() * g.n * p];
    for ni in 0..g.n {
        im2col(&x[ni * in_len..(ni + 1) * in_len], g, &mut cols, g.n * p, ni * p);
    }
    cols
}

fn add_bias<T: Scalar>(out: &mut [T], b: &[T], p: usize) {
    for (i, plane) in out.chunks_exact_mut(p).enumerate() {
        let bo = b[i % b.len()];
        for v in plane {
            *v = *v + bo;
        }
    }
}

/// Each output element is one dot product whose summation order does not
/// depend on where its column sits, so batched and per-sample evaluation
/// agree bitwise.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let in_len = g.c_in * g.h * g.w;
    let unit = g.k == 1 && g.stride == 1;
    let mut out = vec![T::zero(); g.n * g.c_out * p];
    if g.n > 1 && p <= BATCHED_PLANE {
        let cols = if unit { to_channel_major(x, g.n, g.c_in, p) } else { im2col_batch(x, g) };
        let mut y = vec![T::zero(); g.c_out * g.n * p];
        gemm(MatRef::new(w, g.c_out, g.rows()), MatRef::new(&cols, g.rows(), g.n * p), T::zero(), &mut y);
        from_channel_major(&y, g.n, g.c_out, p, &mut out);
    } else {
        let mut cols = vec![T::zero(); if unit { 0 } else { g.rows() * p }];
        for (xs, ys) in x.chunks_exact(in_len).zip(out.chunks_exact_mut(g.c_out * p)) {
            if !unit {
                im2col(xs, g, &mut cols, p, 0);
            }
            let patches = if unit { xs } else { &cols[..] };
            gemm(MatRef::new(w, g.c_out, g.rows()), MatRef::new(patches, g.rows(), p), T::zero(), ys);
        }
    }
    if let Some(b) = b {
        add_bias(&mut out, b, p);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.ho * g.wo;
    let in_len = g.c_in * g.h * g.w;
    let unit = g.k == 1 && g.stride == 1;
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for ys in dy.chunks_exact(g.c_out * p) {
            for (d, plane) in db.iter_mut().zip(ys.chunks_exact(p)) {
                *d = plane.iter().fold(*d, |a, &v| a + v);
            }
        }
        db
    });
    let mut dw = need.1.then(|| vec![T::zero(); g.c_out * g.rows()]);
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_len]);
    if g.n > 1 && p <= BATCHED_PLANE {
        let np = g.n * p;
        let dyc = to_channel_major(dy, g.n, g.c_out, p);
        if let Some(dw) = dw.as_mut() {
            let cols = if unit { to_channel_major(x, g.n, g.c_in, p) } else { im2col_batch(x, g) };
            gemm(MatRef::new(&dyc, g.c_out, np), MatRef::t(&cols, g.rows(), np), T::zero(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![T::zero(); g.rows() * np];
            gemm(MatRef::t(w, g.c_out, g.rows()), MatRef::new(&dyc, g.c_out, np), T::zero(), &mut dcols);
            if unit {
                from_channel_major(&dcols, g.n, g.c_in, p, dx);
            } else {
                let mut one = vec![T::zero(); g.rows() * p];
                for ni in 0..g.n {
                    for r in 0..g.rows() {
                        one[r * p..(r + 1) * p].copy_from_slice(&dcols[(r * g.n + ni) * p..(r * g.n + ni + 1) * p]);
                    }
                    col2im_add(&one, g, &mut dx[ni * in_len..(ni + 1) * in_len]);
                }
            }
        }
        return ConvGrads { dx, dw, db };
    }
    let mut cols = vec![T::zero(); if need.0 || need.1 { g.rows() * p } else { 0 }];
    for ni in 0..g.n {
        let dys = &dy[ni * g.c_out * p..(ni + 1) * g.c_out * p];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[ni * in_len..(ni + 1) * in_len];
            if !unit {
                im2col(xs, g, &mut cols, p, 0);
            }
            let patches = if unit { xs } else { &cols[..] };
            gemm(MatRef::new(dys, g.c_out, p), MatRef::t(patches, g.rows(), p), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * in_len..(ni + 1) * in_len];
            if unit {
                gemm(MatRef::t(w, g.c_out, g.rows()), MatRef::new(dys, g.c_out, p), T::zero(), dxs);
            } else {
                gemm(MatRef::t(w, g.c_out, g.rows()), MatRef::new(dys, g.c_out, p), T::zero(), &mut cols);
                col2im_add(&cols, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Interleaves `[C_out*4, P]` tap rows into `[C_out, 2H, 2W]`.
fn scatter_taps<T: Scalar>(cols: &[T], h: usize, wd: usize, ys: &mut [T]) {
    let p = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    for (row_idx, row) in cols.chunks_exact(p).enumerate() {
        let (o, a, b) = (row_idx / 4, (row_idx / 2) % 2, row_idx % 2);
        let dst = &mut ys[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..h {
            for j in 0..wd {
                dst[(2 * i + a) * ow + 2 * j + b] = row[i * wd + j];
            }
        }
    }
}

/// Adjoint of [`scatter_taps`].
fn gather_taps<T: Scalar>(dys: &[T], h: usize, wd: usize, cols: &mut [T]) {
    let p = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    for (row_idx, row) in cols.chunks_exact_mut(p).enumerate() {
        let (o, a, b) = (row_idx / 4, (row_idx / 2) % 2, row_idx % 2);
        let src = &dys[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..h {
            for j in 0..wd {
                row[i * wd + j] = src[(2 * i + a) * ow + 2 * j + b];
            }
        }
    }
}

/// 2x2 stride-2 transposed convolution; weight layout `[C_in, C_out, 2, 2]`.
pub(crate) fn conv_t2_forward<T: Scalar>(x: &[T], w: &[T], n: usize, c_in: usize, h: usize, wd: usize, c_out: usize) -> Vec<T> {
    let p = h * wd;
    let taps = c_out * 4 * p;
    let mut out = vec![T::zero(); n * taps];
    if n > 1 && p <= BATCHED_PLANE {
        let xc = to_channel_major(x, n, c_in, p);
        let mut cols = vec![T::zero(); n * taps];
        gemm(MatRef::t(w, c_in, c_out * 4), MatRef::new(&xc, c_in, n * p), T::zero(), &mut cols);
        let mut per = vec![T::zero(); n * taps];
        from_channel_major(&cols, n, c_out * 4, p, &mut per);
        for (cs, ys) in per.chunks_exact(taps).zip(out.chunks_exact_mut(taps)) {
            scatter_taps(cs, h, wd, ys);
        }
        return out;
    }
    let mut cols = vec![T::zero(); taps];
    for (xs, ys) in x.chunks_exact(c_in * p).zip(out.chunks_exact_mut(taps)) {
        gemm(MatRef::t(w, c_in, c_out * 4), MatRef::new(xs, c_in, p), T::zero(), &mut cols);
        scatter_taps(&cols, h, wd, ys);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t2_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = h * wd;
    let taps = c_out * 4 * p;
    let mut dx = need.0.then(|| vec![T::zero(); n * c_in * p]);
    let mut dw = need.1.then(|| vec![T::zero(); c_in * c_out * 4]);
    if n > 1 && p <= BATCHED_PLANE {
        let mut per = vec![T::zero(); n * taps];
        for (ds, cs) in dy.chunks_exact(taps).zip(per.chunks_exact_mut(taps)) {
            gather_taps(ds, h, wd, cs);
        }
        let dcols = to_channel_major(&per, n, c_out * 4, p);
        if let Some(dx) = dx.as_mut() {
            let mut dxc = vec![T::zero(); n * c_in * p];
            gemm(MatRef::new(w, c_in, c_out * 4), MatRef::new(&dcols, c_out * 4, n * p), T::zero(), &mut dxc);
            from_channel_major(&dxc, n, c_in, p, dx);
        }
        if let Some(dw) = dw.as_mut() {
            let xc = to_channel_major(x, n, c_in, p);
            gemm(MatRef::new(&xc, c_in, n * p), MatRef::t(&dcols, c_out * 4, n * p), T::zero(), dw);
        }
        return (dx, dw);
    }
    let mut dcols = vec![T::zero(); taps];
    for ni in 0..n {
        gather_taps(&dy[ni * taps..(ni + 1) * taps], h, wd, &mut dcols);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * c_in * p..(ni + 1) * c_in * p];
            gemm(MatRef::new(w, c_in, c_out * 4), MatRef::new(&dcols, c_out * 4, p), T::zero(), dxs);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[ni * c_in * p..(ni + 1) * c_in * p];
            gemm(MatRef::new(xs, c_in, p), MatRef::t(&dcols, c_out * 4, p), T::one(), dw);
        }
    }
    (dx, dw)
}

/// Returns `(y, mean, inv_std)` with statistics per `(n, c)` plane.
pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    p: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(n * c);
    let mut inv_stds = Vec::with_capacity(n * c);
    let pn = T::from_usize(p).unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * p..(ni * c + ci + 1) * p];
            let mean = plane.iter().fold(T::zero(), |a, &v| a + v) / pn;
            let var = plane.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / pn;
            let inv_std = T::one() / (var + eps).sqrt();
            let out = &mut y[(ni * c + ci) * p..(ni * c + ci + 1) * p];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = gamma[ci] * ((v - mean) * inv_std) + beta[ci];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
    }
    (y, means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    p: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let pn = T::from_usize(p).unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let idx = ni * c + ci;
            let range = idx * p..(idx + 1) * p;
            let (xs, dys) = (&x[range.clone()], &dy[range.clone()]);
            let (m, is) = (mean[idx], inv_std[idx]);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for (&xv, &g) in xs.iter().zip(dys) {
                let xhat = (xv - m) * is;
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * xhat;
            }
            dgamma[ci] = dgamma[ci] + sum_dy_xhat;
            dbeta[ci] = dbeta[ci] + sum_dy;
            let scale = gamma[ci] * is / pn;
            for ((d, &xv), &g) in dx[range].iter_mut().zip(xs).zip(dys) {
                let xhat = (xv - m) * is;
                *d = scale * (pn * g - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out = &mut y[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut total = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in out.iter_mut() {
            *o = *o / total;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for r in 0..rows {
        let range = r * cols..(r + 1) * cols;
        let dot = y[range.clone()].iter().zip(&dy[range.clone()]).fold(T::zero(), |a, (&p, &g)| a + p * g);
        for ((d, &p), &g) in dx[range.clone()].iter_mut().zip(&y[range.clone()]).zip(&dy[range]) {
            *d = p * (g - dot);
        }
    }
    dx
}

pub(crate) fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let mut c = vec![T::zero(); a.rows * b.cols];
    gemm(a, b, T::zero(), &mut c);
    c
}

/// Per-axis source taps for half-pixel bilinear sampling: `(i0, i1, frac)`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Nearest source index per destination index (pixel-center rule).
pub(crate) fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst).map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src - 1)).collect()
}

pub(crate) fn resize_bilinear_plane<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy, gy) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx, gx) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
            let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
            dst[oy * ow + ox] = top * gy + bottom * fy;
        }
    }
}

pub(crate) fn resize_bilinear_plane_backward<T: Scalar>(dy: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy, gy) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx, gx) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
            let g = dy[oy * ow + ox];
            dx[y0 * w + x0] = dx[y0 * w + x0] + g * gy * gx;
            dx[y0 * w + x1] = dx[y0 * w + x1] + g * gy * fx;
            dx[y1 * w + x0] = dx[y1 * w + x0] + g * fy * gx;
            dx[y1 * w + x1] = dx[y1 * w + x1] + g * fy * fx;
        }
    }
}

pub(crate) fn resize_nearest_plane<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    let ty = nearest_taps(h, oh);
    let tx = nearest_taps(w, ow);
    for (oy, &sy) in ty.iter().enumerate() {
        for (ox, &sx) in tx.iter().enumerate() {
            dst[oy * ow + ox] = src[sy * w + sx];
        }
    }
}

pub(crate) fn resize_nearest_plane_backward<T: Scalar>(dy: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let ty = nearest_taps(h, oh);
    let tx = nearest_taps(w, ow);
    for (oy, &sy) in ty.iter().enumerate() {
        for (ox, &sx) in tx.iter().enumerate() {
            dx[sy * w + sx] = dx[sy * w + sx] + dy[oy * ow + ox];
        }
    }
}

/// Per-sample soft dice terms `(intersection, sum p^2, sum m^2)`.
pub(crate) fn dice_terms<T: Scalar>(p: &[T], m: &[T]) -> (T, T, T) {
    p.iter().zip(m).fold((T::zero(), T::zero(), T::zero()), |(i, pp, mm), (&a, &b)| (i + a * b, pp + a * a, mm + b * b))
}

//! Low-level numeric kernels behind the graph ops.
//!
//! Convolution is im2col + GEMM, chunked over output rows so the column
//! buffer stays small. Chunking depends only on shapes, so results are
//! bitwise identical no matter how many worker threads execute the tasks.

use super::real::Real;
#[cfg(not(feature = "std"))] // inherent f64 methods replace this under std
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;

/// Upper bound on column-buffer elements per task (~8 MB in f32).
const COL_ELEM_BUDGET: usize = 1 << 21;

#[cfg(feature = "parallel")]
pub(crate) fn map_tasks<I: Sync, O: Send, F: Fn(&I) -> O + Sync>(tasks: &[I], f: F) -> Vec<O> {
    use rayon::prelude::*;
    tasks.par_iter().map(|t| f(t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_tasks<I: Sync, O: Send, F: Fn(&I) -> O + Sync>(tasks: &[I], f: F) -> Vec<O> {
    tasks.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    chunk: usize,
    f: F,
) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, s)| f(i, s));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    chunk: usize,
    f: F,
) {
    for (i, s) in data.chunks_mut(chunk).enumerate() {
        f(i, s);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output spatial extent, or None when the kernel does not fit.
    pub fn out_extent(dim: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
        let span = dil.checked_mul(kernel - 1)? + 1;
        let padded = dim + 2 * pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    fn k_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn rows_per_chunk(&self) -> usize {
        let per_row = self.k_len() * self.out_w;
        (COL_ELEM_BUDGET / per_row.max(1)).clamp(1, self.out_h)
    }
}

/// Fill a column buffer for output rows `[r0, r1)` of one image.
/// Layout: K = c_in*k*k rows by L = (r1-r0)*out_w columns, row-major.
fn im2col_chunk<T: Real>(x_img: &[T], g: &ConvGeom, r0: usize, r1: usize, col: &mut [T]) {
    let l = (r1 - r0) * g.out_w;
    let (h, w, k) = (g.h, g.w, g.kernel);
    for ci in 0..g.c_in {
        let plane = &x_img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * l;
                let off_x = (kx * g.dilation) as isize - g.pad as isize;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let seg = &mut col[base + (oy - r0) * g.out_w..base + (oy - r0 + 1) * g.out_w];
                    if iy < 0 || iy >= h as isize {
                        continue; // stays zero
                    }
                    let xrow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let ox_lo = (-off_x).max(0) as usize;
                        let ox_hi = ((w as isize - off_x).max(0) as usize).min(g.out_w);
                        if ox_lo < ox_hi {
                            let src = (ox_lo as isize + off_x) as usize;
                            seg[ox_lo..ox_hi].copy_from_slice(&xrow[src..src + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for (ox, s) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            if ix >= 0 && ix < w as isize {
                                *s = xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-gradient buffer back into one image gradient.
fn col2im_chunk_add<T: Real>(dcol: &[T], g: &ConvGeom, r0: usize, r1: usize, dx_img: &mut [T]) {
    let l = (r1 - r0) * g.out_w;
    let (h, w, k) = (g.h, g.w, g.kernel);
    for ci in 0..g.c_in {
        let plane = &mut dx_img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * l;
                let off_x = (kx * g.dilation) as isize - g.pad as isize;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let seg = &dcol[base + (oy - r0) * g.out_w..base + (oy - r0 + 1) * g.out_w];
                    let xrow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let ox_lo = (-off_x).max(0) as usize;
                        let ox_hi = ((w as isize - off_x).max(0) as usize).min(g.out_w);
                        if ox_lo < ox_hi {
                            let src = (ox_lo as isize + off_x) as usize;
                            for (d, s) in xrow[src..src + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&seg[ox_lo..ox_hi])
                            {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in seg.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            if ix >= 0 && ix < w as isize {
                                xrow[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], wgt: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let k_len = g.k_len();
    let out_hw = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.n * g.c_out * out_hw];
    let chunk = g.rows_per_chunk();
    let mut tasks = Vec::new();
    for n in 0..g.n {
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + chunk).min(g.out_h);
            tasks.push((n, r0, r1));
            r0 = r1;
        }
    }
    let img_len = g.c_in * g.h * g.w;
    let results = map_tasks(&tasks, |&(n, r0, r1)| {
        let l = (r1 - r0) * g.out_w;
        let mut col = vec![T::zero(); k_len * l];
        im2col_chunk(&x[n * img_len..(n + 1) * img_len], g, r0, r1, &mut col);
        let mut tmp = vec![T::zero(); g.c_out * l];
        unsafe {
            T::gemm(
                g.c_out,
                k_len,
                l,
                T::one(),
                wgt.as_ptr(),
                k_len as isize,
                1,
                col.as_ptr(),
                l as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        tmp
    });
    for (&(n, r0, r1), tmp) in tasks.iter().zip(&results) {
        let l = (r1 - r0) * g.out_w;
        for co in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + co) * out_hw + r0 * g.out_w..][..l];
            let b = bias[co];
            for (d, s) in dst.iter_mut().zip(&tmp[co * l..(co + 1) * l]) {
                *d = *s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    wgt: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let k_len = g.k_len();
    let out_hw = g.out_h * g.out_w;
    let img_len = g.c_in * g.h * g.w;
    let chunk = g.rows_per_chunk();
    let chunks: Vec<(usize, usize)> = {
        let mut v = Vec::new();
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + chunk).min(g.out_h);
            v.push((r0, r1));
            r0 = r1;
        }
        v
    };

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let seg = &gout[(n * g.c_out + co) * out_hw..][..out_hw];
                for &v in seg {
                    *d += v;
                }
            }
        }
        db
    });

    let dw = need_dw.then(|| {
        let imgs: Vec<usize> = (0..g.n).collect();
        let partials = map_tasks(&imgs, |&n| {
            let mut pdw = vec![T::zero(); g.c_out * k_len];
            for &(r0, r1) in &chunks {
                let l = (r1 - r0) * g.out_w;
                let mut col = vec![T::zero(); k_len * l];
                im2col_chunk(&x[n * img_len..(n + 1) * img_len], g, r0, r1, &mut col);
                let a = unsafe { gout.as_ptr().add(n * g.c_out * out_hw + r0 * g.out_w) };
                unsafe {
                    T::gemm(
                        g.c_out,
                        l,
                        k_len,
                        T::one(),
                        a,
                        out_hw as isize,
                        1,
                        col.as_ptr(),
                        1,
                        l as isize,
                        T::one(),
                        pdw.as_mut_ptr(),
                        k_len as isize,
                        1,
                    );
                }
            }
            pdw
        });
        let mut dw = vec![T::zero(); g.c_out * k_len];
        for p in &partials {
            for (d, s) in dw.iter_mut().zip(p) {
                *d += *s;
            }
        }
        dw
    });

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * img_len];
        for_each_chunk(&mut dx, img_len, |n, dx_img| {
            for &(r0, r1) in &chunks {
                let l = (r1 - r0) * g.out_w;
                let mut dcol = vec![T::zero(); k_len * l];
                let b = unsafe { gout.as_ptr().add(n * g.c_out * out_hw + r0 * g.out_w) };
                unsafe {
                    T::gemm(
                        k_len,
                        g.c_out,
                        l,
                        T::one(),
                        wgt.as_ptr(),
                        1,
                        k_len as isize,
                        b,
                        out_hw as isize,
                        1,
                        T::zero(),
                        dcol.as_mut_ptr(),
                        l as isize,
                        1,
                    );
                }
                col2im_chunk_add(&dcol, g, r0, r1, dx_img);
            }
        });
        dx
    });

    ConvGrads { dx, dw, db }
}

/// Max pooling with implicit -inf padding. Returns (values, argmax flat
/// indices into the input buffer); ties pick the first cell in row-major
/// window order. `None` argmax (a window with no valid cell) is an error
/// reported by the caller.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Option<(Vec<T>, Vec<u32>)> {
    debug_assert!(x.len() < u32::MAX as usize);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let mut arg = vec![0u32; out.len()];
    let mut o = 0usize;
    for img in 0..n {
        for ch in 0..c {
            let plane_off = (img * c + ch) * h * w;
            let plane = &x[plane_off..plane_off + h * w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = plane[iy as usize * w + ix as usize];
                            if best.map_or(true, |(b, _)| v > b) {
                                best = Some((v, plane_off + iy as usize * w + ix as usize));
                            }
                        }
                    }
                    let (v, idx) = best?;
                    out[o] = v;
                    arg[o] = idx as u32;
                    o += 1;
                }
            }
        }
    }
    Some((out, arg))
}

/// Per-dimension bilinear interpolation table with half-pixel centers:
/// src = (dst + 0.5) * in/out - 0.5, clamped to the valid range.
pub(crate) fn lerp_table(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_dim - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(
    x: &[T],
    lead: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys = lerp_table(h, out_h);
    let xs = lerp_table(w, out_w);
    let one = T::one();
    let mut out = vec![T::zero(); lead * out_h * out_w];
    for l in 0..lead {
        let src = &x[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * out_h * out_w..(l + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::fr(fy);
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::fr(fx);
                let top = (one - fx) * r0[x0] + fx * r0[x1];
                let bot = (one - fx) * r1[x0] + fx * r1[x1];
                row[ox] = (one - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    gout: &[T],
    lead: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys = lerp_table(h, out_h);
    let xs = lerp_table(w, out_w);
    let one = T::one();
    let mut dx = vec![T::zero(); lead * h * w];
    for l in 0..lead {
        let src = &gout[l * out_h * out_w..(l + 1) * out_h * out_w];
        let dst = &mut dx[l * h * w..(l + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::fr(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::fr(fx);
                let g = src[oy * out_w + ox];
                dst[y0 * w + x0] += (one - fy) * (one - fx) * g;
                dst[y0 * w + x1] += (one - fy) * fx * g;
                dst[y1 * w + x0] += fy * (one - fx) * g;
                dst[y1 * w + x1] += fy * fx * g;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over N*H*W.
pub(crate) fn bn_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::fr((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for img in 0..n {
            let seg = &x[(img * c + ch) * hw..][..hw];
            for &v in seg {
                s += v;
            }
        }
        let mu = s / m;
        let mut sq = T::zero();
        for img in 0..n {
            let seg = &x[(img * c + ch) * hw..][..hw];
            for &v in seg {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}

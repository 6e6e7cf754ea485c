//! Raw batched kernels. Layouts are row-major `[N, C, H, W]`; weights are
//! `[C_out, C_in, k, k]` for convolutions and `[C_in, C_out, k, k]` for
//! transposed convolutions.

use super::Real;

/// Output size of a valid (unpadded) convolution or pooling window.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, output_padding: usize) -> usize {
    (input - 1) * stride + kernel + output_padding
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    rsa: isize,
    csa: isize,
    b_len: usize,
    rsb: isize,
    csb: isize,
    c_len: usize,
    rsc: isize,
    csc: isize,
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    assert!(last(m, k, rsa, csa) <= a_len, "gemm: A out of bounds");
    assert!(last(k, n, rsb, csb) <= b_len, "gemm: B out of bounds");
    assert!(last(m, n, rsc, csc) <= c_len, "gemm: C out of bounds");
}

/// `C (m x n) = op(A) * op(B) + beta * C` where op(A) is `m x k` and op(B) is
/// `k x n`. `trans_a` means A is stored as `k x m` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Geometry shared by convolution-style kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Grid of window positions (the conv output size).
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Unfolds one image `[C, H, W]` into column block `col_offset..col_offset+P`
/// of a `[C*k*k, total_cols]` matrix.
pub(crate) fn im2col<T: Real>(img: &[T], win: &Window, cols: &mut [T], total_cols: usize, col_offset: usize) {
    let (k, s) = (win.kernel, win.stride);
    for c in 0..win.channels {
        let plane = &img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * total_cols + col_offset..row * total_cols + col_offset + win.positions()];
                for gy in 0..win.grid_h {
                    let src_row = &plane[(gy * s + ky) * win.width..];
                    let out = &mut dst[gy * win.grid_w..(gy + 1) * win.grid_w];
                    if s == 1 {
                        out.copy_from_slice(&src_row[kx..kx + win.grid_w]);
                    } else {
                        for (gx, o) in out.iter_mut().enumerate() {
                            *o = src_row[gx * s + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column block back into an image,
/// accumulating overlaps.
pub(crate) fn col2im<T: Real>(cols: &[T], win: &Window, img: &mut [T], total_cols: usize, col_offset: usize) {
    let (k, s) = (win.kernel, win.stride);
    for c in 0..win.channels {
        let plane = &mut img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * total_cols + col_offset..row * total_cols + col_offset + win.positions()];
                for gy in 0..win.grid_h {
                    let dst_row = &mut plane[(gy * s + ky) * win.width..];
                    let inp = &src[gy * win.grid_w..(gy + 1) * win.grid_w];
                    for (gx, &v) in inp.iter().enumerate() {
                        dst_row[gx * s + kx] += v;
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` -> `[C, N*P]`.
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`.
pub(crate) fn channel_major_to_batch<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out_size(self.h, self.kernel, self.stride)
    }
    pub fn out_w(&self) -> usize {
        conv_out_size(self.w, self.kernel, self.stride)
    }
    fn window(&self) -> Window {
        Window {
            channels: self.c_in,
            height: self.h,
            width: self.w,
            kernel: self.kernel,
            stride: self.stride,
            grid_h: self.out_h(),
            grid_w: self.out_w(),
        }
    }
    fn unfold<T: Real>(&self, x: &[T]) -> Vec<T> {
        let win = self.window();
        let total = self.batch * win.positions();
        let mut cols = vec![T::zero(); win.rows() * total];
        let img = self.c_in * self.h * self.w;
        for b in 0..self.batch {
            im2col(&x[b * img..(b + 1) * img], &win, &mut cols, total, b * win.positions());
        }
        cols
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let win = g.window();
    let p = win.positions();
    let total = g.batch * p;
    let cols = g.unfold(x);
    let mut out = vec![T::zero(); g.c_out * total];
    for (o, row) in out.chunks_mut(total).enumerate() {
        row.fill(bias[o]);
    }
    matmul(w, false, &cols, false, &mut out, g.c_out, win.rows(), total, T::one());
    channel_major_to_batch(&out, g.batch, g.c_out, p)
}

/// Returns `(dx, dw, db)`; `dx` is `None` when not requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let win = g.window();
    let p = win.positions();
    let total = g.batch * p;
    let dy_cm = batch_to_channel_major(dy, g.batch, g.c_out, p);
    let db: Vec<T> = dy_cm.chunks(total).map(|r| r.iter().copied().sum()).collect();
    let cols = g.unfold(x);
    let mut dw = vec![T::zero(); w.len()];
    matmul(
        &dy_cm,
        false,
        &cols,
        true,
        &mut dw,
        g.c_out,
        total,
        win.rows(),
        T::zero(),
    );
    drop(cols);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); win.rows() * total];
        matmul(
            w,
            true,
            &dy_cm,
            false,
            &mut dcols,
            win.rows(),
            g.c_out,
            total,
            T::zero(),
        );
        let img = g.c_in * g.h * g.w;
        let mut dx = vec![T::zero(); g.batch * img];
        for b in 0..g.batch {
            col2im(&dcols, &win, &mut dx[b * img..(b + 1) * img], total, b * p);
        }
        dx
    });
    (dx, dw, db)
}

pub(crate) struct ConvTGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub output_padding: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        conv_transpose_out_size(self.h, self.kernel, self.stride, self.output_padding)
    }
    pub fn out_w(&self) -> usize {
        conv_transpose_out_size(self.w, self.kernel, self.stride, self.output_padding)
    }
    /// Window over the *output* image whose grid is the input size.
    fn window(&self) -> Window {
        Window {
            channels: self.c_out,
            height: self.out_h(),
            width: self.out_w(),
            kernel: self.kernel,
            stride: self.stride,
            grid_h: self.h,
            grid_w: self.w,
        }
    }
}

pub(crate) fn conv_transpose2d_forward<T: Real>(g: &ConvTGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let win = g.window();
    let p = g.h * g.w;
    let total = g.batch * p;
    let x_cm = batch_to_channel_major(x, g.batch, g.c_in, p);
    // cols[Co*k*k, N*H*W] = W^T (W stored [Ci, Co*k*k]) * x
    let mut cols = vec![T::zero(); win.rows() * total];
    matmul(w, true, &x_cm, false, &mut cols, win.rows(), g.c_in, total, T::zero());
    let (oh, ow) = (g.out_h(), g.out_w());
    let img = g.c_out * oh * ow;
    let mut out = vec![T::zero(); g.batch * img];
    for b in 0..g.batch {
        let dst = &mut out[b * img..(b + 1) * img];
        col2im(&cols, &win, dst, total, b * p);
        for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[c]);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    g: &ConvTGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let win = g.window();
    let p = g.h * g.w;
    let total = g.batch * p;
    let (oh, ow) = (g.out_h(), g.out_w());
    let img = g.c_out * oh * ow;
    let mut db = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for (c, plane) in dy[b * img..(b + 1) * img].chunks(oh * ow).enumerate() {
            db[c] += plane.iter().copied().sum();
        }
    }
    let mut dcols = vec![T::zero(); win.rows() * total];
    for b in 0..g.batch {
        im2col(&dy[b * img..(b + 1) * img], &win, &mut dcols, total, b * p);
    }
    let x_cm = batch_to_channel_major(x, g.batch, g.c_in, p);
    let mut dw = vec![T::zero(); w.len()];
    matmul(
        &x_cm,
        false,
        &dcols,
        true,
        &mut dw,
        g.c_in,
        total,
        win.rows(),
        T::zero(),
    );
    let dx = need_dx.then(|| {
        let mut dx_cm = vec![T::zero(); g.c_in * total];
        matmul(
            w,
            false,
            &dcols,
            false,
            &mut dx_cm,
            g.c_in,
            win.rows(),
            total,
            T::zero(),
        );
        channel_major_to_batch(&dx_cm, g.batch, g.c_in, p)
    });
    (dx, dw, db)
}

pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        conv_out_size(self.h, self.kernel, self.stride)
    }
    pub fn out_w(&self) -> usize {
        conv_out_size(self.w, self.kernel, self.stride)
    }
}

pub(crate) fn avg_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let scale = T::one() / T::from_f64((k * k) as f64);
    let mut out = vec![T::zero(); g.planes * oh * ow];
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = &plane[(oy * s + ky) * g.w + ox * s..];
                    acc += row[..k].iter().copied().sum::<T>();
                }
                out[(p * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let scale = T::one() / T::from_f64((k * k) as f64);
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let plane = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = dy[(p * oh + oy) * ow + ox] * scale;
                for ky in 0..k {
                    let row = &mut plane[(oy * s + ky) * g.w + ox * s..];
                    row[..k].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    dx
}

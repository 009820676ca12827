//! im2col convolution kernels.
//!
//! Patches are unrolled per image into a `[positions, in_ch * k * k]` matrix
//! and both passes reduce to GEMM. Patch elements are ordered (channel, ky,
//! kx), matching the `[out_ch, in_ch, k, k]` weight layout. The GEMM output
//! is position-major and gets transposed back to channel-major in tiles.
//!
//! Work is split into fixed-size image chunks ([`par::IMAGE_CHUNK`]); the
//! weight-gradient reduction sums per-chunk partials in chunk order, so the
//! results are identical with and without the `parallel` feature.

use serde::{Deserialize, Serialize};

use super::par::{self, IMAGE_CHUNK};
use crate::error::{AtcError, Result};

/// 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel_size, stride, padding: 0 }
    }

    /// Output size along one spatial dimension:
    /// `floor((in - kernel + 2 pad) / stride) + 1`, which must be positive.
    pub fn out_dim(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel_size == 0 {
            return Err(AtcError::config("kernel size and stride must be >= 1"));
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(AtcError::config(format!(
                "conv input {} (pad {}) smaller than kernel {}",
                input, self.padding, self.kernel_size
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }
}

/// Unroll one image `[C, H, W]` into `cols` rows `[oh*ow, C*k*k]`.
#[allow(clippy::too_many_arguments)]
fn im2col_image(x: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = spec.kernel_size;
    let kdim = c * k * k;
    let stride = spec.stride;
    if spec.padding == 0 {
        // every patch fully in bounds; indices are bounded by the out_dim
        // formula: (oh-1)*stride + k-1 <= h-1, same along x
        debug_assert!((oh - 1) * stride + k - 1 < h && (ow - 1) * stride + k - 1 < w);
        debug_assert!(cols.len() == oh * ow * kdim && x.len() == c * h * w);
        unsafe {
            let mut p = 0usize;
            for oy in 0..oh {
                let base_y = oy * stride;
                for ox in 0..ow {
                    let base_x = ox * stride;
                    for ci in 0..c {
                        let plane = x.as_ptr().add(ci * h * w);
                        for ky in 0..k {
                            let s = plane.add((base_y + ky) * w + base_x);
                            for kx in 0..k {
                                *cols.get_unchecked_mut(p) = *s.add(kx);
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    let pad = spec.padding as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * kdim..(oy * ow + ox + 1) * kdim];
            let base_y = (oy * stride) as isize - pad;
            let base_x = (ox * stride) as isize - pad;
            let mut p = 0;
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        row[p..p + k].fill(0.0);
                        p += k;
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..k {
                        let ix = base_x + kx as isize;
                        row[p] = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add one image's column gradient back to `[C, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im_image(dcols: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, dx: &mut [f32]) {
    let k = spec.kernel_size;
    let kdim = c * k * k;
    let stride = spec.stride;
    if spec.padding == 0 {
        debug_assert!((oh - 1) * stride + k - 1 < h && (ow - 1) * stride + k - 1 < w);
        debug_assert!(dcols.len() == oh * ow * kdim && dx.len() == c * h * w);
        unsafe {
            let mut p = 0usize;
            for oy in 0..oh {
                let base_y = oy * stride;
                for ox in 0..ow {
                    let base_x = ox * stride;
                    for ci in 0..c {
                        let plane = dx.as_mut_ptr().add(ci * h * w);
                        for ky in 0..k {
                            let d = plane.add((base_y + ky) * w + base_x);
                            for kx in 0..k {
                                *d.add(kx) += *dcols.get_unchecked(p);
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    let pad = spec.padding as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * kdim..(oy * ow + ox + 1) * kdim];
            let base_y = (oy * stride) as isize - pad;
            let base_x = (ox * stride) as isize - pad;
            let mut p = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        p += k;
                        continue;
                    }
                    for kx in 0..k {
                        let ix = base_x + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci * h + iy as usize) * w + ix as usize] += row[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

const TILE: usize = 32;

/// `dst[c * rows + r] = act(src[r * cols + c] + add[c])`, in cache tiles;
/// `act` clamps at zero when `relu` is set.
fn transpose_add(src: &[f32], rows: usize, cols: usize, add: &[f32], relu: bool, dst: &mut [f32]) {
    debug_assert!(src.len() == rows * cols && dst.len() == rows * cols && add.len() == cols);
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            unsafe {
                for r in r0..r1 {
                    let row = src.as_ptr().add(r * cols);
                    for c in c0..c1 {
                        let v = *row.add(c) + *add.get_unchecked(c);
                        *dst.get_unchecked_mut(c * rows + r) = if relu { v.max(0.0) } else { v };
                    }
                }
            }
        }
    }
}

/// `dst[r * cols + c] = src[c * rows + r] * (gate[c * rows + r] > 0)`:
/// transposes channel-major gradient rows to position-major while applying
/// the ReLU mask from the forward output.
fn transpose_back_masked(src: &[f32], gate: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert!(src.len() == rows * cols && dst.len() == rows * cols && gate.len() == rows * cols);
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            unsafe {
                for r in r0..r1 {
                    for c in c0..c1 {
                        let v = *src.get_unchecked(c * rows + r);
                        let keep = *gate.get_unchecked(c * rows + r) > 0.0;
                        *dst.get_unchecked_mut(r * cols + c) = if keep { v } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// `dst[c * rows + r] = src[r * cols + c]`, in cache tiles.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert!(src.len() == rows * cols && dst.len() == rows * cols);
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            unsafe {
                for r in r0..r1 {
                    let row = src.as_ptr().add(r * cols);
                    for c in c0..c1 {
                        *dst.get_unchecked_mut(c * rows + r) = *row.add(c);
                    }
                }
            }
        }
    }
}

/// `C[m,n] = A[m,k] @ B` with arbitrary strides, row blocks computed in
/// parallel. Row partitioning leaves each row's reduction order unchanged,
/// so the result is independent of the split.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_rows(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    row_chunk: usize,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    #[derive(Clone, Copy)]
    struct SharedPtr(*const f32);
    unsafe impl Sync for SharedPtr {}
    unsafe impl Send for SharedPtr {}
    impl SharedPtr {
        fn get(self) -> *const f32 {
            self.0
        }
    }
    let a_ptr = SharedPtr(a.as_ptr());
    let b_ptr = SharedPtr(b.as_ptr());
    par::for_each_chunk_mut(c, row_chunk * n, move |ci, c_block| {
        let r0 = ci * row_chunk;
        let rows = c_block.len() / n;
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr.get().offset(r0 as isize * rsa),
                rsa,
                csa,
                b_ptr.get(),
                rsb,
                csb,
                0.0,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

pub(crate) struct ConvForward {
    pub y: Vec<f32>,
    /// Saved unrolled patches, `[n * oh * ow, kdim]`, reused by the backward pass.
    pub cols: Vec<f32>,
    pub oh: usize,
    pub ow: usize,
}

/// Batched forward: `x [n, c, h, w]`, weights `[oc, c, k, k]`, bias `[oc]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
    relu: bool,
) -> Result<ConvForward> {
    let oh = spec.out_dim(h)?;
    let ow = spec.out_dim(w)?;
    let p = oh * ow;
    let kdim = c * spec.kernel_size * spec.kernel_size;
    let oc = spec.out_channels;
    let mut cols = vec![0.0f32; n * p * kdim];

    par::for_each_chunk_mut(&mut cols, IMAGE_CHUNK * p * kdim, |ci, block| {
        let n0 = ci * IMAGE_CHUNK;
        for (i, img_cols) in block.chunks_mut(p * kdim).enumerate() {
            let img = &x[(n0 + i) * c * h * w..(n0 + i + 1) * c * h * w];
            im2col_image(img, c, h, w, spec, oh, ow, img_cols);
        }
    });

    // nhwc[r, oc] = cols[r, :] . wgt[oc, :]
    let mut nhwc = vec![0.0f32; n * p * oc];
    sgemm_rows(n * p, kdim, oc, &cols, kdim as isize, 1, wgt, 1, kdim as isize, &mut nhwc, IMAGE_CHUNK * p);

    let mut y = vec![0.0f32; n * oc * p];
    {
        let nhwc_ref = &nhwc;
        par::for_each_chunk_mut(&mut y, IMAGE_CHUNK * oc * p, |ci, block| {
            let n0 = ci * IMAGE_CHUNK;
            for (i, img_y) in block.chunks_mut(oc * p).enumerate() {
                let src = &nhwc_ref[(n0 + i) * p * oc..(n0 + i + 1) * p * oc];
                transpose_add(src, p, oc, bias, relu, img_y);
            }
        });
    }
    Ok(ConvForward { y, cols, oh, ow })
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f32>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Images per chunk in the weight-gradient reduction. Fixed so the partial
/// sum order never depends on thread count.
const GRAD_CHUNK: usize = 128;

/// Batched backward from `dy [n, oc, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    dy: &[f32],
    x_dims: (usize, usize, usize, usize),
    cols: &[f32],
    wgt: &[f32],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    y: &[f32],
    relu: bool,
    need_dx: bool,
) -> ConvGrads {
    let (n, c, h, w) = x_dims;
    let p = oh * ow;
    let oc = spec.out_channels;
    let kdim = c * spec.kernel_size * spec.kernel_size;

    // dy in NCHW -> row-major [n*p, oc], applying the fused ReLU mask
    let mut dy_nhwc = vec![0.0f32; n * p * oc];
    par::for_each_chunk_mut(&mut dy_nhwc, IMAGE_CHUNK * p * oc, |ci, block| {
        let n0 = ci * IMAGE_CHUNK;
        for (i, img) in block.chunks_mut(p * oc).enumerate() {
            let src = &dy[(n0 + i) * oc * p..(n0 + i + 1) * oc * p];
            if relu {
                let gate = &y[(n0 + i) * oc * p..(n0 + i + 1) * oc * p];
                transpose_back_masked(src, gate, p, oc, img);
            } else {
                transpose(src, oc, p, img);
            }
        }
    });

    // dw and db: per-chunk partials combined in chunk order.
    let n_chunks = n.div_ceil(GRAD_CHUNK);
    let partials = par::map_chunks(n_chunks, |ci| {
        let n0 = ci * GRAD_CHUNK;
        let nb = GRAD_CHUNK.min(n - n0);
        let rows = nb * p;
        let dy_block = &dy_nhwc[n0 * p * oc..(n0 * p + rows) * oc];
        let col_block = &cols[n0 * p * kdim..(n0 * p + rows) * kdim];
        let mut dw = vec![0.0f32; oc * kdim];
        unsafe {
            // dw[oc, kdim] = dy_block^T @ col_block
            matrixmultiply::sgemm(
                oc,
                rows,
                kdim,
                1.0,
                dy_block.as_ptr(),
                1,
                oc as isize,
                col_block.as_ptr(),
                kdim as isize,
                1,
                0.0,
                dw.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        let mut db = vec![0.0f64; oc];
        for row in dy_block.chunks_exact(oc) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += *v as f64;
            }
        }
        (dw, db)
    });

    let mut dw = vec![0.0f32; oc * kdim];
    let mut db64 = vec![0.0f64; oc];
    for (pw, pb) in &partials {
        for (acc, v) in dw.iter_mut().zip(pw) {
            *acc += v;
        }
        for (acc, v) in db64.iter_mut().zip(pb) {
            *acc += v;
        }
    }
    let db: Vec<f32> = db64.iter().map(|v| *v as f32).collect();

    let mut dx = Vec::new();
    if need_dx {
        // dcols[n*p, kdim] = dy_nhwc @ wgt
        let mut dcols = vec![0.0f32; n * p * kdim];
        sgemm_rows(n * p, oc, kdim, &dy_nhwc, oc as isize, 1, wgt, kdim as isize, 1, &mut dcols, IMAGE_CHUNK * p);
        dx = vec![0.0f32; n * c * h * w];
        let dcols_ref = &dcols;
        par::for_each_chunk_mut(&mut dx, IMAGE_CHUNK * c * h * w, |ci, block| {
            let n0 = ci * IMAGE_CHUNK;
            for (i, img_dx) in block.chunks_mut(c * h * w).enumerate() {
                let img_cols = &dcols_ref[(n0 + i) * p * kdim..(n0 + i + 1) * p * kdim];
                col2im_image(img_cols, c, h, w, spec, oh, ow, img_dx);
            }
        });
    }

    ConvGrads { dx, dw, db }
}

//! Raw compute kernels behind the graph ops.
//!
//! All kernels are pure functions over flat row-major buffers with explicit
//! geometry. Convolutions go through im2col + gemm; gemm calls are split
//! over output rows so rayon can use every core without changing any
//! summation order (results stay bitwise deterministic).

use super::element::Element;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Minimum rows per gemm block when splitting across threads.
const GEMM_ROWS_PER_BLOCK: usize = 16;
/// Flop count below which a gemm is not worth splitting across threads.
const GEMM_PAR_FLOPS: usize = 1 << 25;
/// Element count below which data-parallel loops run serially (rayon
/// dispatch costs more than the loop body at these sizes).
const PAR_MIN_WORK: usize = 1 << 20;

fn worth_par(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

/// Runs `body(i, chunk)` over `buf` in `size`-element chunks, in parallel
/// only when `work` (total touched elements) amortizes the dispatch.
fn chunks_mut_indexed<T: Send>(
    buf: &mut [T],
    size: usize,
    work: usize,
    body: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if worth_par(work) {
        buf.par_chunks_mut(size).enumerate().for_each(|(i, c)| body(i, c));
    } else {
        for (i, c) in buf.chunks_mut(size).enumerate() {
            body(i, c);
        }
    }
}

/// Row-major `C = alpha * A(m x k) * B(k x n) + beta * C`, parallel over row
/// blocks when the matrix is big enough to amortize thread dispatch.
pub(crate) fn par_gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    let threads = rayon::current_num_threads();
    if threads <= 1 || m < 2 * GEMM_ROWS_PER_BLOCK || 2 * m * k * n < GEMM_PAR_FLOPS {
        E::gemm(m, k, n, alpha, a, b, beta, c);
        return;
    }
    let blocks = threads.min(m / GEMM_ROWS_PER_BLOCK).max(1);
    let rows_per = m.div_ceil(blocks);
    c.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(c_blk, a_blk)| {
            let mb = c_blk.len() / n;
            E::gemm(mb, k, n, alpha, a_blk, b, beta, c_blk);
        });
}

/// `C = alpha * A * B^T + beta * C` where `b` is stored row-major `(n x k)`.
fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    E::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// `C = alpha * A^T * B + beta * C` where `a` is stored row-major `(k x m)`.
fn gemm_tn<E: Element>(m: usize, k: usize, n: usize, alpha: E, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    E::gemm_strided(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c);
}

// ---------------------------------------------------------------------------
// Convolution geometry
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let eff_k = dil.checked_mul(k - 1)? + 1;
    let padded = input + 2 * pad;
    if padded < eff_k {
        return None;
    }
    Some((padded - eff_k) / stride + 1)
}

impl Conv2dGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        };
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {wcin}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Shape("conv2d stride/dilation must be >= 1".into()));
        }
        let out_h = conv_out_extent(h, kh, stride.0, pad.0, dilation.0);
        let out_w = conv_out_extent(w, kw, stride.1, pad.1, dilation.1);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!(
                "conv2d output extent is non-positive for input {h}x{w}, kernel {kh}x{kw}, \
                 stride {stride:?}, pad {pad:?}, dilation {dilation:?}"
            )));
        };
        Ok(Conv2dGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            dilation,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.out_h, self.out_w]
    }

    fn k_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols_per_sample(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Gathers `x` into the `(cin*kh*kw) x (n*out_h*out_w)` im2col matrix.
fn im2col_into<E: Element>(g: &Conv2dGeom, x: &[E], cols: &mut [E]) {
    let ncols = g.n * g.cols_per_sample();
    debug_assert_eq!(cols.len(), g.k_rows() * ncols);
    cols.fill(E::ZERO);
    let per = g.cols_per_sample();
    let work = cols.len();
    chunks_mut_indexed(cols, ncols, work, |r, row| {
        let ci = r / (g.kh * g.kw);
        let kh = (r / g.kw) % g.kh;
        let kw = r % g.kw;
        for n in 0..g.n {
            let x_base = (n * g.cin + ci) * g.h * g.w;
            let row_n = &mut row[n * per..(n + 1) * per];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride.0 + kh * g.dilation.0) as isize - g.pad.0 as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let x_row = x_base + iy as usize * g.w;
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride.1 + kw * g.dilation.1) as isize - g.pad.1 as isize;
                    if ix >= 0 && ix < g.w as isize {
                        row_n[oy * g.out_w + ox] = x[x_row + ix as usize];
                    }
                }
            }
        }
    });
}

/// Scatter-adds an im2col-layout gradient back onto the input grid.
fn col2im<E: Element>(g: &Conv2dGeom, cols: &[E], dx: &mut [E]) {
    let per = g.cols_per_sample();
    let ncols = g.n * per;
    let plane = g.h * g.w;
    chunks_mut_indexed(dx, g.cin * plane, cols.len(), |n, dx_n| {
        for r in 0..g.k_rows() {
            let ci = r / (g.kh * g.kw);
            let kh = (r / g.kw) % g.kh;
            let kw = r % g.kw;
            let row = &cols[r * ncols + n * per..r * ncols + (n + 1) * per];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride.0 + kh * g.dilation.0) as isize - g.pad.0 as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let dst = ci * plane + iy as usize * g.w;
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride.1 + kw * g.dilation.1) as isize - g.pad.1 as isize;
                    if ix >= 0 && ix < g.w as isize {
                        dx_n[dst + ix as usize] += row[oy * g.out_w + ox];
                    }
                }
            }
        }
    });
}

pub(crate) fn conv2d_forward<E: Element>(g: &Conv2dGeom, x: &[E], w: &[E], bias: Option<&[E]>) -> Vec<E> {
    let per = g.cols_per_sample();
    let ncols = g.n * per;
    E::with_scratch(0, g.k_rows() * ncols, |cols| {
        im2col_into(g, x, cols);
        E::with_scratch(1, g.cout * ncols, |y| {
            par_gemm(g.cout, g.k_rows(), ncols, E::ONE, w, cols, E::ZERO, y);
            let mut out = vec![E::ZERO; g.n * g.cout * per];
            let work = out.len();
            chunks_mut_indexed(&mut out, g.cout * per, work, |n, out_n| {
                for co in 0..g.cout {
                    let b = bias.map_or(E::ZERO, |b| b[co]);
                    let src = &y[co * ncols + n * per..co * ncols + (n + 1) * per];
                    let dst = &mut out_n[co * per..(co + 1) * per];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + b;
                    }
                }
            });
            out
        })
    })
}

pub(crate) struct ConvGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dw: Option<Vec<E>>,
    pub db: Option<Vec<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    g: &Conv2dGeom,
    x: &[E],
    w: &[E],
    dy: &[E],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<E> {
    let per = g.cols_per_sample();
    let ncols = g.n * per;
    // Regroup dy from NCHW into the (cout x ncols) gemm layout.
    let (dw, dx) = E::with_scratch(0, g.cout * ncols, |dyg| {
        let work = dyg.len();
        chunks_mut_indexed(dyg, ncols, work, |co, row| {
            for n in 0..g.n {
                let src = &dy[(n * g.cout + co) * per..(n * g.cout + co + 1) * per];
                row[n * per..(n + 1) * per].copy_from_slice(src);
            }
        });

        let dw = need_dw.then(|| {
            E::with_scratch(1, g.k_rows() * ncols, |cols| {
                im2col_into(g, x, cols);
                let mut dw = vec![E::ZERO; g.cout * g.k_rows()];
                gemm_nt(g.cout, ncols, g.k_rows(), E::ONE, dyg, cols, E::ZERO, &mut dw);
                dw
            })
        });

        let dx = need_dx.then(|| {
            E::with_scratch(1, g.k_rows() * ncols, |dcols| {
                gemm_tn(g.k_rows(), g.cout, ncols, E::ONE, w, dyg, E::ZERO, dcols);
                let mut dx = vec![E::ZERO; g.n * g.cin * g.h * g.w];
                col2im(g, dcols, &mut dx);
                dx
            })
        });
        (dw, dx)
    });

    let db = if need_db {
        let mut db = vec![E::ZERO; g.cout];
        for (co, dst) in db.iter_mut().enumerate() {
            let mut s = E::ZERO;
            for n in 0..g.n {
                for v in &dy[(n * g.cout + co) * per..(n * g.cout + co + 1) * per] {
                    s += *v;
                }
            }
            *dst = s;
        }
        Some(db)
    } else {
        None
    };

    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Transposed convolution (fractionally-strided): gradient-of-conv semantics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TConv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl TConv2dGeom {
    /// Kernel layout is `[cin, cout, kh, kw]`.
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Self> {
        let (&[n, cin, h, w], &[wcin, cout, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::Shape(format!(
                "transposed_conv2d expects rank-4 input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        };
        if cin != wcin {
            return Err(Error::Shape(format!(
                "transposed_conv2d channel mismatch: input has {cin}, kernel expects {wcin}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Shape("transposed_conv2d stride must be >= 1".into()));
        }
        if out_pad.0 >= stride.0 || out_pad.1 >= stride.1 {
            return Err(Error::Shape(format!(
                "transposed_conv2d output_padding {out_pad:?} must be smaller than stride {stride:?}"
            )));
        }
        let oh = ((h - 1) * stride.0 + kh + out_pad.0) as isize - 2 * pad.0 as isize;
        let ow = ((w - 1) * stride.1 + kw + out_pad.1) as isize - 2 * pad.1 as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::Shape(format!(
                "transposed_conv2d output extent {oh}x{ow} is non-positive"
            )));
        }
        Ok(TConv2dGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            out_pad,
            out_h: oh as usize,
            out_w: ow as usize,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.out_h, self.out_w]
    }

    fn k_rows(&self) -> usize {
        self.cout * self.kh * self.kw
    }
}

pub(crate) fn tconv2d_forward<E: Element>(g: &TConv2dGeom, x: &[E], w: &[E], bias: Option<&[E]>) -> Vec<E> {
    let per_in = g.h * g.w;
    let ncols = g.n * per_in;
    E::with_scratch(0, g.cin * ncols, |xg| {
    // xg: (cin x ncols) view of the input.
    let work = xg.len();
    chunks_mut_indexed(xg, ncols, work, |ci, row| {
        for n in 0..g.n {
            let src = &x[(n * g.cin + ci) * per_in..(n * g.cin + ci + 1) * per_in];
            row[n * per_in..(n + 1) * per_in].copy_from_slice(src);
        }
    });
    E::with_scratch(1, g.k_rows() * ncols, |cols| {
    // cols = W^T (cout*kh*kw x cin) . xg
    gemm_tn(g.k_rows(), g.cin, ncols, E::ONE, w, xg, E::ZERO, cols);

    let per_out = g.out_h * g.out_w;
    let mut out = vec![E::ZERO; g.n * g.cout * per_out];
    let work = cols.len() + out.len();
    chunks_mut_indexed(&mut out, g.cout * per_out, work, |n, out_n| {
        for co in 0..g.cout {
            let dst = &mut out_n[co * per_out..(co + 1) * per_out];
            if let Some(b) = bias {
                dst.fill(b[co]);
            }
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let r = (co * g.kh + kh) * g.kw + kw;
                    let row = &cols[r * ncols + n * per_in..r * ncols + (n + 1) * per_in];
                    for iy in 0..g.h {
                        let oy = (iy * g.stride.0 + kh) as isize - g.pad.0 as isize;
                        if oy < 0 || oy >= g.out_h as isize {
                            continue;
                        }
                        let d_base = oy as usize * g.out_w;
                        for ix in 0..g.w {
                            let ox = (ix * g.stride.1 + kw) as isize - g.pad.1 as isize;
                            if ox >= 0 && ox < g.out_w as isize {
                                dst[d_base + ox as usize] += row[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
    })
    })
}

pub(crate) fn tconv2d_backward<E: Element>(
    g: &TConv2dGeom,
    x: &[E],
    w: &[E],
    dy: &[E],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<E> {
    let per_in = g.h * g.w;
    let ncols = g.n * per_in;
    let per_out = g.out_h * g.out_w;

    // dcols gathers dy at every (input position, kernel offset) pair; this is
    // im2col of dy evaluated on the input grid.
    E::with_scratch(0, g.k_rows() * ncols, |dcols| {
    dcols.fill(E::ZERO);
    let work = dcols.len();
    chunks_mut_indexed(dcols, ncols, work, |r, row| {
        let co = r / (g.kh * g.kw);
        let kh = (r / g.kw) % g.kh;
        let kw = r % g.kw;
        for n in 0..g.n {
            let dy_base = (n * g.cout + co) * per_out;
            let row_n = &mut row[n * per_in..(n + 1) * per_in];
            for iy in 0..g.h {
                let oy = (iy * g.stride.0 + kh) as isize - g.pad.0 as isize;
                if oy < 0 || oy >= g.out_h as isize {
                    continue;
                }
                let s_base = dy_base + oy as usize * g.out_w;
                for ix in 0..g.w {
                    let ox = (ix * g.stride.1 + kw) as isize - g.pad.1 as isize;
                    if ox >= 0 && ox < g.out_w as isize {
                        row_n[iy * g.w + ix] = dy[s_base + ox as usize];
                    }
                }
            }
        }
    });

    let dx = need_dx.then(|| {
        // dxg (cin x ncols) = W (cin x cout*kh*kw) . dcols
        E::with_scratch(1, g.cin * ncols, |dxg| {
            par_gemm(g.cin, g.k_rows(), ncols, E::ONE, w, dcols, E::ZERO, dxg);
            let mut dx = vec![E::ZERO; g.n * g.cin * per_in];
            let work = dx.len();
            chunks_mut_indexed(&mut dx, g.cin * per_in, work, |n, dx_n| {
                for ci in 0..g.cin {
                    dx_n[ci * per_in..(ci + 1) * per_in].copy_from_slice(
                        &dxg[ci * ncols + n * per_in..ci * ncols + (n + 1) * per_in],
                    );
                }
            });
            dx
        })
    });

    let dw = need_dw.then(|| {
        E::with_scratch(1, g.cin * ncols, |xg| {
            let work = xg.len();
            chunks_mut_indexed(xg, ncols, work, |ci, row| {
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * per_in..(n * g.cin + ci + 1) * per_in];
                    row[n * per_in..(n + 1) * per_in].copy_from_slice(src);
                }
            });
            let mut dw = vec![E::ZERO; g.cin * g.k_rows()];
            gemm_nt(g.cin, ncols, g.k_rows(), E::ONE, xg, dcols, E::ZERO, &mut dw);
            dw
        })
    });

    let db = if need_db {
        let mut db = vec![E::ZERO; g.cout];
        for (co, dst) in db.iter_mut().enumerate() {
            let mut s = E::ZERO;
            for n in 0..g.n {
                for v in &dy[(n * g.cout + co) * per_out..(n * g.cout + co + 1) * per_out] {
                    s += *v;
                }
            }
            *dst = s;
        }
        Some(db)
    } else {
        None
    };

    ConvGrads { dx, dw, db }
    })
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

pub(crate) struct GroupNormSaved<E> {
    pub mean: Vec<E>,
    pub invstd: Vec<E>,
}

pub(crate) fn group_norm_forward<E: Element>(
    x: &[E],
    dims: (usize, usize, usize, usize),
    groups: usize,
    eps: f64,
    gamma: &[E],
    beta: &[E],
) -> (Vec<E>, GroupNormSaved<E>) {
    let (n, c, h, w) = dims;
    let cg = c / groups;
    let m = cg * h * w;
    let plane = h * w;
    let mut out = vec![E::ZERO; x.len()];
    let mut mean = vec![E::ZERO; n * groups];
    let mut invstd = vec![E::ZERO; n * groups];
    let m_e = E::from_f64(m as f64);
    let eps_e = E::from_f64(eps);

    // (n, group) blocks are disjoint in x and out.
    let body = |idx: usize, out_blk: &mut [E], mean_slot: &mut E, invstd_slot: &mut E| {
            let ni = idx / groups;
            let gi = idx % groups;
            let base = (ni * c + gi * cg) * plane;
            let x_blk = &x[base..base + cg * plane];
            let mut s = E::ZERO;
            for &v in x_blk {
                s += v;
            }
            let mu = s / m_e;
            let mut var = E::ZERO;
            for &v in x_blk {
                let d = v - mu;
                var += d * d;
            }
            var = var / m_e;
            let istd = E::ONE / (var + eps_e).sqrt();
            *mean_slot = mu;
            *invstd_slot = istd;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma[ch];
                let be = beta[ch];
                for p in 0..plane {
                    let v = x_blk[ci * plane + p];
                    out_blk[ci * plane + p] = ga * (v - mu) * istd + be;
                }
            }
    };
    if worth_par(x.len() * 3) {
        out.par_chunks_mut(cg * plane)
            .zip(mean.par_iter_mut())
            .zip(invstd.par_iter_mut())
            .enumerate()
            .for_each(|(idx, ((out_blk, mean_slot), invstd_slot))| {
                body(idx, out_blk, mean_slot, invstd_slot)
            });
    } else {
        for (idx, ((out_blk, mean_slot), invstd_slot)) in out
            .chunks_mut(cg * plane)
            .zip(mean.iter_mut())
            .zip(invstd.iter_mut())
            .enumerate()
        {
            body(idx, out_blk, mean_slot, invstd_slot);
        }
    }
    (out, GroupNormSaved { mean, invstd })
}

pub(crate) fn group_norm_backward<E: Element>(
    x: &[E],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[E],
    saved: &GroupNormSaved<E>,
    dy: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (n, c, h, w) = dims;
    let cg = c / groups;
    let plane = h * w;
    let m = cg * plane;
    let m_e = E::from_f64(m as f64);

    let mut dx = vec![E::ZERO; x.len()];
    let work = x.len();
    chunks_mut_indexed(&mut dx, m, work, |idx, dx_blk| {
        let ni = idx / groups;
        let gi = idx % groups;
        let base = (ni * c + gi * cg) * plane;
        let mu = saved.mean[idx];
        let istd = saved.invstd[idx];
        let x_blk = &x[base..base + m];
        let dy_blk = &dy[base..base + m];
        let mut s1 = E::ZERO;
        let mut s2 = E::ZERO;
        for ci in 0..cg {
            let ga = gamma[gi * cg + ci];
            for p in 0..plane {
                let i = ci * plane + p;
                let xh = (x_blk[i] - mu) * istd;
                let dxh = dy_blk[i] * ga;
                s1 += dxh;
                s2 += dxh * xh;
            }
        }
        s1 = s1 / m_e;
        s2 = s2 / m_e;
        for ci in 0..cg {
            let ga = gamma[gi * cg + ci];
            for p in 0..plane {
                let i = ci * plane + p;
                let xh = (x_blk[i] - mu) * istd;
                let dxh = dy_blk[i] * ga;
                dx_blk[i] = istd * (dxh - s1 - xh * s2);
            }
        }
    });

    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ni in 0..n {
        for ch in 0..c {
            let gi = ch / cg;
            let mu = saved.mean[ni * groups + gi];
            let istd = saved.invstd[ni * groups + gi];
            let base = (ni * c + ch) * plane;
            let mut dg = E::ZERO;
            let mut db = E::ZERO;
            for p in 0..plane {
                let xh = (x[base + p] - mu) * istd;
                dg += dy[base + p] * xh;
                db += dy[base + p];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Correlation cost volume
// ---------------------------------------------------------------------------

/// Displacement channel count for max displacement `d` and stride `s`.
pub fn corr_channels(max_disp: usize, stride: usize) -> usize {
    let r = max_disp / stride;
    (2 * r + 1) * (2 * r + 1)
}

pub(crate) fn corr_forward<E: Element>(
    a: &[E],
    b: &[E],
    dims: (usize, usize, usize, usize),
    max_disp: usize,
    stride: usize,
) -> Vec<E> {
    let (n, c, h, w) = dims;
    let r = (max_disp / stride) as isize;
    let side = (2 * r + 1) as usize;
    let d_ch = side * side;
    let plane = h * w;
    let mut out = vec![E::ZERO; n * d_ch * plane];
    let work = out.len() * c;
    chunks_mut_indexed(&mut out, d_ch * plane, work, |ni, out_n| {
        let a_n = &a[ni * c * plane..(ni + 1) * c * plane];
        let b_n = &b[ni * c * plane..(ni + 1) * c * plane];
        for ky in -r..=r {
            let dy = ky * stride as isize;
            for kx in -r..=r {
                let dx = kx * stride as isize;
                let k_idx = ((ky + r) as usize) * side + (kx + r) as usize;
                let out_k = &mut out_n[k_idx * plane..(k_idx + 1) * plane];
                for ci in 0..c {
                    let a_c = &a_n[ci * plane..(ci + 1) * plane];
                    let b_c = &b_n[ci * plane..(ci + 1) * plane];
                    for y in 0..h as isize {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let xx = x + dx;
                            if xx >= 0 && xx < w as isize {
                                out_k[(y * w as isize + x) as usize] +=
                                    a_c[(y * w as isize + x) as usize] * b_c[(yy * w as isize + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn corr_backward<E: Element>(
    a: &[E],
    b: &[E],
    dims: (usize, usize, usize, usize),
    max_disp: usize,
    stride: usize,
    dy_out: &[E],
) -> (Vec<E>, Vec<E>) {
    let (_n, c, h, w) = dims;
    let r = (max_disp / stride) as isize;
    let side = (2 * r + 1) as usize;
    let plane = h * w;
    let d_ch = side * side;
    let mut da = vec![E::ZERO; a.len()];
    let mut db = vec![E::ZERO; b.len()];
    let body = |ni: usize, da_n: &mut [E], db_n: &mut [E]| {
            let a_n = &a[ni * c * plane..(ni + 1) * c * plane];
            let b_n = &b[ni * c * plane..(ni + 1) * c * plane];
            let g_n = &dy_out[ni * d_ch * plane..(ni + 1) * d_ch * plane];
            for ky in -r..=r {
                let dyo = ky * stride as isize;
                for kx in -r..=r {
                    let dxo = kx * stride as isize;
                    let k_idx = ((ky + r) as usize) * side + (kx + r) as usize;
                    let g_k = &g_n[k_idx * plane..(k_idx + 1) * plane];
                    for ci in 0..c {
                        let a_c = &a_n[ci * plane..(ci + 1) * plane];
                        let b_c = &b_n[ci * plane..(ci + 1) * plane];
                        let da_c = &mut da_n[ci * plane..(ci + 1) * plane];
                        // Two passes would alias da/db mutably; loop body touches
                        // disjoint elements so a single pass with index math is fine.
                        for y in 0..h as isize {
                            let yy = y + dyo;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for x in 0..w as isize {
                                let xx = x + dxo;
                                if xx >= 0 && xx < w as isize {
                                    let p = (y * w as isize + x) as usize;
                                    let q = (yy * w as isize + xx) as usize;
                                    let g = g_k[p];
                                    da_c[p] += g * b_c[q];
                                    db_n[ci * plane + q] += g * a_c[p];
                                }
                            }
                        }
                    }
                }
            }
    };
    if worth_par(a.len() * 2 * d_ch / c.max(1)) {
        da.par_chunks_mut(c * plane)
            .zip(db.par_chunks_mut(c * plane))
            .enumerate()
            .for_each(|(ni, (da_n, db_n))| body(ni, da_n, db_n));
    } else {
        for (ni, (da_n, db_n)) in da
            .chunks_mut(c * plane)
            .zip(db.chunks_mut(c * plane))
            .enumerate()
        {
            body(ni, da_n, db_n);
        }
    }
    (da, db)
}

// ---------------------------------------------------------------------------
// Bilinear warp
// ---------------------------------------------------------------------------

pub(crate) fn warp_forward<E: Element>(
    src: &[E],
    u: &[E],
    v: &[E],
    dims: (usize, usize, usize, usize),
) -> Vec<E> {
    let (_n, c, h, w) = dims;
    let plane = h * w;
    let mut out = vec![E::ZERO; src.len()];
    let work = src.len() * 4;
    chunks_mut_indexed(&mut out, c * plane, work, |ni, out_n| {
        let src_n = &src[ni * c * plane..(ni + 1) * c * plane];
        let u_n = &u[ni * plane..(ni + 1) * plane];
        let v_n = &v[ni * plane..(ni + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let yf = i as f64 + v_n[p].to_f64();
                let xf = j as f64 + u_n[p].to_f64();
                let y0 = yf.floor() as isize;
                let x0 = xf.floor() as isize;
                let wy1 = E::from_f64(yf - y0 as f64);
                let wx1 = E::from_f64(xf - x0 as f64);
                let wy0 = E::ONE - wy1;
                let wx0 = E::ONE - wx1;
                let taps = [
                    (y0, x0, wy0 * wx0),
                    (y0, x0 + 1, wy0 * wx1),
                    (y0 + 1, x0, wy1 * wx0),
                    (y0 + 1, x0 + 1, wy1 * wx1),
                ];
                for ci in 0..c {
                    let src_c = &src_n[ci * plane..(ci + 1) * plane];
                    let mut acc = E::ZERO;
                    for &(ty, tx, wt) in &taps {
                        if ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                            acc += wt * src_c[ty as usize * w + tx as usize];
                        }
                    }
                    out_n[ci * plane + p] = acc;
                }
            }
        }
    });
    out
}

pub(crate) fn warp_backward<E: Element>(
    src: &[E],
    u: &[E],
    v: &[E],
    dims: (usize, usize, usize, usize),
    dy: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (_n, c, h, w) = dims;
    let plane = h * w;
    let mut dsrc = vec![E::ZERO; src.len()];
    let mut du = vec![E::ZERO; u.len()];
    let mut dv = vec![E::ZERO; v.len()];
    let body = |ni: usize, dsrc_n: &mut [E], du_n: &mut [E], dv_n: &mut [E]| {
            let src_n = &src[ni * c * plane..(ni + 1) * c * plane];
            let u_n = &u[ni * plane..(ni + 1) * plane];
            let v_n = &v[ni * plane..(ni + 1) * plane];
            let dy_n = &dy[ni * c * plane..(ni + 1) * c * plane];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let yf = i as f64 + v_n[p].to_f64();
                    let xf = j as f64 + u_n[p].to_f64();
                    let y0 = yf.floor() as isize;
                    let x0 = xf.floor() as isize;
                    let wy1 = E::from_f64(yf - y0 as f64);
                    let wx1 = E::from_f64(xf - x0 as f64);
                    let wy0 = E::ONE - wy1;
                    let wx0 = E::ONE - wx1;
                    let at = |ty: isize, tx: isize, src_c: &[E]| -> E {
                        if ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                            src_c[ty as usize * w + tx as usize]
                        } else {
                            E::ZERO
                        }
                    };
                    let mut du_acc = E::ZERO;
                    let mut dv_acc = E::ZERO;
                    for ci in 0..c {
                        let src_c = &src_n[ci * plane..(ci + 1) * plane];
                        let g = dy_n[ci * plane + p];
                        let s00 = at(y0, x0, src_c);
                        let s01 = at(y0, x0 + 1, src_c);
                        let s10 = at(y0 + 1, x0, src_c);
                        let s11 = at(y0 + 1, x0 + 1, src_c);
                        // d(out)/d(xf) and d(out)/d(yf) of the bilinear form.
                        du_acc += g * (wy0 * (s01 - s00) + wy1 * (s11 - s10));
                        dv_acc += g * (wx0 * (s10 - s00) + wx1 * (s11 - s01));
                        let taps = [
                            (y0, x0, wy0 * wx0),
                            (y0, x0 + 1, wy0 * wx1),
                            (y0 + 1, x0, wy1 * wx0),
                            (y0 + 1, x0 + 1, wy1 * wx1),
                        ];
                        for &(ty, tx, wt) in &taps {
                            if ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                                dsrc_n[ci * plane + ty as usize * w + tx as usize] += g * wt;
                            }
                        }
                    }
                    du_n[p] = du_acc;
                    dv_n[p] = dv_acc;
                }
            }
    };
    if worth_par(src.len() * 8) {
        dsrc.par_chunks_mut(c * plane)
            .zip(du.par_chunks_mut(plane))
            .zip(dv.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(ni, ((dsrc_n, du_n), dv_n))| body(ni, dsrc_n, du_n, dv_n));
    } else {
        for (ni, ((dsrc_n, du_n), dv_n)) in dsrc
            .chunks_mut(c * plane)
            .zip(du.chunks_mut(plane))
            .zip(dv.chunks_mut(plane))
            .enumerate()
        {
            body(ni, dsrc_n, du_n, dv_n);
        }
    }
    (dsrc, du, dv)
}

//! Direct stride-1 "same" convolution on a zero-padded flat layout.
//!
//! Every image plane is padded by `k / 2` on each side and the batch is laid
//! out back to back, so each kernel tap is a constant offset into a flat
//! buffer and the convolution becomes a 1-D sweep with no patch matrix.
//! Outputs that land on padding are computed and dropped.

use crate::tensor::{Shape, Tensor};

/// Output pixels per vector register.
const LANES: usize = 16;
/// Vector registers per row of the register block.
const V: usize = 3;
const BLOCK: usize = LANES * V;
/// Blocks sharing one pass over a weight panel.
const TILE: usize = 16;
/// Pixel chunk of the weight-gradient reduction.
const GRAD_CHUNK: usize = 1024;

/// Flat padded geometry of a batch of `h x w` planes.
#[derive(Clone, Copy, Debug)]
struct Layout {
    k: usize,
    pad: usize,
    n: usize,
    h: usize,
    w: usize,
    /// Padded row length.
    wp: usize,
    /// Padded plane size.
    plane: usize,
    /// Sweep length, a multiple of [`BLOCK`].
    span: usize,
    /// Buffer length per channel (sweep plus the largest tap offset).
    len: usize,
}

impl Layout {
    fn new(s: Shape, k: usize) -> Self {
        let pad = k / 2;
        let wp = s.w + 2 * pad;
        let plane = (s.h + 2 * pad) * wp;
        let span = (s.n * plane).div_ceil(BLOCK) * BLOCK;
        let len = span + (k - 1) * (wp + 1);
        Self {
            k,
            pad,
            n: s.n,
            h: s.h,
            w: s.w,
            wp,
            plane,
            span,
            len,
        }
    }

    fn offsets(&self) -> Vec<usize> {
        (0..self.k)
            .flat_map(|ky| (0..self.k).map(move |kx| ky * self.wp + kx))
            .collect()
    }

    /// `[c][len]` copy of `t` with the image at `(y + pad, x + pad)`.
    fn pad_into(&self, t: &Tensor, out: &mut Vec<f32>) {
        let s = t.shape;
        out.clear();
        out.resize(s.c * self.len, 0.0);
        for c in 0..s.c {
            for n in 0..s.n {
                let src = &t.data[(c * s.n + n) * s.plane()..][..s.plane()];
                let base = c * self.len + n * self.plane + self.pad * self.wp + self.pad;
                for y in 0..s.h {
                    out[base + y * self.wp..][..s.w].copy_from_slice(&src[y * s.w..][..s.w]);
                }
            }
        }
    }

    /// Compact `[c][n][h][w]` tensor from a `[c][span]` sweep result.
    fn extract(&self, v: &[f32], c: usize) -> Tensor {
        self.extract_with(v, c, None, false)
    }

    /// Unpads `c` channels, adding `bias` and applying a ReLU on the way.
    fn extract_with(&self, v: &[f32], c: usize, bias: Option<&[f32]>, relu: bool) -> Tensor {
        let shape = Shape::new(c, self.n, self.h, self.w);
        let mut out = Tensor::zeros(shape);
        for ch in 0..c {
            let b = bias.map_or(0.0, |b| b[ch]);
            for n in 0..self.n {
                let dst = &mut out.data[(ch * self.n + n) * shape.plane()..][..shape.plane()];
                let src = &v[ch * self.span + n * self.plane..];
                for y in 0..self.h {
                    let (d, s) = (
                        &mut dst[y * self.w..][..self.w],
                        &src[y * self.wp..][..self.w],
                    );
                    if relu {
                        d.iter_mut().zip(s).for_each(|(d, s)| *d = (s + b).max(0.0));
                    } else {
                        d.iter_mut().zip(s).for_each(|(d, s)| *d = s + b);
                    }
                }
            }
        }
        out
    }
}

thread_local! {
    /// Padded inputs and sweep output, kept between calls so large buffers
    /// are not faulted in afresh for every convolution.
    static SCRATCH: std::cell::RefCell<[Vec<f32>; 3]> = const { std::cell::RefCell::new([Vec::new(), Vec::new(), Vec::new()]) };
}

/// Whether the vectorized kernels can run on this CPU.
pub(crate) fn accelerated() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[co][q] = sum_ci sum_t w[co][ci][t] * x[ci][q + offs[t]]` for
/// `q < span`. `x` is `[cin][x_len]`, `w` is `[cout][cin][taps]`.
#[allow(clippy::too_many_arguments)]
fn sweep(
    x: &[f32],
    x_len: usize,
    cin: usize,
    offs: &[usize],
    w: &[f32],
    cout: usize,
    span: usize,
    simd: bool,
    out: &mut Vec<f32>,
) {
    let taps = offs.len();
    assert_eq!(w.len(), cout * cin * taps);
    assert!(x.len() >= cin * x_len && x_len >= span + offs.iter().max().copied().unwrap_or(0));
    out.resize(cout * span, 0.0);
    // pack weights into panels of `c` output channels: [ci][t][c]
    let mut panels = Vec::new();
    let mut co = 0;
    while co < cout {
        let c = match cout - co {
            r if r >= 8 => 8,
            r if r >= 4 => 4,
            r if r >= 2 => 2,
            _ => 1,
        };
        let mut p = Vec::with_capacity(cin * taps * c);
        for ci in 0..cin {
            for t in 0..taps {
                for j in 0..c {
                    p.push(w[((co + j) * cin + ci) * taps + t]);
                }
            }
        }
        panels.push((co, c, p));
        co += c;
    }
    let use_simd = simd && accelerated();
    for tile in (0..span).step_by(BLOCK * TILE) {
        let tile_end = (tile + BLOCK * TILE).min(span);
        for (co, c, p) in &panels {
            // rows co..co + c of `out`
            let dst = out[co * span..].as_mut_ptr();
            for q in (tile..tile_end).step_by(BLOCK) {
                let args = Args {
                    x,
                    x_len,
                    cin,
                    offs,
                    w: p,
                    out: dst,
                    out_len: span,
                    q,
                };
                #[cfg(target_arch = "x86_64")]
                if use_simd {
                    // SAFETY: avx512f was detected at runtime; `Args` bounds are
                    // checked by the assertions above and the layout math.
                    unsafe {
                        match c {
                            8 => avx512::block::<8>(&args),
                            4 => avx512::block::<4>(&args),
                            2 => avx512::block::<2>(&args),
                            _ => avx512::block::<1>(&args),
                        }
                    }
                    continue;
                }
                let _ = use_simd;
                match c {
                    8 => portable_block::<8>(&args),
                    4 => portable_block::<4>(&args),
                    2 => portable_block::<2>(&args),
                    _ => portable_block::<1>(&args),
                }
            }
        }
    }
}

struct Args<'a> {
    x: &'a [f32],
    x_len: usize,
    cin: usize,
    offs: &'a [usize],
    /// Packed `[ci][t][C]` weight panel.
    w: &'a [f32],
    /// First of this panel's output rows, `out_len` apart.
    out: *mut f32,
    out_len: usize,
    q: usize,
}

fn portable_block<const C: usize>(a: &Args) {
    let mut acc = [[0.0f32; BLOCK]; C];
    let mut wi = 0;
    for ci in 0..a.cin {
        let xc = &a.x[ci * a.x_len + a.q..];
        for &off in a.offs {
            let xv = &xc[off..off + BLOCK];
            for (j, row) in acc.iter_mut().enumerate() {
                let wv = a.w[wi + j];
                for (r, xv) in row.iter_mut().zip(xv) {
                    *r += wv * xv;
                }
            }
            wi += C;
        }
    }
    for (j, row) in acc.iter().enumerate() {
        // SAFETY: `out` starts `C` rows of `out_len` and `q + BLOCK <= out_len`.
        unsafe {
            std::ptr::copy_nonoverlapping(row.as_ptr(), a.out.add(j * a.out_len + a.q), BLOCK);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{Args, LANES, V};

    /// `[j][t] = sum_{q < n} dy[j * dy_len + q] * x[q + offs[t]]` over one
    /// kernel row; `n` is a multiple of [`LANES`].
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn grad_row<const C: usize>(
        dy: *const f32,
        dy_len: usize,
        x: *const f32,
        offs: [usize; 3],
        n: usize,
        acc_out: *mut f32,
        acc_stride: usize,
    ) {
        let mut acc = [[_mm512_setzero_ps(); 3]; C];
        let mut q = 0;
        while q < n {
            let xv = offs.map(|off| _mm512_loadu_ps(x.add(q + off)));
            for (j, row) in acc.iter_mut().enumerate() {
                let d = _mm512_loadu_ps(dy.add(j * dy_len + q));
                for (r, xv) in row.iter_mut().zip(xv) {
                    *r = _mm512_fmadd_ps(d, xv, *r);
                }
            }
            q += LANES;
        }
        for (j, row) in acc.iter().enumerate() {
            for (t, r) in row.iter().enumerate() {
                let p = acc_out.add(j * acc_stride + t * LANES);
                _mm512_storeu_ps(p, _mm512_add_ps(_mm512_loadu_ps(p), *r));
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn block<const C: usize>(a: &Args) {
        let mut acc = [[_mm512_setzero_ps(); V]; C];
        let mut wp = a.w.as_ptr();
        let x = a.x.as_ptr();
        for ci in 0..a.cin {
            let xc = x.add(ci * a.x_len + a.q);
            for &off in a.offs {
                let p = xc.add(off);
                let mut xv = [_mm512_setzero_ps(); V];
                for (v, r) in xv.iter_mut().enumerate() {
                    *r = _mm512_loadu_ps(p.add(v * LANES));
                }
                for (j, row) in acc.iter_mut().enumerate() {
                    let wv = _mm512_set1_ps(*wp.add(j));
                    for (r, xv) in row.iter_mut().zip(xv) {
                        *r = _mm512_fmadd_ps(wv, xv, *r);
                    }
                }
                wp = wp.add(C);
            }
        }
        let out = a.out;
        for (j, row) in acc.iter().enumerate() {
            for (v, r) in row.iter().enumerate() {
                _mm512_storeu_ps(out.add(j * a.out_len + a.q + v * LANES), *r);
            }
        }
    }
}

/// Stride-1 convolution with `pad = k / 2`; `weight` is `[cout][cin][k][k]`.
/// `simd` selects the vector kernel when the CPU has it.
pub(crate) fn conv_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    k: usize,
    relu: bool,
    simd: bool,
) -> Tensor {
    let layout = Layout::new(x.shape, k);
    SCRATCH.with_borrow_mut(|[xp, v, _]| {
        layout.pad_into(x, xp);
        sweep(
            xp,
            layout.len,
            x.shape.c,
            &layout.offsets(),
            weight,
            cout,
            layout.span,
            simd,
            v,
        );
        layout.extract_with(v, cout, bias, relu)
    })
}

/// Input and weight gradients of [`conv_forward`].
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    k: usize,
    need_dx: bool,
    simd: bool,
) -> (Option<Tensor>, Vec<f32>) {
    let cin = x.shape.c;
    let cout = dy.shape.c;
    let taps = k * k;
    let layout = Layout::new(x.shape, k);
    let offs = layout.offsets();
    SCRATCH.with_borrow_mut(|[dyp, v, xp]| {
        layout.pad_into(dy, dyp);

        let dx = need_dx.then(|| {
            // correlation of dy with the flipped, transposed kernel
            let mut wt = vec![0.0f32; weight.len()];
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..taps {
                        wt[(ci * cout + co) * taps + (taps - 1 - t)] =
                            weight[(co * cin + ci) * taps + t];
                    }
                }
            }
            sweep(dyp, layout.len, cout, &offs, &wt, cin, layout.span, simd, v);
            layout.extract(v, cin)
        });

        // dw[co][ci][t] = sum_q dy[co][q + centre] * x[ci][q + offs[t]]
        layout.pad_into(x, xp);
        let centre = layout.pad * (layout.wp + 1);
        let mut dw = vec![0.0f32; cout * cin * taps];
        #[cfg(target_arch = "x86_64")]
        if simd && k == 3 && accelerated() {
            grad_3x3(dyp, xp, &layout, &offs, centre, cin, cout, v, &mut dw);
            return (dx, dw);
        }
        for start in (0..layout.span).step_by(GRAD_CHUNK) {
            let kc = GRAD_CHUNK.min(layout.span - start);
            for (t, off) in offs.iter().enumerate() {
                // SAFETY: A is `cout x kc` inside `dyp`, B is `kc x cin` inside `xp`
                // (both within `len` per channel), C is `dw` viewed with strides
                // `(cin * taps, taps)` at offset `t`.
                unsafe {
                    matrixmultiply::sgemm(
                        cout,
                        kc,
                        cin,
                        1.0,
                        dyp.as_ptr().add(start + centre),
                        layout.len as isize,
                        1,
                        xp.as_ptr().add(start + off),
                        1,
                        layout.len as isize,
                        1.0,
                        dw.as_mut_ptr().add(t),
                        (cin * taps) as isize,
                        taps as isize,
                    );
                }
            }
        }
        (dx, dw)
    })
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
fn grad_3x3(
    dyp: &[f32],
    xp: &[f32],
    layout: &Layout,
    offs: &[usize],
    centre: usize,
    cin: usize,
    cout: usize,
    acc: &mut Vec<f32>,
    dw: &mut [f32],
) {
    // one vector of partial sums per weight, reduced once at the end
    let stride = cin * 9 * LANES;
    acc.clear();
    acc.resize(cout * stride, 0.0);
    let len = layout.len;
    for start in (0..layout.span).step_by(GRAD_CHUNK) {
        let n = GRAD_CHUNK.min(layout.span - start);
        let mut co = 0;
        while co < cout {
            let c = match cout - co {
                r if r >= 8 => 8,
                r if r >= 4 => 4,
                r if r >= 2 => 2,
                _ => 1,
            };
            let dy = dyp[co * len + centre + start..].as_ptr();
            for ci in 0..cin {
                let x = xp[ci * len + start..].as_ptr();
                for ky in 0..3 {
                    let row = [offs[3 * ky], offs[3 * ky + 1], offs[3 * ky + 2]];
                    let out = acc[((co * cin + ci) * 9 + 3 * ky) * LANES..].as_mut_ptr();
                    // SAFETY: avx512f is available; rows `co..co + c` of `dyp`
                    // and row `ci` of `xp` hold `span + max offset` values, and
                    // `acc` holds `c` rows of `stride` past `out`.
                    unsafe {
                        match c {
                            8 => avx512::grad_row::<8>(dy, len, x, row, n, out, stride),
                            4 => avx512::grad_row::<4>(dy, len, x, row, n, out, stride),
                            2 => avx512::grad_row::<2>(dy, len, x, row, n, out, stride),
                            _ => avx512::grad_row::<1>(dy, len, x, row, n, out, stride),
                        }
                    }
                }
            }
            co += c;
        }
    }
    for (d, lanes) in dw.iter_mut().zip(acc.chunks_exact(LANES)) {
        *d = lanes.iter().sum();
    }
}

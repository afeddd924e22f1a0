//! Dense `f32` feature tensors and the convolution / resampling kernels the
//! network is assembled from.
//!
//! Tensors are stored channel-major with the batch inside each channel
//! (`[c][n][h][w]`). A convolution over the whole batch is then one GEMM whose
//! output is already in that layout, and channel concatenation is a plain
//! append.

use crate::direct;

/// Logical shape of a feature tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel (all batch items).
    #[inline]
    pub fn channel_len(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.c * self.channel_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Recycled storage of dropped tensors, keyed by length. A training step
/// allocates the same set of large buffers every time; reusing them avoids
/// faulting fresh pages in from the OS on each step.
mod pool {
    use std::cell::RefCell;
    use std::collections::HashMap;

    /// Buffers smaller than this go straight back to the allocator.
    const MIN_LEN: usize = 1 << 14;
    const MAX_BYTES: usize = 1 << 30;

    #[derive(Default)]
    struct Pool {
        free: HashMap<usize, Vec<Vec<f32>>>,
        bytes: usize,
    }

    thread_local! {
        static POOL: RefCell<Pool> = RefCell::default();
    }

    /// Empty vector with capacity for at least `len` values.
    pub(super) fn take(len: usize) -> Vec<f32> {
        if len >= MIN_LEN {
            let hit = POOL.with_borrow_mut(|p| {
                let v = p.free.get_mut(&len)?.pop()?;
                p.bytes -= v.capacity() * 4;
                Some(v)
            });
            if let Some(mut v) = hit {
                v.clear();
                return v;
            }
        }
        Vec::with_capacity(len)
    }

    pub(super) fn give(v: Vec<f32>) {
        let len = v.len();
        if len < MIN_LEN || v.capacity() != len {
            return;
        }
        // a thread being torn down has no pool left; just free
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            if p.bytes + len * 4 <= MAX_BYTES {
                p.bytes += len * 4;
                p.free.entry(len).or_default().push(v);
            }
        });
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        pool::give(std::mem::take(&mut self.data));
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        let mut data = pool::take(self.data.len());
        data.extend_from_slice(&self.data);
        Self {
            shape: self.shape,
            data,
        }
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data does not match {shape:?}"
        );
        Self { shape, data }
    }

    pub fn filled(shape: Shape, v: f32) -> Self {
        let mut data = pool::take(shape.len());
        data.resize(shape.len(), v);
        Self { shape, data }
    }

    /// Concatenation of `parts`, in pooled storage.
    pub(crate) fn from_slices(shape: Shape, parts: &[&[f32]]) -> Self {
        let mut data = pool::take(shape.len());
        for p in parts {
            data.extend_from_slice(p);
        }
        Self::from_vec(shape, data)
    }

    /// Moves the storage out.
    pub fn into_vec(mut self) -> Vec<f32> {
        std::mem::take(&mut self.data)
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((c * s.n + n) * s.h + h) * s.w + w]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.shape.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with
/// arbitrary strides on the inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b` (checked by the
    // callers' shape arithmetic); `c` is a dense m x n row-major buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_same(&self) -> bool {
        self.kernel > 1 && self.kernel % 2 == 1 && self.stride == 1 && self.pad == self.kernel / 2
    }

    fn use_direct(&self) -> bool {
        self.is_same() && direct::accelerated()
    }
}

/// Unfolds `x` into a `(c * k * k) x (n * oh * ow)` patch matrix.
pub(crate) fn im2col(x: &Tensor, g: ConvGeom) -> (Vec<f32>, usize, usize) {
    let s = x.shape;
    let (oh, ow) = (g.out_dim(s.h), g.out_dim(s.w));
    let cols_n = s.n * oh * ow;
    let mut cols = vec![0.0f32; s.c * g.kernel * g.kernel * cols_n];
    for ci in 0..s.c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..s.n {
                    let src = &x.data[((ci * s.n) + ni) * s.plane()..][..s.plane()];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..][..s.w];
                        let dst_row = &mut dst[(ni * oh + oy) * ow..][..ow];
                        if g.stride == 1 {
                            // contiguous run of valid columns
                            let off = kx as isize - g.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((s.w as isize - off).min(ow as isize)).max(0) as usize;
                            if lo < hi {
                                let from = (lo as isize + off) as usize;
                                dst_row[lo..hi].copy_from_slice(&src_row[from..from + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < s.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f32], in_shape: Shape, g: ConvGeom) -> Tensor {
    let s = in_shape;
    let (oh, ow) = (g.out_dim(s.h), g.out_dim(s.w));
    let cols_n = s.n * oh * ow;
    let mut out = Tensor::zeros(s);
    for ci in 0..s.c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..s.n {
                    let plane = s.plane();
                    let dst = &mut out.data[((ci * s.n) + ni) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * s.w..][..s.w];
                        let src_row = &src[(ni * oh + oy) * ow..][..ow];
                        for (ox, v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst_row[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batched convolution, optionally followed by a ReLU. `weight` is
/// `cout x (cin * k * k)` row-major.
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: ConvGeom,
    relu: bool,
) -> Tensor {
    let s = x.shape;
    let kdim = s.c * g.kernel * g.kernel;
    assert_eq!(weight.len(), cout * kdim);
    if g.use_direct() {
        return direct::conv_forward(x, weight, bias, cout, g.kernel, relu, true);
    }
    let (oh, ow) = (g.out_dim(s.h), g.out_dim(s.w));
    let out_shape = Shape::new(cout, s.n, oh, ow);
    let cols_n = out_shape.channel_len();
    let mut out = Tensor::zeros(out_shape);
    if let Some(b) = bias {
        for (co, chunk) in out.data.chunks_mut(cols_n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(
            cout,
            kdim,
            cols_n,
            weight,
            (kdim as isize, 1),
            &x.data,
            (cols_n as isize, 1),
            &mut out.data,
            beta,
        );
    } else {
        let (cols, _, _) = im2col(x, g);
        gemm(
            cout,
            kdim,
            cols_n,
            weight,
            (kdim as isize, 1),
            &cols,
            (cols_n as isize, 1),
            &mut out.data,
            beta,
        );
    }
    if relu {
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// Gradients of [`conv2d`]: returns `(dx, dweight, dbias)`; `dx` is skipped
/// when the input does not need it.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
    let s = x.shape;
    let cout = dy.shape.c;
    let kdim = s.c * g.kernel * g.kernel;
    let cols_n = dy.shape.channel_len();

    let db: Vec<f32> = dy
        .data
        .chunks(cols_n)
        .map(|ch| ch.iter().map(|v| *v as f64).sum::<f64>() as f32)
        .collect();
    if g.use_direct() {
        let (dx, dw) = direct::conv_backward(x, weight, dy, g.kernel, need_dx, true);
        return (dx, dw, db);
    }

    let owned_cols;
    let cols: &[f32] = if g.is_pointwise() {
        &x.data
    } else {
        owned_cols = im2col(x, g).0;
        &owned_cols
    };

    let mut dw = vec![0.0f32; cout * kdim];
    // dW = dY * cols^T
    gemm(
        cout,
        cols_n,
        kdim,
        &dy.data,
        (cols_n as isize, 1),
        cols,
        (1, cols_n as isize),
        &mut dw,
        0.0,
    );

    let dx = need_dx.then(|| {
        let mut dcols = if g.is_pointwise() {
            Tensor::zeros(s).into_vec()
        } else {
            vec![0.0f32; kdim * cols_n]
        };
        // dcols = W^T * dY
        gemm(
            kdim,
            cout,
            cols_n,
            weight,
            (1, kdim as isize),
            &dy.data,
            (cols_n as isize, 1),
            &mut dcols,
            0.0,
        );
        if g.is_pointwise() {
            Tensor::from_vec(s, dcols)
        } else {
            col2im(&dcols, s, g)
        }
    });
    (dx, dw, db)
}

/// Non-overlapping `k x k` max pooling; also returns the winning flat index
/// for every output element.
pub(crate) fn max_pool(x: &Tensor, k: usize) -> (Tensor, Vec<u32>) {
    let s = x.shape;
    let (oh, ow) = (s.h / k, s.w / k);
    let out_shape = Shape::new(s.c, s.n, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0u32; out_shape.len()];
    let mut o = 0;
    for cn in 0..s.c * s.n {
        let base = cn * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + oy * k * s.w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * s.w + ox * k + dx;
                        let v = x.data[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out.data[o] = x.data[best_i];
                arg[o] = best_i as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(in_shape: Shape, arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (i, g) in arg.iter().zip(&dy.data) {
        dx.data[*i as usize] += *g;
    }
    dx
}

pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape;
    let (oh, ow) = (s.h / k, s.w / k);
    let mut out = Tensor::zeros(Shape::new(s.c, s.n, oh, ow));
    let inv = 1.0 / (k * k) as f32;
    let mut o = 0;
    for cn in 0..s.c * s.n {
        let base = cn * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..k {
                    let row = base + (oy * k + dy) * s.w + ox * k;
                    acc += x.data[row..row + k].iter().sum::<f32>();
                }
                out.data[o] = acc * inv;
                o += 1;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(in_shape: Shape, k: usize, dy: &Tensor) -> Tensor {
    let s = in_shape;
    let mut dx = Tensor::zeros(s);
    let (oh, ow) = (s.h / k, s.w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut o = 0;
    for cn in 0..s.c * s.n {
        let base = cn * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data[o] * inv;
                for dy_ in 0..k {
                    let row = base + (oy * k + dy_) * s.w + ox * k;
                    for v in &mut dx.data[row..row + k] {
                        *v += g;
                    }
                }
                o += 1;
            }
        }
    }
    dx
}

/// Depth-to-space: `(c * r * r, h, w) -> (c, h * r, w * r)`, sub-channel
/// `i * r + j` landing at offset `(i, j)` of each output cell.
pub(crate) fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape;
    assert_eq!(
        s.c % (r * r),
        0,
        "pixel shuffle needs channels divisible by r^2"
    );
    let out_shape = Shape::new(s.c / (r * r), s.n, s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    shuffle_map(s, r, |src, dst| out.data[dst] = x.data[src]);
    out
}

pub(crate) fn pixel_shuffle_backward(in_shape: Shape, r: usize, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    shuffle_map(in_shape, r, |src, dst| dx.data[src] = dy.data[dst]);
    dx
}

fn shuffle_map(s: Shape, r: usize, mut f: impl FnMut(usize, usize)) {
    let (oc, oh, ow) = (s.c / (r * r), s.h * r, s.w * r);
    for c in 0..oc {
        for i in 0..r {
            for j in 0..r {
                let ci = (c * r + i) * r + j;
                for n in 0..s.n {
                    for y in 0..s.h {
                        let src = ((ci * s.n + n) * s.h + y) * s.w;
                        let dst = ((c * s.n + n) * oh + y * r + i) * ow + j;
                        for x in 0..s.w {
                            f(src + x, dst + x * r);
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample_nearest(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape;
    let out_shape = Shape::new(s.c, s.n, s.h * k, s.w * k);
    let mut out = Tensor::zeros(out_shape);
    for cn in 0..s.c * s.n {
        let src = &x.data[cn * s.plane()..][..s.plane()];
        let dst = &mut out.data[cn * out_shape.plane()..][..out_shape.plane()];
        for y in 0..out_shape.h {
            for xx in 0..out_shape.w {
                dst[y * out_shape.w + xx] = src[(y / k) * s.w + xx / k];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(in_shape: Shape, k: usize, dy: &Tensor) -> Tensor {
    let s = in_shape;
    let (oh, ow) = (s.h * k, s.w * k);
    let mut dx = Tensor::zeros(s);
    for cn in 0..s.c * s.n {
        let src = &dy.data[cn * oh * ow..][..oh * ow];
        let dst = &mut dx.data[cn * s.plane()..][..s.plane()];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / k) * s.w + xx / k] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// Nearest-neighbour downsampling by an integer factor, sampling the centre
/// of every `k x k` cell.
pub fn downsample_nearest(x: &Tensor, k: usize) -> Tensor {
    if k == 1 {
        return x.clone();
    }
    let s = x.shape;
    let out_shape = Shape::new(s.c, s.n, s.h / k, s.w / k);
    let mut out = Tensor::zeros(out_shape);
    let off = k / 2;
    for cn in 0..s.c * s.n {
        let src = &x.data[cn * s.plane()..][..s.plane()];
        let dst = &mut out.data[cn * out_shape.plane()..][..out_shape.plane()];
        for y in 0..out_shape.h {
            for xx in 0..out_shape.w {
                dst[y * out_shape.w + xx] = src[(y * k + off) * s.w + xx * k + off];
            }
        }
    }
    out
}

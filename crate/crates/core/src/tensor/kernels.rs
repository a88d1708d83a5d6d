//! Raw f32 kernels shared by forward and backward passes.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-block of columns `[col0, col0 + cols)` of a row-major matrix
    /// whose full width is `stride`.
    pub fn column_block(data: &'a [f32], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// Strided mutable matrix view.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn row_major(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn column_block(data: &'a mut [f32], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data: &mut data[col0..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.rows == 0 || a.cols == 0 || a.last_index() < a.data.len());
    assert!(b.rows == 0 || b.cols == 0 || b.last_index() < b.data.len());
    assert!((c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len());
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Geometry of a 2-D convolution over a single `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    /// Columns matrix `[C*kh*kw, Ho*Wo]`, zero outside the padded input.
    pub fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut cols = vec![0.0; self.patch_len() * oh * ow];
        for c in 0..self.in_c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back into `dx`.
    pub fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.in_c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a 1-D align-corners bilinear resample:
/// `out = (1 - frac) * in[lo] + frac * in[hi]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f32,
}

/// Align-corners sample positions. A target extent of one samples the
/// source centre, where the corner rule has no defined ratio.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { (pos - lo as f64) as f32 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f32], channels: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let top = &plane[ry.lo * w..(ry.lo + 1) * w];
            let bot = &plane[ry.hi * w..(ry.hi + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let t = top[rx.lo] + rx.frac * (top[rx.hi] - top[rx.lo]);
                let b = bot[rx.lo] + rx.frac * (bot[rx.hi] - bot[rx.lo]);
                dst[oy * ow + ox] = t + ry.frac * (b - t);
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    gout: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for c in 0..channels {
        let g = &gout[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - ry.frac);
                let bot = v * ry.frac;
                plane[ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                plane[ry.lo * w + rx.hi] += top * rx.frac;
                plane[ry.hi * w + rx.lo] += bot * (1.0 - rx.frac);
                plane[ry.hi * w + rx.hi] += bot * rx.frac;
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

// 0.5 * (1 + tanh(u)) == sigmoid(2u); exp is much cheaper than tanh.
fn half_one_plus_tanh(u: f32) -> f32 {
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu(x: f32) -> f32 {
    x * half_one_plus_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let s = half_one_plus_tanh(GELU_C * (x + 0.044715 * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// In-place softmax over `row`, restricted to entries where `allowed`
/// is true; disallowed entries become exactly zero.
pub(crate) fn masked_softmax(row: &mut [f32], allowed: &[bool]) {
    let mut max = f32::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(allowed) {
        if ok && *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0;
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

//! Dense row-major tensors and the small set of kernels the blocks need.
//!
//! Layout is always row-major with feature maps stored as `(C, H, W)`.
//! Nothing here allocates strided views; every op produces a fresh buffer.

use crate::error::{dim_err, Error, Result};
use crate::real::{safe_exp, sigmoid, softplus, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// First element; the accessor for scalar parameters.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => dim_err(format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => dim_err(format!("expected rank 3, got {:?}", self.shape)),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Elementwise accumulation, used for gradient sums.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel plane `c` of a `(C, H, W)` tensor.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw: usize = self.shape[1..].iter().product();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw: usize = self.shape[1..].iter().product();
        &mut self.data[c * hw..(c + 1) * hw]
    }

    /// Elementwise op with broadcasting of `other` (or of `self`) when one side is
    /// a scalar or a per-channel vector matching the leading extent.
    pub fn ew(&self, op: Ew<T>, other: Option<&Tensor<T>>) -> Result<Self> {
        match (op.arity(), other) {
            (1, None) => Ok(self.map(|v| op.unary(v))),
            (1, Some(_)) => dim_err(format!("{op:?} takes one operand")),
            (_, None) => dim_err(format!("{op:?} takes two operands")),
            (_, Some(b)) => {
                let (shape, ia, ib) = broadcast_plan(&self.shape, &b.shape)?;
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| op.binary(self.data[ia(i)], b.data[ib(i)])).collect();
                Ok(Self { shape, data })
            }
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// `(C, H, W)` with channels of both operands stacked.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::Dimension("empty concat".into()))?
            .dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return dim_err("concat spatial mismatch");
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![c_total, h, w], data })
    }
}

type IndexFn = Box<dyn Fn(usize) -> usize>;

fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, IndexFn, IndexFn)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Box::new(|i| i), Box::new(|i| i)));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Box::new(|i| i), Box::new(|_| 0)));
    }
    if na == 1 {
        return Ok((b.to_vec(), Box::new(|_| 0), Box::new(|i| i)));
    }
    if b.len() == 1 && a.len() >= 2 && b[0] == a[0] {
        let inner = na / a[0];
        return Ok((a.to_vec(), Box::new(|i| i), Box::new(move |i| i / inner)));
    }
    if a.len() == 1 && b.len() >= 2 && a[0] == b[0] {
        let inner = nb / b[0];
        return Ok((b.to_vec(), Box::new(move |i| i / inner), Box::new(|i| i)));
    }
    dim_err(format!("shapes {a:?} and {b:?} are not broadcastable"))
}

/// Elementwise operation tag for [`Tensor::ew`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ew<T> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Clip(T, T),
}

impl<T: Real> Ew<T> {
    fn arity(&self) -> usize {
        match self {
            Ew::Add | Ew::Sub | Ew::Mul | Ew::Div => 2,
            _ => 1,
        }
    }

    fn unary(&self, v: T) -> T {
        match *self {
            Ew::Neg => -v,
            Ew::Exp => safe_exp(v),
            Ew::Sigmoid => sigmoid(v),
            Ew::Tanh => v.tanh(),
            Ew::Relu => v.max(T::zero()),
            Ew::Softplus => softplus(v),
            Ew::Clip(lo, hi) => v.max(lo).min(hi),
            _ => unreachable!("binary op used as unary"),
        }
    }

    fn binary(&self, a: T, b: T) -> T {
        match self {
            Ew::Add => a + b,
            Ew::Sub => a - b,
            Ew::Mul => a * b,
            Ew::Div => {
                let tiny = T::min_positive_value().sqrt();
                let d = if b.abs() < tiny { tiny.copysign(b) } else { b };
                a / d
            }
            _ => unreachable!("unary op used as binary"),
        }
    }
}

/// Convolution taps. Depthwise kernels are `(C, k, k)`, pointwise `(C_out, C_in)`
/// and dense kernels `(C_out, C_in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub taps: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Depthwise,
    Pointwise,
    Dense,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(taps: Tensor<T>) -> Self {
        Self { taps }
    }

    /// Spatial size `k` implied by the tap shape for the given mode.
    pub fn size(&self, mode: ConvMode) -> Result<usize> {
        let s = self.taps.shape();
        let k = match (mode, s.len()) {
            (ConvMode::Pointwise, 2) => 1,
            (ConvMode::Depthwise, 3) if s[1] == s[2] => s[1],
            (ConvMode::Dense, 4) if s[2] == s[3] => s[2],
            _ => return dim_err(format!("taps {s:?} do not fit {mode:?} convolution")),
        };
        if !matches!(k, 1 | 3 | 5 | 7) {
            return dim_err(format!("kernel size {k} not in {{1,3,5,7}}"));
        }
        Ok(k)
    }

    fn channels(&self, mode: ConvMode) -> (usize, usize) {
        let s = self.taps.shape();
        match mode {
            ConvMode::Depthwise => (s[0], s[0]),
            ConvMode::Pointwise | ConvMode::Dense => (s[0], s[1]),
        }
    }
}

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Eight independent partial sums so the loop vectorizes; the final
/// combination order is fixed.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

/// `c += a · b` with row-major `a` (m×k), `b` (k×n), `c` (m×n). Four rows of
/// `c` share each streamed row of `b`; columns go in cache-sized blocks.
fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const JB: usize = 512;
    for j0 in (0..n).step_by(JB) {
        let j1 = (j0 + JB).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                let br = &b[p * n + j0..p * n + j1];
                for ((((x0, x1), x2), x3), &v) in c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut()).zip(br) {
                    *x0 += a0 * v;
                    *x1 += a1 * v;
                    *x2 += a2 * v;
                    *x3 += a3 * v;
                }
            }
            i += 4;
        }
        for r in i..m {
            let cr = &mut c[r * n + j0..r * n + j1];
            for p in 0..k {
                axpy(cr, a[r * k + p], &b[p * n + j0..p * n + j1]);
            }
        }
    }
}

/// `c[i][j] = a_i · b_j` for rows of `a` (m×k) and `b` (n×k).
fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Patch matrix `(C·k·k) × (H·W)` of a same-padded `k×k` convolution.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut col = vec![T::zero(); c * k * k * hw];
    for i in 0..c {
        let plane = &x[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[((i * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                let (y0, y1) = tap_range(h, dy);
                let (x0, x1) = tap_range(w, dx);
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let ix0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the planes.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut x = vec![T::zero(); c * hw];
    for i in 0..c {
        let plane = &mut x[i * hw..(i + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[((i * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                let (y0, y1) = tap_range(h, dy);
                let (x0, x1) = tap_range(w, dx);
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let ix0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

/// Valid output/input ranges for a tap offset `d` along an axis of length `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out[y][x] += w * inp[y+dy][x+dx]` over the zero-padded domain.
fn shifted_axpy<T: Real>(out: &mut [T], inp: &[T], h: usize, w: usize, dy: isize, dx: isize, wt: T) {
    let (y0, y1) = tap_range(h, dy);
    let (x0, x1) = tap_range(w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let ix0 = (x0 as isize + dx) as usize;
        axpy(o, wt, &inp[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
    }
}

/// `sum out[y][x] * inp[y+dy][x+dx]` over the zero-padded domain.
fn shifted_dot<T: Real>(a: &[T], inp: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (y0, y1) = tap_range(h, dy);
    let (x0, x1) = tap_range(w, dx);
    let mut acc = T::zero();
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let ix0 = (x0 as isize + dx) as usize;
        acc += dot(&a[y * w + x0..y * w + x1], &inp[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
    }
    acc
}

/// Same-padded (zero-extended) 2-D cross-correlation of a `(C, H, W)` tensor.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &ConvKernel<T>, mode: ConvMode) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let k = kernel.size(mode)?;
    let (c_out, c_in) = kernel.channels(mode);
    if c_in != c {
        return dim_err(format!("{mode:?} kernel expects {c_in} channels, input has {c}"));
    }
    let p = (k / 2) as isize;
    let hw = h * w;
    let taps = kernel.taps.data();
    let mut out = vec![T::zero(); c_out * hw];
    match mode {
        ConvMode::Pointwise => gemm_acc(c_out, c_in, hw, taps, x.data(), &mut out),
        ConvMode::Depthwise => {
            for ch in 0..c {
                let dst = &mut out[ch * hw..(ch + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = taps[(ch * k + ky) * k + kx];
                        shifted_axpy(dst, x.plane(ch), h, w, ky as isize - p, kx as isize - p, wt);
                    }
                }
            }
        }
        ConvMode::Dense => {
            let col = im2col(x.data(), c, h, w, k);
            gemm_acc(c_out, c_in * k * k, hw, taps, &col, &mut out);
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

/// Adjoint of [`conv2d`]: returns `(grad_x, grad_taps)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &ConvKernel<T>,
    mode: ConvMode,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    let k = kernel.size(mode)?;
    let (c_out, c_in) = kernel.channels(mode);
    if c_in != c || grad_out.shape() != [c_out, h, w] {
        return dim_err("conv2d_backward shape mismatch");
    }
    let p = (k / 2) as isize;
    let hw = h * w;
    let taps = kernel.taps.data();
    let mut gx = vec![T::zero(); c * hw];
    let mut gw = vec![T::zero(); taps.len()];
    match mode {
        ConvMode::Pointwise => {
            gemm_nt(c_out, c_in, hw, grad_out.data(), x.data(), &mut gw);
            gemm_acc(c_in, c_out, hw, &transpose(c_out, c_in, taps), grad_out.data(), &mut gx);
        }
        ConvMode::Depthwise => {
            for ch in 0..c {
                let g = grad_out.plane(ch);
                for ky in 0..k {
                    for kx in 0..k {
                        let (dy, dx) = (ky as isize - p, kx as isize - p);
                        let t = (ch * k + ky) * k + kx;
                        gw[t] = shifted_dot(g, x.plane(ch), h, w, dy, dx);
                        shifted_axpy(&mut gx[ch * hw..(ch + 1) * hw], g, h, w, -dy, -dx, taps[t]);
                    }
                }
            }
        }
        ConvMode::Dense => {
            let kk = c_in * k * k;
            let col = im2col(x.data(), c, h, w, k);
            gemm_nt(c_out, kk, hw, grad_out.data(), &col, &mut gw);
            let mut gcol = vec![T::zero(); kk * hw];
            gemm_acc(kk, c_out, hw, &transpose(c_out, kk, taps), grad_out.data(), &mut gcol);
            gx = col2im(&gcol, c, h, w, k);
        }
    }
    Ok((Tensor::new(&[c, h, w], gx)?, Tensor::new(kernel.taps.shape(), gw)?))
}

/// Single-plane 3×3 cross-correlation with zero padding, `(H, W)` in and out.
pub fn correlate3<T: Real>(s: &[T], h: usize, w: usize, taps: &[T; 9]) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for ky in 0..3 {
        for kx in 0..3 {
            let wt = taps[ky * 3 + kx];
            if wt != T::zero() {
                shifted_axpy(&mut out, s, h, w, ky as isize - 1, kx as isize - 1, wt);
            }
        }
    }
    out
}

/// Adjoint of [`correlate3`] with respect to its input plane.
pub fn correlate3_adjoint<T: Real>(g: &[T], h: usize, w: usize, taps: &[T; 9]) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for ky in 0..3 {
        for kx in 0..3 {
            let wt = taps[ky * 3 + kx];
            if wt != T::zero() {
                shifted_axpy(&mut out, g, h, w, 1 - ky as isize, 1 - kx as isize, wt);
            }
        }
    }
    out
}

/// `out[r][j] = sum_i x[r][i] * w[j][i]`: rows of `x` (R×I) through `w` (J×I).
pub fn matmul_nt<T: Real>(x: &[T], rows: usize, w: &[T], out_dim: usize) -> Vec<T> {
    let in_dim = w.len() / out_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for j in 0..out_dim {
            out[r * out_dim + j] = dot(xr, &w[j * in_dim..(j + 1) * in_dim]);
        }
    }
    out
}

/// Backward of [`matmul_nt`]: accumulates into `gx` (R×I) and `gw` (J×I).
pub fn matmul_nt_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    out_dim: usize,
    gout: &[T],
    gx: &mut [T],
    gw: &mut [T],
) {
    let in_dim = w.len() / out_dim;
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
        for j in 0..out_dim {
            let g = gout[r * out_dim + j];
            if g != T::zero() {
                axpy(gxr, g, &w[j * in_dim..(j + 1) * in_dim]);
                axpy(&mut gw[j * in_dim..(j + 1) * in_dim], g, xr);
            }
        }
    }
}

/// Central-difference gradient of a scalar function.
///
/// Perturbs each element by `±h` and returns `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("non-finite value at element {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn ew_examples() {
        let z = t(&[1], &[0.0]).ew(Ew::Sigmoid, None).unwrap();
        assert_eq!(z.item(), 0.5);
        let c = t(&[1], &[0.6065]).ew(Ew::Clip(0.0, 0.5), None).unwrap();
        assert_eq!(c.item(), 0.5);
        let e = t(&[2], &[0.0, 2f64.ln()]).ew(Ew::Exp, None).unwrap();
        assert!((e.data()[0] - 1.0).abs() < 1e-15 && (e.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ew_broadcasts_scalars_and_channel_vectors() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = a.ew(Ew::Mul, Some(&t(&[1], &[2.0]))).unwrap();
        assert_eq!(s.data(), &[2.0, 4.0, 6.0, 8.0]);
        let v = a.ew(Ew::Add, Some(&t(&[2], &[10.0, 20.0]))).unwrap();
        assert_eq!(v.data(), &[11.0, 12.0, 23.0, 24.0]);
        let r = t(&[1], &[1.0]).ew(Ew::Sub, Some(&a)).unwrap();
        assert_eq!(r.data(), &[0.0, -1.0, -2.0, -3.0]);
        assert!(matches!(a.ew(Ew::Add, Some(&t(&[3], &[0.0; 3]))), Err(Error::Dimension(_))));
        assert!(a.ew(Ew::Add, None).is_err());
    }

    #[test]
    fn ew_guards_keep_results_finite() {
        let a = t(&[2], &[1.0, 1e4]);
        let d = a.ew(Ew::Div, Some(&t(&[2], &[0.0, 1.0]))).unwrap();
        assert!(d.is_finite());
        assert!(a.ew(Ew::Exp, None).unwrap().is_finite());
        let f = Tensor::<f32>::from_vec(vec![-1e4, 1e4]);
        assert!(f.ew(Ew::Exp, None).unwrap().is_finite());
        assert!(f.ew(Ew::Sigmoid, None).unwrap().is_finite());
        assert!(f.ew(Ew::Softplus, None).unwrap().is_finite());
    }

    #[test]
    fn depthwise_ones_kernel_sums_taps() {
        let x = Tensor::<f32>::full(&[1, 5, 5], 1.0);
        let k = ConvKernel::new(Tensor::full(&[1, 3, 3], 1.0));
        let y = conv2d(&x, &k, ConvMode::Depthwise).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        // corner sees four taps under zero padding
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn pointwise_identity_and_delta_depthwise() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 5], |i| (i as f64 * 0.37).sin());
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &ConvKernel::new(eye), ConvMode::Pointwise).unwrap(), x);
        for k in [3, 5, 7] {
            let mid = k / 2;
            let taps = Tensor::from_fn(&[3, k, k], |i| if i % (k * k) == mid * k + mid { 1.0 } else { 0.0 });
            assert_eq!(conv2d(&x, &ConvKernel::new(taps), ConvMode::Depthwise).unwrap(), x);
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = ConvKernel::new(Tensor::zeros(&[3, 3, 3]));
        assert!(matches!(conv2d(&x, &k, ConvMode::Depthwise), Err(Error::Dimension(_))));
        let even = ConvKernel::new(Tensor::zeros(&[2, 4, 4]));
        assert!(conv2d(&x, &even, ConvMode::Depthwise).is_err());
        let pw = ConvKernel::new(Tensor::zeros(&[1, 3]));
        assert!(conv2d(&x, &pw, ConvMode::Pointwise).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 6], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let cases = [
            (ConvMode::Depthwise, vec![2, 3, 3]),
            (ConvMode::Depthwise, vec![2, 5, 5]),
            (ConvMode::Pointwise, vec![3, 2]),
            (ConvMode::Dense, vec![3, 2, 3, 3]),
        ];
        for (mode, ks) in cases {
            let kern = ConvKernel::new(Tensor::<f64>::from_fn(&ks, |i| ((i * 5 % 13) as f64 - 6.0) / 7.0));
            let probe = conv2d(&x, &kern, mode).unwrap().map(|_| 0.0);
            let probe = Tensor::from_fn(probe.shape(), |i| ((i * 3 % 7) as f64 - 3.0) / 3.0);
            let loss = |y: &Tensor<f64>| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
            let (gx, gw) = conv2d_backward(&x, &kern, mode, &probe).unwrap();
            let fx = finite_diff_grad(|xx| loss(&conv2d(xx, &kern, mode).unwrap()), &x, 1e-5).unwrap();
            let fw = finite_diff_grad(
                |ww| loss(&conv2d(&x, &ConvKernel::new(ww.clone()), mode).unwrap()),
                &kern.taps,
                1e-5,
            )
            .unwrap();
            for (a, b) in gx.data().iter().zip(fx.data()) {
                assert!((a - b).abs() < 1e-8, "{mode:?} grad_x {a} vs {b}");
            }
            for (a, b) in gw.data().iter().zip(fw.data()) {
                assert!((a - b).abs() < 1e-8, "{mode:?} grad_w {a} vs {b}");
            }
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x.item() * x.item(), &t(&[1], &[3.0]), 1e-3).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let g = finite_diff_grad(|x| x.sum(), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let bad = finite_diff_grad(|x| 1.0 / (x.item() - 3.0) / 0.0, &t(&[1], &[1.0]), 1e-3);
        assert!(matches!(bad, Err(Error::Oracle(_))));
    }

    proptest! {
        #[test]
        fn finite_diff_of_linear_functional_is_its_coefficients(
            coef in proptest::collection::vec(-5.0f64..5.0, 1..12),
            x0 in -3.0f64..3.0,
        ) {
            let c = Tensor::from_vec(coef.clone());
            let x = Tensor::full(&[coef.len()], x0);
            let g = finite_diff_grad(|x| x.data().iter().zip(c.data()).map(|(a, b)| a * b).sum(), &x, 1e-3).unwrap();
            for (a, b) in g.data().iter().zip(&coef) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn ew_ignores_shape_metadata(v in proptest::collection::vec(-4.0f64..4.0, 6)) {
            let a = Tensor::new(&[2, 3], v.clone()).unwrap();
            let b = Tensor::new(&[6], v).unwrap();
            for op in [Ew::Sigmoid, Ew::Tanh, Ew::Exp, Ew::Softplus, Ew::Clip(-1.0, 1.0)] {
                let (ra, rb) = (a.ew(op, None).unwrap(), b.ew(op, None).unwrap());
                prop_assert_eq!(ra.data(), rb.data());
            }
        }

        #[test]
        fn delta_kernel_is_identity(v in proptest::collection::vec(-10.0f32..10.0, 2 * 4 * 3)) {
            let x = Tensor::new(&[2, 4, 3], v).unwrap();
            let taps = Tensor::from_fn(&[2, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
            prop_assert_eq!(conv2d(&x, &ConvKernel::new(taps), ConvMode::Depthwise).unwrap(), x);
        }
    }
}

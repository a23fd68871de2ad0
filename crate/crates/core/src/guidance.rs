//! Boundary guidance map built from encoder/decoder feature misalignment.
//!
//! `M = σ(w_b · |∇ cos(F_e, F_d)| + w_f · P_fg)`, where the gradient magnitude
//! is a zero-padded Sobel filter on the per-pixel cosine map and `P_fg` comes
//! from a learnable pointwise head on `[F_e; F_d]`.

use crate::error::{dim_err, Result};
use crate::params::Parameterized;
use crate::real::{sigmoid, Real};
use crate::tensor::{correlate3_adjoint, Tensor};
use crate::Init;

/// Added to each channel-vector norm in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn taps<T: Real>(t: &[f64; 9]) -> [T; 9] {
    t.map(T::lit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParams<T = f32> {
    pub w_b: Tensor<T>,
    pub w_f: Tensor<T>,
    /// Foreground head weights over the `2C` concatenated channels.
    pub fg_w: Tensor<T>,
    pub fg_b: Tensor<T>,
}

impl<T: Real> GuidanceParams<T> {
    pub fn new(channels: usize, init: Init) -> Self {
        let std = (1.0 / (2 * channels) as f64).sqrt();
        Self {
            w_b: Tensor::scalar(T::one()),
            w_f: Tensor::scalar(T::one()),
            fg_w: Tensor::from_fn(&[2 * channels], |_| T::lit(init() * std)),
            fg_b: Tensor::scalar(T::zero()),
        }
    }
}

impl<T: Real> Parameterized<T> for GuidanceParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w_b", &self.w_b);
        f("w_f", &self.w_f);
        f("fg_w", &self.fg_w);
        f("fg_b", &self.fg_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w_b", &mut self.w_b);
        f("w_f", &mut self.w_f);
        f("fg_w", &mut self.fg_w);
        f("fg_b", &mut self.fg_b);
    }
}

/// The guidance map `M`, shape `(H, W)`, values in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap<T = f32> {
    pub m: Tensor<T>,
}

pub fn cosine_map<T: Real>(fe: &Tensor<T>, fd: &Tensor<T>) -> Result<Tensor<T>> {
    fe.expect_same_shape(fd)?;
    let (c, h, w) = fe.dims3()?;
    let hw = h * w;
    let eps = T::lit(COSINE_EPS);
    let (e, d) = (fe.data(), fd.data());
    let out = (0..hw)
        .map(|p| {
            let (mut dot, mut ne, mut nd) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let (a, b) = (e[ch * hw + p], d[ch * hw + p]);
                dot += a * b;
                ne += a * a;
                nd += b * b;
            }
            dot / ((ne.sqrt() + eps) * (nd.sqrt() + eps))
        })
        .collect();
    Tensor::new(&[h, w], out)
}

pub fn cosine_map_backward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = fe.dims3()?;
    let hw = h * w;
    let eps = T::lit(COSINE_EPS);
    let (e, d, g) = (fe.data(), fd.data(), grad.data());
    let mut ge = vec![T::zero(); c * hw];
    let mut gd = vec![T::zero(); c * hw];
    for p in 0..hw {
        let (mut dot, mut ne, mut nd) = (T::zero(), T::zero(), T::zero());
        for ch in 0..c {
            let (a, b) = (e[ch * hw + p], d[ch * hw + p]);
            dot += a * b;
            ne += a * a;
            nd += b * b;
        }
        let (ne, nd) = (ne.sqrt(), nd.sqrt());
        let (de, dd) = (ne + eps, nd + eps);
        let inv = g[p] / (de * dd);
        // d/de of 1/(|e|+eps) contributes -dot/(de^2 dd) * e/|e|
        let ce = if ne > T::zero() { g[p] * dot / (de * de * dd * ne) } else { T::zero() };
        let cd = if nd > T::zero() { g[p] * dot / (de * dd * dd * nd) } else { T::zero() };
        for ch in 0..c {
            let i = ch * hw + p;
            ge[i] = inv * d[i] - ce * e[i];
            gd[i] = inv * e[i] - cd * d[i];
        }
    }
    Ok((Tensor::new(fe.shape(), ge)?, Tensor::new(fe.shape(), gd)?))
}

fn sobel_parts<T: Real>(s: &Tensor<T>) -> Result<(usize, usize, Vec<T>, Vec<T>)> {
    let (h, w) = s.dims2()?;
    if h < 3 || w < 3 {
        return dim_err(format!("Sobel needs at least 3x3, got {h}x{w}"));
    }
    // separable form: smooth across, then difference, so flat regions give exact zeros
    let v = s.data();
    let at = |i: isize, j: isize| -> T {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            T::zero()
        } else {
            v[i as usize * w + j as usize]
        }
    };
    let two = T::lit(2.0);
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let col = |j: isize| at(i - 1, j) + two * at(i, j) + at(i + 1, j);
            let row = |i: isize| at(i, j - 1) + two * at(i, j) + at(i, j + 1);
            let k = i as usize * w + j as usize;
            gx[k] = col(j + 1) - col(j - 1);
            gy[k] = row(i + 1) - row(i - 1);
        }
    }
    Ok((h, w, gx, gy))
}

/// Gradient magnitude `sqrt(Gx² + Gy²)` with zero-padded borders.
pub fn sobel_mag<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, gx, gy) = sobel_parts(s)?;
    let out = gx.iter().zip(&gy).map(|(&a, &b)| (a * a + b * b).sqrt()).collect();
    Tensor::new(&[h, w], out)
}

/// Adjoint of [`sobel_mag`]; zero-magnitude pixels pass no gradient.
pub fn sobel_mag_backward<T: Real>(s: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, gx, gy) = sobel_parts(s)?;
    let mut dx = vec![T::zero(); h * w];
    let mut dy = vec![T::zero(); h * w];
    for i in 0..h * w {
        let m = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
        if m > T::zero() {
            dx[i] = grad.data()[i] * gx[i] / m;
            dy[i] = grad.data()[i] * gy[i] / m;
        }
    }
    let ax = correlate3_adjoint(&dx, h, w, &taps(&SOBEL_X));
    let ay = correlate3_adjoint(&dy, h, w, &taps(&SOBEL_Y));
    Tensor::new(&[h, w], ax.iter().zip(&ay).map(|(&a, &b)| a + b).collect())
}

fn fg_logits<T: Real>(fe: &Tensor<T>, fd: &Tensor<T>, p: &GuidanceParams<T>) -> Result<Tensor<T>> {
    fe.expect_same_shape(fd)?;
    let (c, h, w) = fe.dims3()?;
    if p.fg_w.len() != 2 * c {
        return dim_err(format!("foreground head expects {} channels, got {}", p.fg_w.len() / 2, c));
    }
    let hw = h * w;
    let mut z = vec![p.fg_b.item(); hw];
    let wts = p.fg_w.data();
    for ch in 0..c {
        for (zi, (&a, &b)) in z.iter_mut().zip(fe.plane(ch).iter().zip(fd.plane(ch))) {
            *zi += wts[ch] * a + wts[c + ch] * b;
        }
    }
    Tensor::new(&[h, w], z)
}

pub fn foreground_prob<T: Real>(fe: &Tensor<T>, fd: &Tensor<T>, p: &GuidanceParams<T>) -> Result<Tensor<T>> {
    Ok(fg_logits(fe, fd, p)?.map(sigmoid))
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GuidanceCache<T> {
    pub cosine: Tensor<T>,
    pub sobel: Tensor<T>,
    pub p_fg: Tensor<T>,
    pub map: GuidanceMap<T>,
}

pub fn guidance_forward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: &GuidanceParams<T>,
) -> Result<GuidanceCache<T>> {
    let cosine = cosine_map(fe, fd)?;
    let sobel = sobel_mag(&cosine)?;
    let p_fg = foreground_prob(fe, fd, p)?;
    let (wb, wf) = (p.w_b.item(), p.w_f.item());
    let m = sobel.zip_map(&p_fg, |s, f| sigmoid(wb * s + wf * f))?;
    Ok(GuidanceCache { cosine, sobel, p_fg, map: GuidanceMap { m } })
}

pub fn build_guidance_map<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: &GuidanceParams<T>,
) -> Result<GuidanceMap<T>> {
    Ok(guidance_forward(fe, fd, p)?.map)
}

/// Backpropagates `dL/dM`; returns `(dL/dF_e, dL/dF_d)` and accumulates
/// parameter gradients into `grads`.
pub fn guidance_backward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: &GuidanceParams<T>,
    cache: &GuidanceCache<T>,
    grad_m: &Tensor<T>,
    grads: &mut GuidanceParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = fe.dims3()?;
    let hw = h * w;
    let (wb, wf) = (p.w_b.item(), p.w_f.item());
    // pre-activation gradient of the outer sigmoid
    let gz: Vec<T> = grad_m
        .data()
        .iter()
        .zip(cache.map.m.data())
        .map(|(&g, &m)| g * m * (T::one() - m))
        .collect();
    let mut g_wb = T::zero();
    let mut g_wf = T::zero();
    let mut g_sob = vec![T::zero(); hw];
    let mut g_fgz = vec![T::zero(); hw];
    for i in 0..hw {
        g_wb += gz[i] * cache.sobel.data()[i];
        g_wf += gz[i] * cache.p_fg.data()[i];
        g_sob[i] = gz[i] * wb;
        let pf = cache.p_fg.data()[i];
        g_fgz[i] = gz[i] * wf * pf * (T::one() - pf);
    }
    grads.w_b.data_mut()[0] += g_wb;
    grads.w_f.data_mut()[0] += g_wf;

    let g_cos = sobel_mag_backward(&cache.cosine, &Tensor::new(&[h, w], g_sob)?)?;
    let (mut ge, mut gd) = cosine_map_backward(fe, fd, &g_cos)?;

    grads.fg_b.data_mut()[0] += g_fgz.iter().copied().sum();
    let wts = p.fg_w.data();
    for ch in 0..c {
        let (mut a, mut b) = (T::zero(), T::zero());
        for i in 0..hw {
            a += g_fgz[i] * fe.plane(ch)[i];
            b += g_fgz[i] * fd.plane(ch)[i];
        }
        grads.fg_w.data_mut()[ch] += a;
        grads.fg_w.data_mut()[c + ch] += b;
        for i in 0..hw {
            ge.plane_mut(ch)[i] += g_fgz[i] * wts[ch];
            gd.plane_mut(ch)[i] += g_fgz[i] * wts[c + ch];
        }
    }
    Ok((ge, gd))
}

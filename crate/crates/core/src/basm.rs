//! Boundary-aware 2-D block: a four-direction modulated selective scan, a
//! multi-scale depthwise branch gated by the guidance map, and a per-pixel
//! two-stream softmax fusion with residual.

use crate::error::{dim_err, Result};
use crate::guidance::{guidance_backward, guidance_forward, GuidanceCache, GuidanceMap, GuidanceParams};
use crate::params::{visit_child, visit_child_mut, Parameterized};
use crate::posterior::{posterior_backward, posterior_forward, PosteriorCache, PosteriorParams, RetainEnhance};
use crate::real::{sigmoid, softplus, softplus_inv, Real};
use crate::scan::{
    scan_orders, scan_orders_backward, ProjectionCache, ScanMode, ScanOutput, ScanSequence, SelectiveSsm, SsmParams,
    StateMatrix,
};
use crate::tensor::{conv2d, conv2d_backward, ConvKernel, ConvMode, Tensor};
use crate::Init;

/// Row-major forward/backward and column-major forward/backward visiting
/// orders over an `H×W` grid (positions are `i·W + j`).
pub fn scan_directions(h: usize, w: usize) -> Vec<Vec<usize>> {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let row_rev = row.iter().rev().copied().collect();
    let col_rev = col.iter().rev().copied().collect();
    vec![row, row_rev, col, col_rev]
}

/// `(C, H, W)` to tokens `L×C` with `L = H·W`.
pub fn to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape(&[c, h * w])?.transpose2()
}

/// Tokens `L×C` back to `(C, H, W)`.
pub fn from_tokens<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, c) = t.dims2()?;
    t.transpose2()?.reshape(&[c, h, w])
}

/// Depthwise 3/5/7 kernels and the `3C → C` pointwise projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SasfParams<T = f32> {
    pub dw3: Tensor<T>,
    pub dw5: Tensor<T>,
    pub dw7: Tensor<T>,
    pub proj: Tensor<T>,
}

impl<T: Real> SasfParams<T> {
    pub fn new(channels: usize, init: Init) -> Self {
        let mut dw = |k: usize| {
            let sd = 1.0 / k as f64;
            Tensor::from_fn(&[channels, k, k], |_| T::lit(init() * sd))
        };
        let (dw3, dw5, dw7) = (dw(3), dw(5), dw(7));
        let sd = (1.0 / (3 * channels) as f64).sqrt();
        let proj = Tensor::from_fn(&[channels, 3 * channels], |_| T::lit(init() * sd));
        Self { dw3, dw5, dw7, proj }
    }

    fn kernels(&self) -> [&Tensor<T>; 3] {
        [&self.dw3, &self.dw5, &self.dw7]
    }
}

impl<T: Real> Parameterized<T> for SasfParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("dw3", &self.dw3);
        f("dw5", &self.dw5);
        f("dw7", &self.dw7);
        f("proj", &self.proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("dw3", &mut self.dw3);
        f("dw5", &mut self.dw5);
        f("dw7", &mut self.dw7);
        f("proj", &mut self.proj);
    }
}

/// Two per-pixel heads over `[F_ssm; F_safs; M]` (`2C+1` weights plus bias
/// each) and the temperature `T = softplus(temp_raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = f32> {
    pub head_ssm: Tensor<T>,
    pub head_ssm_b: Tensor<T>,
    pub head_safs: Tensor<T>,
    pub head_safs_b: Tensor<T>,
    pub temp_raw: Tensor<T>,
}

impl<T: Real> FusionParams<T> {
    pub fn new(channels: usize, init: Init) -> Self {
        let sd = (1.0 / (2 * channels + 1) as f64).sqrt();
        let mut head = || Tensor::from_fn(&[2 * channels + 1], |_| T::lit(init() * sd));
        let (head_ssm, head_safs) = (head(), head());
        Self {
            head_ssm,
            head_ssm_b: Tensor::scalar(T::zero()),
            head_safs,
            head_safs_b: Tensor::scalar(T::zero()),
            temp_raw: Tensor::scalar(softplus_inv(T::one())),
        }
    }

    pub fn temperature(&self) -> T {
        softplus(self.temp_raw.item())
    }
}

impl<T: Real> Parameterized<T> for FusionParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("head_ssm", &self.head_ssm);
        f("head_ssm_b", &self.head_ssm_b);
        f("head_safs", &self.head_safs);
        f("head_safs_b", &self.head_safs_b);
        f("temp_raw", &self.temp_raw);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("head_ssm", &mut self.head_ssm);
        f("head_ssm_b", &mut self.head_ssm_b);
        f("head_safs", &mut self.head_safs);
        f("head_safs_b", &mut self.head_safs_b);
        f("temp_raw", &mut self.temp_raw);
    }
}

/// Conv path output before the `(1 + M)` gain, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SasfCache<T> {
    multi: Tensor<T>,
    pre_gain: Tensor<T>,
}

fn sasf_forward<T: Real>(x: &Tensor<T>, m: &GuidanceMap<T>, p: &SasfParams<T>) -> Result<(Tensor<T>, SasfCache<T>)> {
    let (c, h, w) = x.dims3()?;
    if m.m.shape() != [h, w] {
        return dim_err("guidance map does not match feature size");
    }
    let branches = p
        .kernels()
        .iter()
        .map(|k| conv2d(x, &ConvKernel::new((*k).clone()), ConvMode::Depthwise))
        .collect::<Result<Vec<_>>>()?;
    let multi = Tensor::concat_channels(&branches.iter().collect::<Vec<_>>())?;
    let pre_gain = conv2d(&multi, &ConvKernel::new(p.proj.clone()), ConvMode::Pointwise)?;
    let hw = h * w;
    let mut out = pre_gain.clone();
    for ch in 0..c {
        for (o, &mv) in out.plane_mut(ch).iter_mut().zip(m.m.data()) {
            *o *= T::one() + mv;
        }
    }
    debug_assert_eq!(out.len(), c * hw);
    Ok((out, SasfCache { multi, pre_gain }))
}

/// `Conv1×1([DW3(x); DW5(x); DW7(x)]) ⊙ (1 + M)`.
pub fn sasf_branch<T: Real>(x: &Tensor<T>, m: &GuidanceMap<T>, p: &SasfParams<T>) -> Result<Tensor<T>> {
    Ok(sasf_forward(x, m, p)?.0)
}

/// Returns `(dL/dx, dL/dM)` and accumulates kernel gradients.
fn sasf_backward<T: Real>(
    x: &Tensor<T>,
    m: &GuidanceMap<T>,
    p: &SasfParams<T>,
    cache: &SasfCache<T>,
    grad: &Tensor<T>,
    grads: &mut SasfParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let mut g_pre = grad.clone();
    let mut g_m = vec![T::zero(); hw];
    for ch in 0..c {
        let pre = cache.pre_gain.plane(ch);
        for (i, g) in g_pre.plane_mut(ch).iter_mut().enumerate() {
            g_m[i] += *g * pre[i];
            *g *= T::one() + m.m.data()[i];
        }
    }
    let (g_multi, g_proj) =
        conv2d_backward(&cache.multi, &ConvKernel::new(p.proj.clone()), ConvMode::Pointwise, &g_pre)?;
    grads.proj.add_assign(&g_proj)?;
    let mut gx = Tensor::zeros(x.shape());
    let grad_kernels = [&mut grads.dw3, &mut grads.dw5, &mut grads.dw7];
    for (b, (k, gk)) in p.kernels().into_iter().zip(grad_kernels).enumerate() {
        let gb = Tensor::new(&[c, h, w], g_multi.data()[b * c * hw..(b + 1) * c * hw].to_vec())?;
        let (gxb, gw) = conv2d_backward(x, &ConvKernel::new(k.clone()), ConvMode::Depthwise, &gb)?;
        gx.add_assign(&gxb)?;
        gk.add_assign(&gw)?;
    }
    Ok((gx, Tensor::new(&[h, w], g_m)?))
}

#[derive(Clone, Debug)]
pub struct MambaCache<T> {
    /// Normalized tokens and their `1/rms` factors.
    tokens: Tensor<T>,
    inv_rms: Vec<T>,
    seq: ScanSequence<T>,
    params: SsmParams<T>,
    proj: ProjectionCache<T>,
    out: ScanOutput<T>,
}

const TOKEN_EPS: f64 = 1e-5;

/// Scales each `L × C` token row to unit RMS over channels, so the scan sees
/// the same magnitude at every level of the network.
pub fn rms_tokens<T: Real>(tokens: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (l, c) = tokens.dims2()?;
    let mut out = tokens.clone();
    let mut inv = Vec::with_capacity(l);
    for row in out.data_mut().chunks_mut(c) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::lit(c as f64);
        let r = T::one() / (ms + T::lit(TOKEN_EPS)).sqrt();
        row.iter_mut().for_each(|v| *v *= r);
        inv.push(r);
    }
    Ok((out, inv))
}

/// Multiplies each token row back by its RMS, so the scan output scales
/// linearly with the block input.
pub fn restore_scale<T: Real>(tokens: &Tensor<T>, inv: &[T]) -> Tensor<T> {
    let c = tokens.shape()[1];
    let mut out = tokens.clone();
    for (row, &r) in out.data_mut().chunks_mut(c).zip(inv) {
        row.iter_mut().for_each(|v| *v /= r);
    }
    out
}

/// `dL/dx = r (g − x̂ · mean_c(g ⊙ x̂))` per token.
fn rms_tokens_backward<T: Real>(normed: &Tensor<T>, inv: &[T], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = normed.dims2()?;
    let mut out = grad.clone();
    for ((g, xh), &r) in out.data_mut().chunks_mut(c).zip(normed.data().chunks(c)).zip(inv) {
        let dot = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / T::lit(c as f64);
        for (gi, &xi) in g.iter_mut().zip(xh) {
            *gi = r * (*gi - xi * dot);
        }
    }
    Ok(out)
}

fn mamba_forward<T: Real>(
    x: &Tensor<T>,
    re: Option<&RetainEnhance<T>>,
    ssm: &SelectiveSsm<T>,
    mode: ScanMode,
) -> Result<(Tensor<T>, MambaCache<T>)> {
    let (_, h, w) = x.dims3()?;
    let (tokens, inv_rms) = rms_tokens(&to_tokens(x)?)?;
    let (params, proj) = ssm.project(&tokens, None)?;
    let seq = ScanSequence {
        tokens: tokens.clone(),
        retain: re.map(|r| r.retain.data().to_vec()),
        enhance: re.map(|r| r.enhance.data().to_vec()),
    };
    let out = scan_orders(&seq, &params, &scan_directions(h, w), mode, true)?;
    let y = from_tokens(&restore_scale(&out.y, &inv_rms), h, w)?;
    Ok((y, MambaCache { tokens, inv_rms, seq, params, proj, out }))
}

/// Mean of the four directional modulated scans of the RMS-normalized tokens,
/// rescaled by each token's RMS and re-scattered to `(C, H, W)`.
/// `re = None` scans with the unmodulated coefficients.
pub fn mamba_branch<T: Real>(
    x: &Tensor<T>,
    re: Option<&RetainEnhance<T>>,
    ssm: &SelectiveSsm<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    Ok(mamba_forward(x, re, ssm, mode)?.0)
}

/// Returns `dL/dx` and, for a modulated scan, `(dL/dR, dL/dE)` as `(H, W)` maps.
#[allow(clippy::type_complexity)]
fn mamba_backward<T: Real>(
    x: &Tensor<T>,
    ssm: &SelectiveSsm<T>,
    cache: &MambaCache<T>,
    grad: &Tensor<T>,
    grads: &mut SelectiveSsm<T>,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let (_, h, w) = x.dims3()?;
    let mut gy = to_tokens(grad)?;
    let c = gy.shape()[1];
    // the output is rescaled by s = 1/r; ds/dx = x̂ / C
    let mut g_scale = Vec::with_capacity(cache.inv_rms.len());
    for ((g, yh), &r) in gy.data_mut().chunks_mut(c).zip(cache.out.y.data().chunks(c)).zip(&cache.inv_rms) {
        g_scale.push(g.iter().zip(yh).map(|(&a, &b)| a * b).sum::<T>() / T::lit(c as f64));
        g.iter_mut().for_each(|v| *v /= r);
    }
    let sg = scan_orders_backward(&cache.seq, &cache.params, &scan_directions(h, w), &cache.out, &gy)?;
    let gt = ssm.project_backward(&cache.tokens, &cache.proj, &sg, grads)?;
    let mut gt = rms_tokens_backward(&cache.tokens, &cache.inv_rms, &gt)?;
    for ((g, xh), &gs) in gt.data_mut().chunks_mut(c).zip(cache.tokens.data().chunks(c)).zip(&g_scale) {
        for (gi, &xi) in g.iter_mut().zip(xh) {
            *gi += gs * xi;
        }
    }
    let re = match (sg.retain, sg.enhance) {
        (Some(r), Some(e)) => Some((Tensor::new(&[h, w], r)?, Tensor::new(&[h, w], e)?)),
        _ => None,
    };
    Ok((from_tokens(&gt, h, w)?, re))
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    z_ssm: Vec<T>,
    z_safs: Vec<T>,
    /// Per-pixel weight of the scan stream.
    pub w_ssm: Tensor<T>,
}

fn head_logits<T: Real>(f_ssm: &Tensor<T>, f_safs: &Tensor<T>, m: &Tensor<T>, wts: &Tensor<T>, b: T) -> Vec<T> {
    let c = f_ssm.shape()[0];
    let hw = m.len();
    let w = wts.data();
    let mut z = vec![b; hw];
    for ch in 0..c {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi += w[ch] * f_ssm.plane(ch)[i] + w[c + ch] * f_safs.plane(ch)[i];
        }
    }
    for (zi, &mv) in z.iter_mut().zip(m.data()) {
        *zi += w[2 * c] * mv;
    }
    z
}

fn fusion_forward<T: Real>(
    f_ssm: &Tensor<T>,
    f_safs: &Tensor<T>,
    m: &GuidanceMap<T>,
    residual: &Tensor<T>,
    p: &FusionParams<T>,
    enabled: bool,
) -> Result<(Tensor<T>, FusionCache<T>)> {
    f_ssm.expect_same_shape(f_safs)?;
    f_ssm.expect_same_shape(residual)?;
    let (c, h, w) = f_ssm.dims3()?;
    if m.m.shape() != [h, w] || p.head_ssm.len() != 2 * c + 1 {
        return dim_err("fusion inputs do not match");
    }
    let (z_ssm, z_safs, w_ssm) = if enabled {
        let zs = head_logits(f_ssm, f_safs, &m.m, &p.head_ssm, p.head_ssm_b.item());
        let za = head_logits(f_ssm, f_safs, &m.m, &p.head_safs, p.head_safs_b.item());
        let t = p.temperature();
        // two-way softmax is a sigmoid of the scaled logit gap
        let ws = zs.iter().zip(&za).map(|(&a, &b)| sigmoid((a - b) / t)).collect();
        (zs, za, ws)
    } else {
        (Vec::new(), Vec::new(), vec![T::lit(0.5); h * w])
    };
    let mut out = residual.clone();
    for ch in 0..c {
        let (s, a) = (f_ssm.plane(ch), f_safs.plane(ch));
        for (i, o) in out.plane_mut(ch).iter_mut().enumerate() {
            let ws = w_ssm[i];
            *o += ws * s[i] + (T::one() - ws) * a[i];
        }
    }
    Ok((out, FusionCache { z_ssm, z_safs, w_ssm: Tensor::new(&[h, w], w_ssm)? }))
}

/// Per-pixel softmax over the two streams at temperature `T`, plus residual.
/// With `enabled = false` both weights are fixed at 0.5.
pub fn se_fusion<T: Real>(
    f_ssm: &Tensor<T>,
    f_safs: &Tensor<T>,
    m: &GuidanceMap<T>,
    residual: &Tensor<T>,
    p: &FusionParams<T>,
    enabled: bool,
) -> Result<Tensor<T>> {
    Ok(fusion_forward(f_ssm, f_safs, m, residual, p, enabled)?.0)
}

/// Returns `(dL/dF_ssm, dL/dF_safs, dL/dM)`; the residual gradient is `grad`.
#[allow(clippy::too_many_arguments)]
fn fusion_backward<T: Real>(
    f_ssm: &Tensor<T>,
    f_safs: &Tensor<T>,
    m: &GuidanceMap<T>,
    p: &FusionParams<T>,
    cache: &FusionCache<T>,
    enabled: bool,
    grad: &Tensor<T>,
    grads: &mut FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = f_ssm.dims3()?;
    let hw = h * w;
    let ws = cache.w_ssm.data();
    let mut g_s = Tensor::zeros(f_ssm.shape());
    let mut g_a = Tensor::zeros(f_ssm.shape());
    let mut g_w = vec![T::zero(); hw];
    for ch in 0..c {
        let (s, a, g) = (f_ssm.plane(ch), f_safs.plane(ch), grad.plane(ch));
        let gs = g_s.plane_mut(ch);
        for i in 0..hw {
            gs[i] = g[i] * ws[i];
            g_w[i] += g[i] * (s[i] - a[i]);
        }
        let ga = g_a.plane_mut(ch);
        for i in 0..hw {
            ga[i] = g[i] * (T::one() - ws[i]);
        }
    }
    let mut g_m = vec![T::zero(); hw];
    if enabled {
        let t = p.temperature();
        let mut g_t = T::zero();
        // dL/d(gap/T) where gap = z_s - z_a
        let g_gap: Vec<T> = (0..hw)
            .map(|i| {
                let gd = g_w[i] * ws[i] * (T::one() - ws[i]);
                g_t -= gd * (cache.z_ssm[i] - cache.z_safs[i]) / (t * t);
                gd / t
            })
            .collect();
        grads.temp_raw.data_mut()[0] += g_t * sigmoid(p.temp_raw.item());
        for (sign, wts, gw, gb) in [
            (T::one(), &p.head_ssm, &mut grads.head_ssm, &mut grads.head_ssm_b),
            (-T::one(), &p.head_safs, &mut grads.head_safs, &mut grads.head_safs_b),
        ] {
            let wv = wts.data();
            let gwv = gw.data_mut();
            let mut gbias = T::zero();
            for i in 0..hw {
                let gz = sign * g_gap[i];
                gbias += gz;
                gwv[2 * c] += gz * m.m.data()[i];
                g_m[i] += gz * wv[2 * c];
            }
            gb.data_mut()[0] += gbias;
            for ch in 0..c {
                let (s, a) = (f_ssm.plane(ch), f_safs.plane(ch));
                let (mut acc_s, mut acc_a) = (T::zero(), T::zero());
                let gsp = g_s.plane_mut(ch);
                for i in 0..hw {
                    let gz = sign * g_gap[i];
                    acc_s += gz * s[i];
                    gsp[i] += gz * wv[ch];
                }
                let gap_ = g_a.plane_mut(ch);
                for i in 0..hw {
                    let gz = sign * g_gap[i];
                    acc_a += gz * a[i];
                    gap_[i] += gz * wv[c + ch];
                }
                gwv[ch] += acc_s;
                gwv[c + ch] += acc_a;
            }
        }
    }
    Ok((g_s, g_a, Tensor::new(&[h, w], g_m)?))
}

/// How encoder and decoder features combine into the block input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InputFusion {
    #[default]
    Sum,
    /// `Conv1×1([F_e; F_d])`, `2C → C`.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasmConfig {
    pub channels: usize,
    pub state: usize,
    pub modulation: bool,
    pub se_fusion: bool,
    pub input: InputFusion,
    pub mode: ScanMode,
    pub dt_init: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub mu_r: f64,
    pub mu_e: f64,
}

impl BasmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            state: 8,
            modulation: true,
            se_fusion: true,
            input: InputFusion::Sum,
            mode: ScanMode::Parallel,
            dt_init: 0.1,
            tau: 0.5,
            alpha: 0.5,
            gamma: 1.0,
            mu_r: 0.8,
            mu_e: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasmParams<T = f32> {
    pub guidance: GuidanceParams<T>,
    pub posterior: PosteriorParams<T>,
    pub ssm: SelectiveSsm<T>,
    pub sasf: SasfParams<T>,
    pub fusion: FusionParams<T>,
    /// Present only for [`InputFusion::Concat`].
    pub input_proj: Option<Tensor<T>>,
}

impl<T: Real> BasmParams<T> {
    pub fn new(cfg: &BasmConfig, init: Init) -> Self {
        let c = cfg.channels;
        let input_proj = (cfg.input == InputFusion::Concat).then(|| {
            let sd = (1.0 / (2 * c) as f64).sqrt();
            Tensor::from_fn(&[c, 2 * c], |_| T::lit(init() * sd))
        });
        Self {
            guidance: GuidanceParams::new(c, init),
            posterior: PosteriorParams::new(cfg.tau, cfg.alpha, cfg.gamma, cfg.mu_r, cfg.mu_e, init),
            ssm: SelectiveSsm::new(c, cfg.state, StateMatrix::NegExp, true, cfg.dt_init, init),
            sasf: SasfParams::new(c, init),
            fusion: FusionParams::new(c, init),
            input_proj,
        }
    }

    /// Keeps constrained parameters in range after an update.
    pub fn project(&mut self) {
        self.posterior.project();
    }
}

impl<T: Real> Parameterized<T> for BasmParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        visit_child("guidance", &self.guidance, f);
        visit_child("posterior", &self.posterior, f);
        visit_child("ssm", &self.ssm, f);
        visit_child("sasf", &self.sasf, f);
        visit_child("fusion", &self.fusion, f);
        if let Some(p) = &self.input_proj {
            f("input_proj", p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        visit_child_mut("guidance", &mut self.guidance, f);
        visit_child_mut("posterior", &mut self.posterior, f);
        visit_child_mut("ssm", &mut self.ssm, f);
        visit_child_mut("sasf", &mut self.sasf, f);
        visit_child_mut("fusion", &mut self.fusion, f);
        if let Some(p) = &mut self.input_proj {
            f("input_proj", p);
        }
    }
}

/// Everything the backward pass needs, plus the intermediate maps for reports.
#[derive(Clone, Debug)]
pub struct BasmCache<T> {
    pub x: Tensor<T>,
    pub guidance: GuidanceCache<T>,
    pub posterior: Option<PosteriorCache<T>>,
    mamba: MambaCache<T>,
    pub f_ssm: Tensor<T>,
    sasf: SasfCache<T>,
    pub f_safs: Tensor<T>,
    pub fusion: FusionCache<T>,
}

fn block_input<T: Real>(fe: &Tensor<T>, fd: &Tensor<T>, p: &BasmParams<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    fe.expect_same_shape(fd)?;
    match &p.input_proj {
        None => Ok((fe.zip_map(fd, |a, b| a + b)?, None)),
        Some(w) => {
            let cat = Tensor::concat_channels(&[fe, fd])?;
            Ok((conv2d(&cat, &ConvKernel::new(w.clone()), ConvMode::Pointwise)?, Some(cat)))
        }
    }
}

pub fn basm_forward_cached<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: &BasmParams<T>,
    cfg: &BasmConfig,
) -> Result<(Tensor<T>, BasmCache<T>)> {
    let (c, h, w) = fe.dims3()?;
    if c != cfg.channels {
        return dim_err(format!("block built for {} channels, got {c}", cfg.channels));
    }
    let (x, _) = block_input(fe, fd, p)?;
    let guidance = guidance_forward(fe, fd, &p.guidance)?;
    let posterior = cfg.modulation.then(|| posterior_forward(&guidance.map, &p.posterior)).transpose()?;
    let (f_ssm, mamba) = mamba_forward(&x, posterior.as_ref().map(|pc| &pc.out), &p.ssm, cfg.mode)?;
    let (f_safs, sasf) = sasf_forward(&x, &guidance.map, &p.sasf)?;
    let (out, fusion) = fusion_forward(&f_ssm, &f_safs, &guidance.map, &x, &p.fusion, cfg.se_fusion)?;
    debug_assert_eq!(out.shape(), [c, h, w]);
    Ok((out, BasmCache { x, guidance, posterior, mamba, f_ssm, sasf, f_safs, fusion }))
}

/// `F_out = w_ssm · F_ssm + w_safs · F_safs + x` with `x = F_e + F_d`.
pub fn basm_forward<T: Real>(fe: &Tensor<T>, fd: &Tensor<T>, p: &BasmParams<T>, cfg: &BasmConfig) -> Result<Tensor<T>> {
    Ok(basm_forward_cached(fe, fd, p, cfg)?.0)
}

/// Returns `(dL/dF_e, dL/dF_d)` and accumulates all block parameter gradients.
pub fn basm_backward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: &BasmParams<T>,
    cfg: &BasmConfig,
    cache: &BasmCache<T>,
    grad: &Tensor<T>,
    grads: &mut BasmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let map = &cache.guidance.map;
    let (g_ssm, g_safs, mut g_m) = fusion_backward(
        &cache.f_ssm,
        &cache.f_safs,
        map,
        &p.fusion,
        &cache.fusion,
        cfg.se_fusion,
        grad,
        &mut grads.fusion,
    )?;
    let mut gx = grad.clone();
    let (gx_safs, gm_safs) = sasf_backward(&cache.x, map, &p.sasf, &cache.sasf, &g_safs, &mut grads.sasf)?;
    gx.add_assign(&gx_safs)?;
    g_m.add_assign(&gm_safs)?;
    let (gx_ssm, g_re) = mamba_backward(&cache.x, &p.ssm, &cache.mamba, &g_ssm, &mut grads.ssm)?;
    gx.add_assign(&gx_ssm)?;
    if let (Some(pc), Some((gr, ge))) = (&cache.posterior, g_re) {
        let gm_post = posterior_backward(map, &p.posterior, pc, &gr, &ge, &mut grads.posterior)?;
        g_m.add_assign(&gm_post)?;
    }
    let (mut g_fe, mut g_fd) = guidance_backward(fe, fd, &p.guidance, &cache.guidance, &g_m, &mut grads.guidance)?;
    match (&p.input_proj, grads.input_proj.as_mut()) {
        (Some(w), Some(gw)) => {
            let (_, cat) = block_input(fe, fd, p)?;
            let cat = cat.expect("concat input");
            let (g_cat, g_w) = conv2d_backward(&cat, &ConvKernel::new(w.clone()), ConvMode::Pointwise, &gx)?;
            gw.add_assign(&g_w)?;
            let n = fe.len();
            for (i, v) in g_fe.data_mut().iter_mut().enumerate() {
                *v += g_cat.data()[i];
            }
            for (i, v) in g_fd.data_mut().iter_mut().enumerate() {
                *v += g_cat.data()[n + i];
            }
        }
        _ => {
            g_fe.add_assign(&gx)?;
            g_fd.add_assign(&gx)?;
        }
    }
    Ok((g_fe, g_fd))
}

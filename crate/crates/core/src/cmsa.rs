//! Channel state aggregation: channels become a token sequence, split into
//! contiguous groups, each scanned with clipped transitions, then read out as
//! per-channel gates with a residual.
//!
//! The per-step transition is `min(exp(Δ A), λ)` and the cumulative decay is
//! capped at `Λ` by saturating the recurrent multiplier itself, so the
//! effective multiplier is `min(exp(Δ A), λ, Λ)`. Every span product is then
//! at most `Λ`, which gives `‖h_k‖ ≤ max_i ‖B̄_i‖‖u_i‖ / (1 - Λ)`.

use crate::error::{dim_err, Error, Result};
use crate::params::{visit_child, visit_child_mut, Parameterized};
use crate::real::{logit, sigmoid, softplus, softplus_inv, Real};
use crate::scan::{
    scan_backward, scan_forward, ProjectionCache, ScanMode, ScanOutput, ScanSequence, SelectiveSsm, SsmParams,
    StateMatrix,
};
use crate::tensor::Tensor;
use crate::Init;

/// `Λ = σ(θ) · LAMBDA_CEIL` keeps the cumulative cap strictly below 1.
pub const LAMBDA_CEIL: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmsaConfig {
    pub channels: usize,
    pub groups: usize,
    /// Token width `d_m`.
    pub width: usize,
    pub state: usize,
    pub lambda_init: f64,
    pub cap_init: f64,
    pub dt_init: f64,
    pub mode: ScanMode,
    /// `false` drops both bounds; only meant as a control.
    pub clip: bool,
}

impl CmsaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: 4,
            width: 8,
            state: 4,
            lambda_init: 1.0,
            cap_init: 0.9,
            dt_init: 0.5,
            mode: ScanMode::Parallel,
            clip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "cmsa.groups = {} does not divide {} channels",
                self.groups, self.channels
            )));
        }
        if !(self.cap_init > 0.0 && self.cap_init < LAMBDA_CEIL) {
            return Err(Error::Config(format!("cmsa.Lambda_init must lie in (0, {LAMBDA_CEIL}), got {}", self.cap_init)));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::Config(format!("cmsa.lambda_init must be positive, got {}", self.lambda_init)));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.channels / self.groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmsaParams<T = f32> {
    /// `d_m × 2` over the pooled `(mean, max)` pair.
    pub token_w: Tensor<T>,
    pub token_b: Tensor<T>,
    pub ssm: SelectiveSsm<T>,
    /// `λ = softplus(lambda_raw)`.
    pub lambda_raw: Tensor<T>,
    /// `Λ = σ(theta) · 0.999`.
    pub theta: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Real> CmsaParams<T> {
    pub fn new(cfg: &CmsaConfig, init: Init) -> Self {
        let d = cfg.width;
        let sd = (1.0 / d as f64).sqrt();
        Self {
            token_w: Tensor::from_fn(&[d, 2], |_| T::lit(init() * 0.7)),
            token_b: Tensor::zeros(&[d]),
            ssm: SelectiveSsm::new(d, cfg.state, StateMatrix::Free, false, cfg.dt_init, init),
            lambda_raw: Tensor::scalar(softplus_inv(T::lit(cfg.lambda_init))),
            theta: Tensor::scalar(logit(T::lit(cfg.cap_init / LAMBDA_CEIL))),
            out_w: Tensor::from_fn(&[d], |_| T::lit(init() * sd)),
            out_b: Tensor::scalar(T::zero()),
        }
    }

    pub fn lambda(&self) -> T {
        softplus(self.lambda_raw.item())
    }

    pub fn cap(&self) -> T {
        sigmoid(self.theta.item()) * T::lit(LAMBDA_CEIL)
    }

    /// Effective multiplier bound `min(λ, Λ)`, or `None` unclipped.
    pub fn a_max(&self, clip: bool) -> Option<T> {
        clip.then(|| self.lambda().min(self.cap()))
    }
}

impl<T: Real> Parameterized<T> for CmsaParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("token_w", &self.token_w);
        f("token_b", &self.token_b);
        visit_child("ssm", &self.ssm, f);
        f("lambda_raw", &self.lambda_raw);
        f("theta", &self.theta);
        f("out_w", &self.out_w);
        f("out_b", &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("token_w", &mut self.token_w);
        f("token_b", &mut self.token_b);
        visit_child_mut("ssm", &mut self.ssm, f);
        f("lambda_raw", &mut self.lambda_raw);
        f("theta", &mut self.theta);
        f("out_w", &mut self.out_w);
        f("out_b", &mut self.out_b);
    }
}

/// Per-channel `(mean, max)` with the flat argmax index, `C` entries.
fn pool<T: Real>(x: &Tensor<T>) -> Result<Vec<(T, T, usize)>> {
    let (c, h, w) = x.dims3()?;
    let n = T::lit((h * w) as f64);
    Ok((0..c)
        .map(|k| {
            let plane = x.plane(k);
            let mut arg = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[arg] {
                    arg = i;
                }
            }
            (plane.iter().copied().sum::<T>() / n, plane[arg], arg)
        })
        .collect())
}

fn tokens_from_pool<T: Real>(pooled: &[(T, T, usize)], p: &CmsaParams<T>) -> Result<Tensor<T>> {
    let d = p.token_w.shape()[0];
    let (w, b) = (p.token_w.data(), p.token_b.data());
    let data = pooled
        .iter()
        .flat_map(|&(mean, max, _)| (0..d).map(move |j| w[2 * j] * mean + w[2 * j + 1] * max + b[j]))
        .collect();
    Tensor::new(&[pooled.len(), d], data)
}

const POOL_EPS: f64 = 1e-5;

/// Divides each group's `(mean, max)` pairs by their joint RMS, so the gate
/// logits do not grow with the overall feature scale. Groups stay
/// independent. Returns `1/rms` per group.
fn normalize_groups<T: Real>(pooled: &mut [(T, T, usize)], groups: usize) -> Vec<T> {
    let s = pooled.len() / groups;
    pooled
        .chunks_mut(s)
        .map(|grp| {
            let ms = grp.iter().map(|&(a, b, _)| a * a + b * b).sum::<T>() / T::lit((2 * s) as f64);
            let r = T::one() / (ms + T::lit(POOL_EPS)).sqrt();
            for (a, b, _) in grp.iter_mut() {
                *a *= r;
                *b *= r;
            }
            r
        })
        .collect()
}

/// `u_k = W [mean(X_k), max(X_k)] / rms_g + b`, one row per channel (`C × d_m`),
/// where `rms_g` is taken over the pooled pairs of the channel's group.
pub fn channel_tokens<T: Real>(x: &Tensor<T>, p: &CmsaParams<T>, cfg: &CmsaConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut pooled = pool(x)?;
    normalize_groups(&mut pooled, cfg.groups);
    tokens_from_pool(&pooled, p)
}

/// One group's scan with its inputs and trace.
#[derive(Clone, Debug)]
pub struct GroupScan<T> {
    pub seq: ScanSequence<T>,
    pub params: SsmParams<T>,
    proj: ProjectionCache<T>,
    pub out: ScanOutput<T>,
}

#[derive(Clone, Debug)]
pub struct GroupedScan<T> {
    /// `C × d_m` readouts in channel order.
    pub y: Tensor<T>,
    pub groups: Vec<GroupScan<T>>,
    /// Cumulative cap in force (`None` when unclipped).
    pub cap: Option<T>,
}

/// Scans each contiguous group of `C/G` tokens independently from `h_0 = 0`.
pub fn grouped_bounded_scan<T: Real>(tokens: &Tensor<T>, p: &CmsaParams<T>, cfg: &CmsaConfig) -> Result<GroupedScan<T>> {
    let (c, d) = tokens.dims2()?;
    if c != cfg.channels {
        return dim_err(format!("expected {} channel tokens, got {c}", cfg.channels));
    }
    cfg.validate()?;
    let s = cfg.group_size();
    let a_max = p.a_max(cfg.clip);
    let mut y = Vec::with_capacity(c * d);
    let mut groups = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let slice = Tensor::new(&[s, d], tokens.data()[g * s * d..(g + 1) * s * d].to_vec())?;
        let (params, proj) = p.ssm.project(&slice, a_max)?;
        let seq = ScanSequence::plain(slice);
        let out = scan_forward(&seq, &params, cfg.mode)?;
        y.extend_from_slice(out.y.data());
        groups.push(GroupScan { seq, params, proj, out });
    }
    Ok(GroupedScan { y: Tensor::new(&[c, d], y)?, groups, cap: cfg.clip.then(|| p.cap()) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundednessReport {
    /// Largest `‖h_k‖ / bound_k` seen (0 when every bound is 0).
    pub max_ratio: f64,
    pub states_checked: usize,
}

/// Checks `‖h_k‖ ≤ max_{i≤k} ‖B̄_i‖‖u_i‖ / (1 - Λ)` for every position of every
/// group, where `‖B̄_i‖ = max_d Δ_i[d] · ‖B_i‖` is the operator norm of the
/// input map. A relative slack of a few ulps per step absorbs roundoff.
pub fn boundedness_check<T: Real>(scan: &GroupedScan<T>) -> Result<BoundednessReport> {
    let cap = scan
        .cap
        .ok_or_else(|| Error::State("boundedness needs the clipped scan".into()))?
        .as_f64();
    let mut max_ratio = 0.0f64;
    let mut checked = 0;
    for (g, grp) in scan.groups.iter().enumerate() {
        let tr = grp
            .out
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("group scan has no trace".into()))?;
        let (l, d) = grp.seq.tokens.dims2()?;
        let n = grp.params.b0.shape()[1];
        let slack = 1.0 + 8.0 * T::epsilon().as_f64() * (l + d * n) as f64;
        let mut drive = 0.0f64;
        for k in 0..l {
            let dmax = tr.timesteps()[k * d..(k + 1) * d].iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
            let bnorm = norm(&tr.input_projections()[k * n..(k + 1) * n]);
            let unorm = norm(&grp.seq.tokens.data()[k * d..(k + 1) * d]);
            drive = drive.max(dmax * bnorm * unorm);
            let bound = drive / (1.0 - cap);
            let h = norm(&tr.states(0)[k * d * n..(k + 1) * d * n]);
            checked += 1;
            if h > bound * slack {
                return Err(Error::Invariant(format!(
                    "state bound violated in group {g} at position {k}: |h| = {h:e} > {bound:e}"
                )));
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(h / bound);
            }
        }
    }
    Ok(BoundednessReport { max_ratio, states_checked: checked })
}

fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Forward intermediates for [`cmsa_backward`].
#[derive(Clone, Debug)]
pub struct CmsaCache<T> {
    /// Group-normalized pairs and the per-group `1/rms`.
    pooled: Vec<(T, T, usize)>,
    group_inv: Vec<T>,
    pub scan: GroupedScan<T>,
    /// Per-channel gates `σ(out_w · y_k + b)`.
    pub gates: Vec<T>,
}

pub fn cmsa_forward_cached<T: Real>(x: &Tensor<T>, p: &CmsaParams<T>, cfg: &CmsaConfig) -> Result<(Tensor<T>, CmsaCache<T>)> {
    cfg.validate()?;
    let mut pooled = pool(x)?;
    if pooled.len() != cfg.channels {
        return dim_err(format!("expected {} channels, got {}", cfg.channels, pooled.len()));
    }
    let group_inv = normalize_groups(&mut pooled, cfg.groups);
    let tokens = tokens_from_pool(&pooled, p)?;
    let scan = grouped_bounded_scan(&tokens, p, cfg)?;
    let d = cfg.width;
    let (w, b) = (p.out_w.data(), p.out_b.item());
    let gates: Vec<T> = (0..cfg.channels)
        .map(|k| {
            let yk = &scan.y.data()[k * d..(k + 1) * d];
            sigmoid(yk.iter().zip(w).fold(b, |acc, (&a, &c)| acc + a * c))
        })
        .collect();
    let mut out = x.clone();
    for (k, &g) in gates.iter().enumerate() {
        out.plane_mut(k).iter_mut().for_each(|v| *v += *v * g);
    }
    Ok((out, CmsaCache { pooled, group_inv, scan, gates }))
}

/// `X̂_k = X_k ⊙ σ(out(y_k)) + X_k`.
pub fn cmsa_forward<T: Real>(x: &Tensor<T>, p: &CmsaParams<T>, cfg: &CmsaConfig) -> Result<Tensor<T>> {
    Ok(cmsa_forward_cached(x, p, cfg)?.0)
}

pub fn cmsa_backward<T: Real>(
    x: &Tensor<T>,
    p: &CmsaParams<T>,
    cfg: &CmsaConfig,
    cache: &CmsaCache<T>,
    grad: &Tensor<T>,
    grads: &mut CmsaParams<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let d = cfg.width;
    let s = cfg.group_size();
    let mut gx = grad.clone();
    let mut gy = vec![T::zero(); c * d];
    for (k, &g) in cache.gates.iter().enumerate() {
        let (xs, gs) = (x.plane(k), grad.plane(k));
        let mut g_gate = T::zero();
        for (i, gxi) in gx.plane_mut(k).iter_mut().enumerate() {
            *gxi += gs[i] * g;
            g_gate += gs[i] * xs[i];
        }
        let gz = g_gate * g * (T::one() - g);
        grads.out_b.data_mut()[0] += gz;
        let yk = &cache.scan.y.data()[k * d..(k + 1) * d];
        for j in 0..d {
            grads.out_w.data_mut()[j] += gz * yk[j];
            gy[k * d + j] = gz * p.out_w.data()[j];
        }
    }
    let mut g_tokens = vec![T::zero(); c * d];
    let mut g_amax = T::zero();
    for (gi, grp) in cache.scan.groups.iter().enumerate() {
        let gyg = Tensor::new(&[s, d], gy[gi * s * d..(gi + 1) * s * d].to_vec())?;
        let sg = scan_backward(&grp.seq, &grp.params, &grp.out, &gyg)?;
        g_amax += sg.a_max;
        let gt = p.ssm.project_backward(&grp.seq.tokens, &grp.proj, &sg, &mut grads.ssm)?;
        g_tokens[gi * s * d..(gi + 1) * s * d].copy_from_slice(gt.data());
    }
    if cfg.clip {
        let (lam, cap) = (p.lambda(), p.cap());
        if lam <= cap {
            grads.lambda_raw.data_mut()[0] += g_amax * sigmoid(p.lambda_raw.item());
        } else {
            let sg = sigmoid(p.theta.item());
            grads.theta.data_mut()[0] += g_amax * T::lit(LAMBDA_CEIL) * sg * (T::one() - sg);
        }
    }
    let inv_n = T::one() / T::lit(hw as f64);
    let tw = p.token_w.data();
    let mut g_pairs = Vec::with_capacity(c);
    for (k, &(mean, max, _)) in cache.pooled.iter().enumerate() {
        let (mut g_mean, mut g_max) = (T::zero(), T::zero());
        for j in 0..d {
            let gu = g_tokens[k * d + j];
            grads.token_w.data_mut()[2 * j] += gu * mean;
            grads.token_w.data_mut()[2 * j + 1] += gu * max;
            grads.token_b.data_mut()[j] += gu;
            g_mean += gu * tw[2 * j];
            g_max += gu * tw[2 * j + 1];
        }
        g_pairs.push((g_mean, g_max));
    }
    // through the group RMS: g_raw = r (g − v̂ · mean(g ⊙ v̂))
    for ((gp, vp), &r) in g_pairs.chunks_mut(s).zip(cache.pooled.chunks(s)).zip(&cache.group_inv) {
        let dot = gp.iter().zip(vp).map(|(&(ga, gb), &(a, b, _))| ga * a + gb * b).sum::<T>() / T::lit((2 * s) as f64);
        for ((ga, gb), &(a, b, _)) in gp.iter_mut().zip(vp) {
            *ga = r * (*ga - a * dot);
            *gb = r * (*gb - b * dot);
        }
    }
    for (k, (&(_, _, arg), &(g_mean, g_max))) in cache.pooled.iter().zip(&g_pairs).enumerate() {
        let plane = gx.plane_mut(k);
        plane.iter_mut().for_each(|v| *v += g_mean * inv_n);
        plane[arg] += g_max;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{param_finite_diff, relative_error};
    use crate::tensor::finite_diff_grad;
    use crate::testutil::{lcg_init, random_tensor};

    fn cfg(c: usize, g: usize) -> CmsaConfig {
        CmsaConfig { groups: g, width: 3, state: 2, mode: ScanMode::Sequential, ..CmsaConfig::new(c) }
    }

    #[test]
    fn token_examples() {
        let c = cfg(2, 1);
        let mut p = CmsaParams::<f64>::new(&c, &mut lcg_init(1));
        let x = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 1.5 } else { 0.0 });
        let pooled = pool(&x).unwrap();
        assert_eq!((pooled[0].0, pooled[0].1), (1.5, 1.5));
        p.token_b.fill(0.0);
        let u = channel_tokens(&x, &p, &c).unwrap();
        assert!(u.data()[3..].iter().all(|&v| v == 0.0));
        // swapping channels swaps tokens
        let mut swapped = Tensor::zeros(&[2, 3, 3]);
        swapped.plane_mut(0).copy_from_slice(x.plane(1));
        swapped.plane_mut(1).copy_from_slice(x.plane(0));
        let us = channel_tokens(&swapped, &p, &c).unwrap();
        assert_eq!(&us.data()[..3], &u.data()[3..]);
        assert_eq!(&us.data()[3..], &u.data()[..3]);
    }

    #[test]
    fn group_count_must_divide_channels() {
        let c = cfg(6, 4);
        let p = CmsaParams::<f64>::new(&CmsaConfig { groups: 3, ..c }, &mut lcg_init(2));
        let x = random_tensor(&[6, 2, 2], 3);
        assert!(matches!(cmsa_forward(&x, &p, &c), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_groups_do_not_interact() {
        let c = cfg(4, 4);
        let p = CmsaParams::<f64>::new(&c, &mut lcg_init(4));
        let u = random_tensor(&[4, 3], 5);
        let y = grouped_bounded_scan(&u, &p, &c).unwrap().y;
        for k in 0..4 {
            let uk = Tensor::new(&[1, 3], u.data()[k * 3..(k + 1) * 3].to_vec()).unwrap();
            let yk = grouped_bounded_scan(&uk, &p, &CmsaConfig { channels: 1, groups: 1, ..c }).unwrap().y;
            assert_eq!(&y.data()[k * 3..(k + 1) * 3], yk.data());
        }
    }

    #[test]
    fn saturated_transitions_unroll_by_hand() {
        // one token dim, one state slot, every exp(ΔA) above λ
        let c = CmsaConfig { channels: 3, groups: 1, width: 1, state: 1, lambda_init: 0.3, ..cfg(3, 1) };
        let mut p = CmsaParams::<f64>::new(&c, &mut lcg_init(6));
        p.ssm.a = Tensor::new(&[1, 1], vec![-1e-3]).unwrap();
        p.ssm.w_delta.fill(0.0);
        p.ssm.w_b = Tensor::new(&[1, 1], vec![0.7]).unwrap();
        p.ssm.w_c = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let u = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let scan = grouped_bounded_scan(&u, &p, &c).unwrap();
        let lam = p.lambda();
        assert!((lam - 0.3).abs() < 1e-12);
        let dt = softplus(p.ssm.b_delta.item());
        let bbar = |k: usize| dt * 0.7 * u.data()[k];
        let h3 = lam * lam * bbar(0) * u.data()[0] + lam * bbar(1) * u.data()[1] + bbar(2) * u.data()[2];
        // y_3 = C_3 h_3 with C_3 = u_3
        assert!((scan.y.data()[2] - u.data()[2] * h3).abs() < 1e-14);
    }

    #[test]
    fn boundedness_examples() {
        let c = cfg(8, 2);
        let p = CmsaParams::<f64>::new(&CmsaConfig { cap_init: 0.5, ..c }, &mut lcg_init(7));
        let zero = Tensor::<f64>::zeros(&[8, 3]);
        let scan = grouped_bounded_scan(&zero, &p, &c).unwrap();
        let rep = boundedness_check(&scan).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert_eq!(rep.states_checked, 8);
        let u = random_tensor(&[8, 3], 8);
        let rep = boundedness_check(&grouped_bounded_scan(&u, &p, &c).unwrap()).unwrap();
        assert!(rep.max_ratio <= 1.0);
        let unclipped = grouped_bounded_scan(&u, &p, &CmsaConfig { clip: false, ..c }).unwrap();
        assert!(matches!(boundedness_check(&unclipped), Err(Error::State(_))));
    }

    #[test]
    fn gate_examples() {
        let c = cfg(4, 2);
        let mut p = CmsaParams::<f64>::new(&c, &mut lcg_init(9));
        let x = random_tensor(&[4, 3, 3], 10);
        p.out_w.fill(0.0);
        let out = cmsa_forward(&x, &p, &c).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert_eq!(*a, 1.5 * b);
        }
        let q = CmsaParams::<f64>::new(&c, &mut lcg_init(11));
        let zero = Tensor::zeros(&[4, 3, 3]);
        assert!(cmsa_forward(&zero, &q, &c).unwrap().data().iter().all(|&v| v == 0.0));
        let out = cmsa_forward(&x, &q, &c).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            let r = a / b;
            assert!((1.0..=2.0).contains(&r));
        }
    }

    #[test]
    fn perturbation_stays_in_its_group() {
        let c = cfg(8, 4);
        let p = CmsaParams::<f64>::new(&c, &mut lcg_init(12));
        let x = random_tensor(&[8, 3, 3], 13);
        let base = cmsa_forward(&x, &p, &c).unwrap();
        for k in 0..8 {
            let mut y = x.clone();
            y.plane_mut(k).iter_mut().for_each(|v| *v += 0.37);
            let out = cmsa_forward(&y, &p, &c).unwrap();
            for j in 0..8 {
                if j / 2 != k / 2 {
                    assert_eq!(out.plane(j), base.plane(j), "channel {k} leaked into {j}");
                }
            }
        }
    }

    fn check_grads(c: CmsaConfig, lam: f64, cap: f64, seed: u64) {
        let mut p = CmsaParams::<f64>::new(&c, &mut lcg_init(seed));
        p.lambda_raw = Tensor::scalar(softplus_inv(lam));
        p.theta = Tensor::scalar(logit(cap / LAMBDA_CEIL));
        // large timesteps so some transitions saturate
        p.ssm.b_delta.fill(softplus_inv(0.05));
        p.ssm.a = p.ssm.a.map(|v| v * 0.5);
        let x = random_tensor(&[c.channels, 4, 4], seed + 1);
        let gy = random_tensor(&[c.channels, 4, 4], seed + 2);
        let loss = |p: &CmsaParams<f64>, x: &Tensor<f64>| -> f64 {
            cmsa_forward(x, p, &c).unwrap().data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = cmsa_forward_cached(&x, &p, &c).unwrap();
        let clipped: usize = cache.scan.groups.iter().map(|g| g.out.diagnostics.transitions_clipped).sum();
        assert!(clipped > 0);
        let mut grads = p.zeroed_like();
        let gx = cmsa_backward(&x, &p, &c, &cache, &gy, &mut grads).unwrap();
        let e = relative_error(&gx, &finite_diff_grad(|t| loss(&p, t), &x, 1e-6).unwrap());
        assert!(e < 1e-5, "x: {e}");
        // θ's gradient is ~1e-6 of the loss, so a small step drowns in roundoff
        for name in p.names() {
            let num = param_finite_diff(&p, &name, |q| loss(q, &x), 1e-4).unwrap();
            let e = relative_error(&grads.get(&name).unwrap(), &num);
            assert!(e < 1e-5, "{name}: {e} {:?} {:?}", grads.get(&name).unwrap().data(), num.data());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // cap binding, then per-step bound binding
        check_grads(cfg(8, 4), 1.0, 0.9, 20);
        check_grads(cfg(8, 2), 0.8, 0.95, 30);
        check_grads(CmsaConfig { mode: ScanMode::Parallel, ..cfg(6, 1) }, 0.9, 0.85, 40);
    }
}

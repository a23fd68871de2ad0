//! Selective state-space scan with boundary modulation.
//!
//! Per position `t`, channel `c` and state slot `n`:
//!
//! ```text
//! Δ_t   = Δ0_t · (1 - R_t)            B_t = B0_t · (1 + E_t)
//! Ā_t   = min(exp(Δ_t A), a_max)      B̄_t = Δ_t B_t
//! h_t   = Ā_t h_{t-1} + B̄_t x_t       y_t = C_t · h_t + D x_t
//! ```
//!
//! `R`/`E` are one scalar per position shared by all channels. The same
//! discretized coefficients can be scanned along several orders (the 2-D block
//! uses four), and the outputs are averaged.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::params::Parameterized;
use crate::real::{sigmoid, softplus, softplus_inv, Real};
use crate::tensor::{matmul_nt, matmul_nt_backward, Tensor};
use crate::Init;

/// Lower bound applied to `Δ` when `1 - R ≤ 0`.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Per-sequence SSM coefficients. `a` is `C×N`; `delta0` is `L×C`; `b0` and
/// `c` are `L×N`; `d` is `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T = f32> {
    pub a: Tensor<T>,
    pub delta0: Tensor<T>,
    pub b0: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Option<Tensor<T>>,
    /// Upper clip on every per-step transition (and on combined transitions
    /// inside the parallel scan).
    pub a_max: Option<T>,
}

impl<T: Real> SsmParams<T> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (c, n) = self.a.dims2()?;
        let (l, c2) = self.delta0.dims2()?;
        if c2 != c || self.b0.shape() != [l, n] || self.c.shape() != [l, n] {
            return dim_err(format!(
                "inconsistent SSM shapes: A {:?}, Δ0 {:?}, B0 {:?}, C {:?}",
                self.a.shape(),
                self.delta0.shape(),
                self.b0.shape(),
                self.c.shape()
            ));
        }
        if let Some(d) = &self.d {
            if d.len() != c {
                return dim_err("skip vector D must have one entry per channel");
            }
        }
        Ok((l, c, n))
    }
}

/// Tokens in scan order (`L×C`) plus optional retain/enhance scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence<T = f32> {
    pub tokens: Tensor<T>,
    pub retain: Option<Vec<T>>,
    pub enhance: Option<Vec<T>>,
}

impl<T: Real> ScanSequence<T> {
    pub fn plain(tokens: Tensor<T>) -> Self {
        Self { tokens, retain: None, enhance: None }
    }

    fn modulation(&self) -> Result<Option<(&[T], &[T])>> {
        let l = self.tokens.shape()[0];
        match (&self.retain, &self.enhance) {
            (None, None) => Ok(None),
            (Some(r), Some(e)) if r.len() == l && e.len() == l => Ok(Some((r, e))),
            (Some(_), Some(_)) => dim_err("retain/enhance length must equal sequence length"),
            _ => Err(Error::Parameter("retain and enhance must be given together".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanDiagnostics {
    /// Positions whose `Δ` hit [`DELTA_FLOOR`] because `R ≥ 1`.
    pub delta_floored: usize,
    /// Transition entries saturated at `a_max`.
    pub transitions_clipped: usize,
}

/// Zero-order-hold discretization with the simplified input term:
/// `Ā = exp(Δ A)`, `B̄ = Δ B`. Returns both as `L×C×N`.
pub fn discretize_zoh<T: Real>(a: &Tensor<T>, delta: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, n) = a.dims2()?;
    let (l, c2) = delta.dims2()?;
    if c2 != c || b.shape() != [l, n] {
        return dim_err("discretize_zoh shape mismatch");
    }
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Parameter(format!("timestep must be positive, got {bad}")));
    }
    let mut a_bar = Vec::with_capacity(l * c * n);
    let mut b_bar = Vec::with_capacity(l * c * n);
    for t in 0..l {
        for ci in 0..c {
            let dt = delta.data()[t * c + ci];
            for ni in 0..n {
                a_bar.push((dt * a.data()[ci * n + ni]).exp());
                b_bar.push(dt * b.data()[t * n + ni]);
            }
        }
    }
    Ok((Tensor::new(&[l, c, n], a_bar)?, Tensor::new(&[l, c, n], b_bar)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modulated<T = f32> {
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    /// Positions where `1 - R ≤ 0` forced the `Δ` floor.
    pub floored: usize,
}

/// `Δ_k = Δ0_k (1 - R_k)`, `B_k = B0_k (1 + E_k)`, with `Δ` floored at
/// [`DELTA_FLOOR`] wherever `R_k ≥ 1`.
pub fn modulate_params<T: Real>(delta0: &Tensor<T>, b0: &Tensor<T>, retain: &[T], enhance: &[T]) -> Result<Modulated<T>> {
    let (l, c) = delta0.dims2()?;
    let (l2, n) = b0.dims2()?;
    if l2 != l || retain.len() != l || enhance.len() != l {
        return dim_err("modulate_params length mismatch");
    }
    let floor = T::lit(DELTA_FLOOR);
    let mut floored = 0;
    let mut delta = Vec::with_capacity(l * c);
    for t in 0..l {
        let keep = T::one() - retain[t];
        if keep <= T::zero() {
            floored += 1;
        }
        for ci in 0..c {
            delta.push(if keep <= T::zero() { floor } else { delta0.data()[t * c + ci] * keep });
        }
    }
    let b = (0..l * n).map(|i| b0.data()[i] * (T::one() + enhance[i / n])).collect();
    Ok(Modulated { delta: Tensor::new(&[l, c], delta)?, b: Tensor::new(&[l, n], b)?, floored })
}

/// Discretized, direction-independent coefficients.
#[derive(Clone, Debug)]
struct Discrete<T> {
    l: usize,
    c: usize,
    n: usize,
    delta: Vec<T>,
    bmod: Vec<T>,
    a_bar: Vec<T>,
    /// Per position: `Δ` was floored.
    floored: Vec<bool>,
    /// Per `(t, c, n)`: transition saturated at `a_max` (empty when unclipped).
    clipped: Vec<bool>,
}

fn discretize<T: Real>(p: &SsmParams<T>, re: Option<(&[T], &[T])>) -> Result<Discrete<T>> {
    let (l, c, n) = p.dims()?;
    if let Some(bad) = p.delta0.data().iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Parameter(format!("base timestep must be positive, got {bad}")));
    }
    let (delta, bmod, floored) = match re {
        Some((r, e)) => {
            let m = modulate_params(&p.delta0, &p.b0, r, e)?;
            let fl = r.iter().map(|&v| v >= T::one()).collect();
            (m.delta.into_data(), m.b.into_data(), fl)
        }
        None => (p.delta0.data().to_vec(), p.b0.data().to_vec(), vec![false; l]),
    };
    let a = p.a.data();
    let cn = c * n;
    let mut a_bar = vec![T::zero(); l * cn];
    let mut clipped = Vec::new();
    if p.a_max.is_some() {
        clipped = vec![false; l * cn];
    }
    for t in 0..l {
        for ci in 0..c {
            let dt = delta[t * c + ci];
            for ni in 0..n {
                let i = t * cn + ci * n + ni;
                let v = (dt * a[ci * n + ni]).min(T::exp_limit()).exp();
                a_bar[i] = match p.a_max {
                    Some(m) if v > m => {
                        clipped[i] = true;
                        m
                    }
                    _ => v,
                };
            }
        }
    }
    Ok(Discrete { l, c, n, delta, bmod, a_bar, floored, clipped })
}

impl<T: Real> Discrete<T> {
    /// Additive increment `Δ_t B_t x_t` for lane `(c, n)` at position `p`.
    #[inline]
    fn increment(&self, x: &[T], p: usize, ci: usize, ni: usize) -> T {
        self.delta[p * self.c + ci] * x[p * self.c + ci] * self.bmod[p * self.n + ni]
    }
}

/// Hidden states indexed by position (`L×C×N`).
fn recurrence_seq<T: Real>(dis: &Discrete<T>, x: &[T], order: &[usize]) -> Vec<T> {
    let (c, n) = (dis.c, dis.n);
    let cn = c * n;
    let mut h = vec![T::zero(); cn];
    let mut out = vec![T::zero(); dis.l * cn];
    for &p in order {
        let a = &dis.a_bar[p * cn..(p + 1) * cn];
        let bm = &dis.bmod[p * n..(p + 1) * n];
        for ci in 0..c {
            let u = dis.delta[p * c + ci] * x[p * c + ci];
            let hc = &mut h[ci * n..(ci + 1) * n];
            for ((hv, &av), &bv) in hc.iter_mut().zip(&a[ci * n..(ci + 1) * n]).zip(bm) {
                *hv = av * *hv + u * bv;
            }
        }
        out[p * cn..(p + 1) * cn].copy_from_slice(&h);
    }
    out
}

/// `(a, b)` rows of `width` lanes; composes `later ∘ earlier` in place into
/// `later`: `(a_l a_e, a_l b_e + b_l)`, saturating the product at `sat`.
#[inline]
fn compose_into<T: Real>(later_a: &mut [T], later_b: &mut [T], earlier_a: &[T], earlier_b: &[T], sat: Option<T>) {
    for i in 0..later_a.len() {
        let a = later_a[i] * earlier_a[i];
        later_b[i] = later_a[i] * earlier_b[i] + later_b[i];
        later_a[i] = match sat {
            Some(s) => a.min(s),
            None => a,
        };
    }
}

/// Work-efficient (Blelloch) scan over the pairs `(Ā_t, B̄_t x_t)`.
///
/// Up-sweep builds span totals in a fixed balanced tree; down-sweep turns them
/// into exclusive prefixes. Each tree level is data-parallel; the tree shape
/// does not depend on thread count, so results are bit-stable.
fn recurrence_parallel<T: Real>(dis: &Discrete<T>, x: &[T], order: &[usize], sat: Option<T>) -> Vec<T> {
    let (c, n, l) = (dis.c, dis.n, dis.l);
    let cn = c * n;
    let len = l.next_power_of_two();
    let mut ra = vec![T::one(); len * cn];
    let mut rb = vec![T::zero(); len * cn];
    for (t, &p) in order.iter().enumerate() {
        ra[t * cn..(t + 1) * cn].copy_from_slice(&dis.a_bar[p * cn..(p + 1) * cn]);
        for ci in 0..c {
            for ni in 0..n {
                rb[t * cn + ci * n + ni] = dis.increment(x, p, ci, ni);
            }
        }
    }
    let elem_a = ra.clone();
    let elem_b = rb.clone();
    let min_len = (4096 / cn.max(1)).max(1);

    // up-sweep
    let mut span = 2;
    while span <= len {
        let half = span / 2;
        ra.par_chunks_mut(span * cn)
            .zip(rb.par_chunks_mut(span * cn))
            .with_min_len(min_len)
            .for_each(|(ca, cb)| {
                let (lo_a, hi_a) = ca.split_at_mut(half * cn);
                let (lo_b, hi_b) = cb.split_at_mut(half * cn);
                let r = (half - 1) * cn..half * cn;
                compose_into(&mut hi_a[r.clone()], &mut hi_b[r.clone()], &lo_a[r.clone()], &lo_b[r], sat);
            });
        span *= 2;
    }
    // down-sweep: root becomes the identity
    ra[(len - 1) * cn..].iter_mut().for_each(|v| *v = T::one());
    rb[(len - 1) * cn..].iter_mut().for_each(|v| *v = T::zero());
    let mut span = len;
    while span >= 2 {
        let half = span / 2;
        ra.par_chunks_mut(span * cn)
            .zip(rb.par_chunks_mut(span * cn))
            .with_min_len(min_len)
            .for_each(|(ca, cb)| {
                let (lo_a, hi_a) = ca.split_at_mut(half * cn);
                let (lo_b, hi_b) = cb.split_at_mut(half * cn);
                let r = (half - 1) * cn..half * cn;
                // left <- parent prefix; right <- (left span) ∘ (parent prefix)
                let left_a = lo_a[r.clone()].to_vec();
                let left_b = lo_b[r.clone()].to_vec();
                lo_a[r.clone()].copy_from_slice(&hi_a[r.clone()]);
                lo_b[r.clone()].copy_from_slice(&hi_b[r.clone()]);
                let mut na = left_a;
                let mut nb = left_b;
                compose_into(&mut na, &mut nb, &hi_a[r.clone()], &hi_b[r.clone()], sat);
                hi_a[r.clone()].copy_from_slice(&na);
                hi_b[r].copy_from_slice(&nb);
            });
        span /= 2;
    }
    // inclusive prefix: h_t = a_t · excl_b + b_t (h_0 = 0)
    let mut out = vec![T::zero(); l * cn];
    for (t, &p) in order.iter().enumerate() {
        let dst = &mut out[p * cn..(p + 1) * cn];
        for i in 0..cn {
            dst[i] = elem_a[t * cn + i] * rb[t * cn + i] + elem_b[t * cn + i];
        }
    }
    out
}

/// `y = C · h + D x`, `L×C`, added into `y` with weight `scale`.
fn readout<T: Real>(dis: &Discrete<T>, h: &[T], cmat: &[T], scale: T, y: &mut [T]) {
    let (c, n) = (dis.c, dis.n);
    for p in 0..dis.l {
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                acc += cmat[p * n + ni] * h[(p * c + ci) * n + ni];
            }
            y[p * c + ci] += scale * acc;
        }
    }
}

/// Forward artifacts needed by the adjoint.
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    dis: Discrete<T>,
    /// Hidden states per order, each `L×C×N` indexed by position.
    states: Vec<Vec<T>>,
}

impl<T: Real> ScanTrace<T> {
    /// Hidden states of the `k`-th scan order, `L×C×N` by position.
    pub fn states(&self, k: usize) -> &[T] {
        &self.states[k]
    }

    /// Discretized transitions `Ā`, `L×C×N`.
    pub fn transitions(&self) -> &[T] {
        &self.dis.a_bar
    }

    /// Timesteps after modulation, `L×C`.
    pub fn timesteps(&self) -> &[T] {
        &self.dis.delta
    }

    /// Input projections after modulation, `L×N`.
    pub fn input_projections(&self) -> &[T] {
        &self.dis.bmod
    }
}

#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    /// `L×C`, averaged over scan orders.
    pub y: Tensor<T>,
    pub diagnostics: ScanDiagnostics,
    pub trace: Option<ScanTrace<T>>,
}

/// Scans the same coefficients along each order in `orders` and averages.
/// Every order must be a permutation of `0..L`.
pub fn scan_orders<T: Real>(
    seq: &ScanSequence<T>,
    p: &SsmParams<T>,
    orders: &[Vec<usize>],
    mode: ScanMode,
    keep_trace: bool,
) -> Result<ScanOutput<T>> {
    let (l, c, _) = p.dims()?;
    if seq.tokens.shape() != [l, c] {
        return dim_err(format!("tokens {:?} do not match L×C = {l}×{c}", seq.tokens.shape()));
    }
    if orders.is_empty() || orders.iter().any(|o| o.len() != l) {
        return dim_err("each scan order must cover the whole sequence");
    }
    let dis = discretize(p, seq.modulation()?)?;
    let x = seq.tokens.data();
    let states: Vec<Vec<T>> = orders
        .iter()
        .map(|o| match mode {
            ScanMode::Sequential => recurrence_seq(&dis, x, o),
            ScanMode::Parallel => recurrence_parallel(&dis, x, o, p.a_max),
        })
        .collect();
    let mut y = vec![T::zero(); l * c];
    let scale = T::one() / T::lit(orders.len() as f64);
    for h in &states {
        readout(&dis, h, p.c.data(), scale, &mut y);
    }
    if let Some(d) = &p.d {
        for t in 0..l {
            for ci in 0..c {
                y[t * c + ci] += d.data()[ci] * x[t * c + ci];
            }
        }
    }
    let diagnostics = ScanDiagnostics {
        delta_floored: dis.floored.iter().filter(|&&f| f).count(),
        transitions_clipped: dis.clipped.iter().filter(|&&f| f).count(),
    };
    Ok(ScanOutput {
        y: Tensor::new(&[l, c], y)?,
        diagnostics,
        trace: keep_trace.then_some(ScanTrace { dis, states }),
    })
}

pub fn identity_order(l: usize) -> Vec<usize> {
    (0..l).collect()
}

/// Reference scan: one left-to-right pass.
pub fn selective_scan_seq<T: Real>(seq: &ScanSequence<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let l = seq.tokens.shape()[0];
    Ok(scan_orders(seq, p, &[identity_order(l)], ScanMode::Sequential, false)?.y)
}

/// Same result as [`selective_scan_seq`] via the associative tree scan.
pub fn selective_scan_parallel<T: Real>(seq: &ScanSequence<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let l = seq.tokens.shape()[0];
    Ok(scan_orders(seq, p, &[identity_order(l)], ScanMode::Parallel, false)?.y)
}

pub fn scan_forward<T: Real>(seq: &ScanSequence<T>, p: &SsmParams<T>, mode: ScanMode) -> Result<ScanOutput<T>> {
    let l = seq.tokens.shape()[0];
    scan_orders(seq, p, &[identity_order(l)], mode, true)
}

/// Gradients of a scan with respect to every input.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads<T> {
    pub tokens: Tensor<T>,
    pub delta0: Tensor<T>,
    pub b0: Tensor<T>,
    pub c: Tensor<T>,
    pub a: Tensor<T>,
    pub d: Option<Tensor<T>>,
    pub retain: Option<Vec<T>>,
    pub enhance: Option<Vec<T>>,
    pub a_max: T,
}

/// Reverse-time adjoint of [`scan_orders`] (and so of the single-order scans).
pub fn scan_orders_backward<T: Real>(
    seq: &ScanSequence<T>,
    p: &SsmParams<T>,
    orders: &[Vec<usize>],
    out: &ScanOutput<T>,
    grad_y: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let trace = out
        .trace
        .as_ref()
        .ok_or_else(|| Error::State("scan was run without keeping its forward trace".into()))?;
    if trace.states.len() != orders.len() {
        return Err(Error::State("trace was recorded for a different set of scan orders".into()));
    }
    let dis = &trace.dis;
    let (l, c, n) = (dis.l, dis.c, dis.n);
    let cn = c * n;
    if grad_y.shape() != [l, c] {
        return dim_err("grad_y must be L×C");
    }
    let x = seq.tokens.data();
    let gy = grad_y.data();
    let cmat = p.c.data();
    let scale = T::one() / T::lit(orders.len() as f64);

    let mut g_a_bar = vec![T::zero(); l * cn];
    let mut g_inc = vec![T::zero(); l * cn];
    let mut g_c = vec![T::zero(); l * n];
    let mut lam = vec![T::zero(); cn];
    let mut a_next = vec![T::zero(); cn];
    for (order, h) in orders.iter().zip(&trace.states) {
        lam.iter_mut().for_each(|v| *v = T::zero());
        a_next.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..l).rev() {
            let p_t = order[t];
            let row = p_t * cn..(p_t + 1) * cn;
            let h_prev = (t > 0).then(|| &h[order[t - 1] * cn..(order[t - 1] + 1) * cn]);
            let (h_row, c_row) = (&h[row.clone()], &cmat[p_t * n..(p_t + 1) * n]);
            let gc_row = &mut g_c[p_t * n..(p_t + 1) * n];
            for ci in 0..c {
                let g = gy[p_t * c + ci] * scale;
                let lane = ci * n..(ci + 1) * n;
                let lam_c = &mut lam[lane.clone()];
                let an = &a_next[lane.clone()];
                let hc = &h_row[lane.clone()];
                let gi = &mut g_inc[p_t * cn + ci * n..p_t * cn + (ci + 1) * n];
                for ni in 0..n {
                    lam_c[ni] = g * c_row[ni] + an[ni] * lam_c[ni];
                    gc_row[ni] += g * hc[ni];
                    gi[ni] += lam_c[ni];
                }
                if let Some(hp) = h_prev {
                    let hp = &hp[lane];
                    let ga = &mut g_a_bar[p_t * cn + ci * n..p_t * cn + (ci + 1) * n];
                    for ni in 0..n {
                        ga[ni] += lam_c[ni] * hp[ni];
                    }
                }
            }
            a_next.copy_from_slice(&dis.a_bar[row]);
        }
    }

    let a = p.a.data();
    let mut g_x = vec![T::zero(); l * c];
    let mut g_delta = vec![T::zero(); l * c];
    let mut g_bmod = vec![T::zero(); l * n];
    let mut g_amat = vec![T::zero(); cn];
    let mut g_amax = T::zero();
    for t in 0..l {
        for ci in 0..c {
            let (dt, xv) = (dis.delta[t * c + ci], x[t * c + ci]);
            for ni in 0..n {
                let i = t * cn + ci * n + ni;
                let bm = dis.bmod[t * n + ni];
                let gu = g_inc[i];
                g_delta[t * c + ci] += gu * bm * xv;
                g_bmod[t * n + ni] += gu * dt * xv;
                g_x[t * c + ci] += gu * dt * bm;
                let ga = g_a_bar[i] * dis.a_bar[i];
                if !dis.clipped.is_empty() && dis.clipped[i] {
                    g_amax += g_a_bar[i];
                } else {
                    g_delta[t * c + ci] += ga * a[ci * n + ni];
                    g_amat[ci * n + ni] += ga * dt;
                }
            }
        }
    }

    let g_d = p.d.as_ref().map(|d| {
        let mut gd = vec![T::zero(); c];
        for t in 0..l {
            for ci in 0..c {
                gd[ci] += gy[t * c + ci] * x[t * c + ci];
                g_x[t * c + ci] += gy[t * c + ci] * d.data()[ci];
            }
        }
        Tensor::from_vec(gd)
    });

    let (g_delta0, g_b0, g_r, g_e) = match seq.modulation()? {
        Some((r, e)) => {
            let mut g_r = vec![T::zero(); l];
            let mut g_e = vec![T::zero(); l];
            let mut gd0 = vec![T::zero(); l * c];
            let mut gb0 = vec![T::zero(); l * n];
            for t in 0..l {
                if !dis.floored[t] {
                    for ci in 0..c {
                        gd0[t * c + ci] = g_delta[t * c + ci] * (T::one() - r[t]);
                        g_r[t] -= g_delta[t * c + ci] * p.delta0.data()[t * c + ci];
                    }
                }
                for ni in 0..n {
                    gb0[t * n + ni] = g_bmod[t * n + ni] * (T::one() + e[t]);
                    g_e[t] += g_bmod[t * n + ni] * p.b0.data()[t * n + ni];
                }
            }
            (gd0, gb0, Some(g_r), Some(g_e))
        }
        None => (g_delta, g_bmod, None, None),
    };

    Ok(ScanGrads {
        tokens: Tensor::new(&[l, c], g_x)?,
        delta0: Tensor::new(&[l, c], g_delta0)?,
        b0: Tensor::new(&[l, n], g_b0)?,
        c: Tensor::new(&[l, n], g_c)?,
        a: Tensor::new(&[c, n], g_amat)?,
        d: g_d,
        retain: g_r,
        enhance: g_e,
        a_max: g_amax,
    })
}

/// Adjoint of a single left-to-right scan (see [`scan_forward`]).
pub fn scan_backward<T: Real>(
    seq: &ScanSequence<T>,
    p: &SsmParams<T>,
    out: &ScanOutput<T>,
    grad_y: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let l = seq.tokens.shape()[0];
    scan_orders_backward(seq, p, &[identity_order(l)], out, grad_y)
}

/// How the learnable state matrix maps to `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateMatrix {
    /// Stored as `log(-A)`, so `A < 0` always.
    NegExp,
    /// Stored as `A` itself; stability comes from transition clipping.
    Free,
}

/// Learnable input-dependent projections producing [`SsmParams`] from tokens:
/// `Δ0 = softplus(W_Δ x + b_Δ)`, `B0 = W_B x`, `C = W_C x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSsm<T = f32> {
    pub w_delta: Tensor<T>,
    pub b_delta: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub a: Tensor<T>,
    pub d: Option<Tensor<T>>,
    pub form: StateMatrix,
}

/// Pre-activation of the timestep projection, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectionCache<T> {
    delta_pre: Vec<T>,
}

impl<T: Real> SelectiveSsm<T> {
    /// `A` starts at `-(1..=N)` in every channel; the timestep bias starts at
    /// `softplus⁻¹(dt_init)`.
    pub fn new(channels: usize, state: usize, form: StateMatrix, skip: bool, dt_init: f64, init: Init) -> Self {
        let sd = (1.0 / channels as f64).sqrt();
        let a = Tensor::from_fn(&[channels, state], |i| {
            let v = (i % state + 1) as f64;
            T::lit(match form {
                StateMatrix::NegExp => v.ln(),
                StateMatrix::Free => -v,
            })
        });
        Self {
            w_delta: Tensor::from_fn(&[channels, channels], |_| T::lit(init() * sd * 0.1)),
            b_delta: Tensor::full(&[channels], softplus_inv(T::lit(dt_init))),
            w_b: Tensor::from_fn(&[state, channels], |_| T::lit(init() * sd)),
            w_c: Tensor::from_fn(&[state, channels], |_| T::lit(init() * sd)),
            a,
            d: skip.then(|| Tensor::full(&[channels], T::one())),
            form,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_delta.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.w_b.shape()[0]
    }

    pub fn state_matrix(&self) -> Tensor<T> {
        match self.form {
            StateMatrix::NegExp => self.a.map(|v| -v.exp()),
            StateMatrix::Free => self.a.clone(),
        }
    }

    /// Per-position coefficients for `tokens` (`L×C`).
    pub fn project(&self, tokens: &Tensor<T>, a_max: Option<T>) -> Result<(SsmParams<T>, ProjectionCache<T>)> {
        let (l, c) = tokens.dims2()?;
        if c != self.channels() {
            return dim_err(format!("tokens have {c} channels, SSM expects {}", self.channels()));
        }
        let n = self.state_size();
        let x = tokens.data();
        let mut delta_pre = matmul_nt(x, l, self.w_delta.data(), c);
        for (i, v) in delta_pre.iter_mut().enumerate() {
            *v += self.b_delta.data()[i % c];
        }
        let delta0 = Tensor::new(&[l, c], delta_pre.iter().map(|&v| softplus(v)).collect())?;
        let b0 = Tensor::new(&[l, n], matmul_nt(x, l, self.w_b.data(), n))?;
        let cm = Tensor::new(&[l, n], matmul_nt(x, l, self.w_c.data(), n))?;
        let params = SsmParams { a: self.state_matrix(), delta0, b0, c: cm, d: self.d.clone(), a_max };
        Ok((params, ProjectionCache { delta_pre }))
    }

    /// Routes scan gradients through the projections. Accumulates parameter
    /// gradients into `grads` and returns the total token gradient.
    pub fn project_backward(
        &self,
        tokens: &Tensor<T>,
        cache: &ProjectionCache<T>,
        sg: &ScanGrads<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let (l, c) = tokens.dims2()?;
        let n = self.state_size();
        let x = tokens.data();
        let mut gx = sg.tokens.data().to_vec();
        let g_pre: Vec<T> = sg
            .delta0
            .data()
            .iter()
            .zip(&cache.delta_pre)
            .map(|(&g, &z)| g * sigmoid(z))
            .collect();
        for (i, &g) in g_pre.iter().enumerate() {
            grads.b_delta.data_mut()[i % c] += g;
        }
        matmul_nt_backward(x, l, self.w_delta.data(), c, &g_pre, &mut gx, grads.w_delta.data_mut());
        matmul_nt_backward(x, l, self.w_b.data(), n, sg.b0.data(), &mut gx, grads.w_b.data_mut());
        matmul_nt_backward(x, l, self.w_c.data(), n, sg.c.data(), &mut gx, grads.w_c.data_mut());
        let ga = grads.a.data_mut();
        for (i, &g) in sg.a.data().iter().enumerate() {
            ga[i] += match self.form {
                StateMatrix::NegExp => -g * self.a.data()[i].exp(),
                StateMatrix::Free => g,
            };
        }
        if let (Some(gd), Some(sgd)) = (grads.d.as_mut(), sg.d.as_ref()) {
            gd.add_assign(sgd)?;
        }
        Tensor::new(&[l, c], gx)
    }
}

impl<T: Real> Parameterized<T> for SelectiveSsm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w_delta", &self.w_delta);
        f("b_delta", &self.b_delta);
        f("w_b", &self.w_b);
        f("w_c", &self.w_c);
        f("a", &self.a);
        if let Some(d) = &self.d {
            f("d", d);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w_delta", &mut self.w_delta);
        f("b_delta", &mut self.b_delta);
        f("w_b", &mut self.w_b);
        f("w_c", &mut self.w_c);
        f("a", &mut self.a);
        if let Some(d) = &mut self.d {
            f("d", d);
        }
    }
}

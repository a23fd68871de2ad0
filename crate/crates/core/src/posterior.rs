//! Boundary posterior `P_b` and its retain/enhance decoupling.
//!
//! The posterior is the min-max-normalized product of a geometric prior
//! (`exp(-α · DT(M > τ))`) and a per-pixel attention likelihood
//! `Q · K / γ`, where `Q` and `K` are tiny MLPs over `(M, d̃)`. It then splits
//! into `R = μ_R (1 - P_b)` and `E = μ_E · P_b`.

use crate::edt::squared_edt;
use crate::error::Result;
use crate::guidance::GuidanceMap;
use crate::params::{visit_child, visit_child_mut, Parameterized};
use crate::real::{logit, sigmoid, softplus, softplus_inv, Real};
use crate::tensor::Tensor;
use crate::Init;

pub const MLP_HIDDEN: usize = 8;

/// Per-pixel `2 → 8 → 1` perceptron with tanh hidden units.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMlp<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> PixelMlp<T> {
    pub fn new(init: Init) -> Self {
        let s1 = (1.0f64 / 2.0).sqrt();
        let s2 = (1.0 / MLP_HIDDEN as f64).sqrt();
        Self {
            w1: Tensor::from_fn(&[MLP_HIDDEN, 2], |_| T::lit(init() * s1)),
            b1: Tensor::from_fn(&[MLP_HIDDEN], |_| T::lit(init() * 0.1)),
            w2: Tensor::from_fn(&[MLP_HIDDEN], |_| T::lit(init() * s2)),
            // positive offset keeps Q·K away from a sign-indefinite start
            b2: Tensor::scalar(T::one()),
        }
    }

    /// A constant map: zero weights, output `value` everywhere.
    pub fn constant(value: T) -> Self {
        Self {
            w1: Tensor::zeros(&[MLP_HIDDEN, 2]),
            b1: Tensor::zeros(&[MLP_HIDDEN]),
            w2: Tensor::zeros(&[MLP_HIDDEN]),
            b2: Tensor::scalar(value),
        }
    }

    fn forward(&self, a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
        let (w1, b1, w2) = (self.w1.data(), self.b1.data(), self.w2.data());
        let mut hidden = vec![T::zero(); a.len() * MLP_HIDDEN];
        let out = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&x0, &x1))| {
                let mut o = self.b2.item();
                for j in 0..MLP_HIDDEN {
                    let hj = (w1[2 * j] * x0 + w1[2 * j + 1] * x1 + b1[j]).tanh();
                    hidden[i * MLP_HIDDEN + j] = hj;
                    o += w2[j] * hj;
                }
                o
            })
            .collect();
        (out, hidden)
    }

    /// Accumulates parameter gradients; returns input gradients `(da, db)`.
    fn backward(&self, a: &[T], b: &[T], hidden: &[T], g: &[T], grads: &mut Self) -> (Vec<T>, Vec<T>) {
        let (w1, w2) = (self.w1.data(), self.w2.data());
        let mut da = vec![T::zero(); a.len()];
        let mut db = vec![T::zero(); a.len()];
        for i in 0..a.len() {
            let gi = g[i];
            if gi == T::zero() {
                continue;
            }
            grads.b2.data_mut()[0] += gi;
            for j in 0..MLP_HIDDEN {
                let hj = hidden[i * MLP_HIDDEN + j];
                grads.w2.data_mut()[j] += gi * hj;
                let gz = gi * w2[j] * (T::one() - hj * hj);
                grads.w1.data_mut()[2 * j] += gz * a[i];
                grads.w1.data_mut()[2 * j + 1] += gz * b[i];
                grads.b1.data_mut()[j] += gz;
                da[i] += gz * w1[2 * j];
                db[i] += gz * w1[2 * j + 1];
            }
        }
        (da, db)
    }
}

impl<T: Real> Parameterized<T> for PixelMlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// `τ = σ(tau_raw)`, `α = softplus(alpha_raw)`, `γ = softplus(gamma_raw)`;
/// `μ_R`, `μ_E` are stored directly and kept non-negative by [`Self::project`].
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams<T = f32> {
    pub tau_raw: Tensor<T>,
    pub alpha_raw: Tensor<T>,
    pub gamma_raw: Tensor<T>,
    pub mu_r: Tensor<T>,
    pub mu_e: Tensor<T>,
    pub q_mlp: PixelMlp<T>,
    pub k_mlp: PixelMlp<T>,
}

impl<T: Real> PosteriorParams<T> {
    pub fn new(tau: f64, alpha: f64, gamma: f64, mu_r: f64, mu_e: f64, init: Init) -> Self {
        Self {
            tau_raw: Tensor::scalar(logit(T::lit(tau))),
            alpha_raw: Tensor::scalar(softplus_inv(T::lit(alpha))),
            gamma_raw: Tensor::scalar(softplus_inv(T::lit(gamma))),
            mu_r: Tensor::scalar(T::lit(mu_r)),
            mu_e: Tensor::scalar(T::lit(mu_e)),
            q_mlp: PixelMlp::new(init),
            k_mlp: PixelMlp::new(init),
        }
    }

    pub fn tau(&self) -> T {
        sigmoid(self.tau_raw.item())
    }

    pub fn alpha(&self) -> T {
        softplus(self.alpha_raw.item())
    }

    pub fn gamma(&self) -> T {
        softplus(self.gamma_raw.item())
    }

    /// Clamp the affine scales back to `μ ≥ 0` after an update.
    pub fn project(&mut self) {
        for t in [&mut self.mu_r, &mut self.mu_e] {
            let v = t.item().max(T::zero());
            t.data_mut()[0] = v;
        }
    }
}

impl<T: Real> Parameterized<T> for PosteriorParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("tau_raw", &self.tau_raw);
        f("alpha_raw", &self.alpha_raw);
        f("gamma_raw", &self.gamma_raw);
        f("mu_r", &self.mu_r);
        f("mu_e", &self.mu_e);
        visit_child("q_mlp", &self.q_mlp, f);
        visit_child("k_mlp", &self.k_mlp, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("tau_raw", &mut self.tau_raw);
        f("alpha_raw", &mut self.alpha_raw);
        f("gamma_raw", &mut self.gamma_raw);
        f("mu_r", &mut self.mu_r);
        f("mu_e", &mut self.mu_e);
        visit_child_mut("q_mlp", &mut self.q_mlp, f);
        visit_child_mut("k_mlp", &mut self.k_mlp, f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField<T = f32> {
    pub dist: Tensor<T>,
    /// The mask had no `true` pixel; `dist` holds the `sqrt(H² + W²)` sentinel.
    pub empty_mask: bool,
}

/// Exact Euclidean distance from each pixel to the nearest nonzero pixel of an
/// `(H, W)` mask.
pub fn distance_transform<T: Real>(mask: &Tensor<T>) -> Result<DistanceField<T>> {
    let (h, w) = mask.dims2()?;
    let bits: Vec<bool> = mask.data().iter().map(|&v| v != T::zero()).collect();
    Ok(match squared_edt(&bits, h, w, (1.0, 1.0)) {
        Some(sq) => DistanceField {
            dist: Tensor::new(&[h, w], sq.into_iter().map(|d| T::lit(d.sqrt())).collect())?,
            empty_mask: false,
        },
        None => DistanceField {
            dist: Tensor::full(&[h, w], T::lit(((h * h + w * w) as f64).sqrt())),
            empty_mask: true,
        },
    })
}

/// `d̃ = exp(-α · DT(M > τ))`. The threshold is hard, so `d̃` carries no
/// gradient back to `M` or `τ`.
pub fn geometric_prior<T: Real>(m: &GuidanceMap<T>, p: &PosteriorParams<T>) -> Result<(Tensor<T>, DistanceField<T>)> {
    let tau = p.tau();
    let mask = m.m.map(|v| if v > tau { T::one() } else { T::zero() });
    let field = distance_transform(&mask)?;
    let alpha = p.alpha();
    Ok((field.dist.map(|d| (-alpha * d).exp()), field))
}

/// `L = Q · K / γ`, with `Q`, `K` per-pixel MLP outputs on `(M, d̃)`.
pub fn attention_likelihood<T: Real>(m: &GuidanceMap<T>, prior: &Tensor<T>, p: &PosteriorParams<T>) -> Result<Tensor<T>> {
    m.m.expect_same_shape(prior)?;
    let (q, _) = p.q_mlp.forward(m.m.data(), prior.data());
    let (k, _) = p.k_mlp.forward(m.m.data(), prior.data());
    let g = p.gamma();
    Tensor::new(m.m.shape(), q.iter().zip(&k).map(|(&a, &b)| a * b / g).collect())
}

/// `P_b` with its retain and enhance weights, each `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetainEnhance<T = f32> {
    pub p_b: Tensor<T>,
    pub retain: Tensor<T>,
    pub enhance: Tensor<T>,
}

impl<T: Real> RetainEnhance<T> {
    /// The unmodulated case, `R ≡ E ≡ 0`.
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { p_b: Tensor::zeros(&[h, w]), retain: Tensor::zeros(&[h, w]), enhance: Tensor::zeros(&[h, w]) }
    }

    pub fn from_posterior(p_b: Tensor<T>, mu_r: T, mu_e: T) -> Self {
        let retain = p_b.map(|v| mu_r * (T::one() - v));
        let enhance = p_b.map(|v| mu_e * v);
        Self { p_b, retain, enhance }
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorCache<T> {
    pub prior: Tensor<T>,
    pub field: DistanceField<T>,
    q: Vec<T>,
    k: Vec<T>,
    q_hidden: Vec<T>,
    k_hidden: Vec<T>,
    product: Vec<T>,
    /// `(argmin, argmax, range)` of the product, `None` when it was constant.
    norm: Option<(usize, usize, T)>,
    pub out: RetainEnhance<T>,
}

fn min_max<T: Real>(v: &[T]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[lo] {
            lo = i;
        }
        if x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

pub fn posterior_forward<T: Real>(m: &GuidanceMap<T>, p: &PosteriorParams<T>) -> Result<PosteriorCache<T>> {
    let (prior, field) = geometric_prior(m, p)?;
    let (q, q_hidden) = p.q_mlp.forward(m.m.data(), prior.data());
    let (k, k_hidden) = p.k_mlp.forward(m.m.data(), prior.data());
    let g = p.gamma();
    let product: Vec<T> = (0..q.len()).map(|i| prior.data()[i] * q[i] * k[i] / g).collect();
    let (lo, hi) = min_max(&product);
    let range = product[hi] - product[lo];
    let scale = product[hi].abs().max(product[lo].abs());
    let norm = (range > T::epsilon() * T::lit(16.0) * scale && range > T::min_positive_value())
        .then_some((lo, hi, range));
    let p_b: Vec<T> = match norm {
        Some((lo, _, r)) => product.iter().map(|&v| (v - product[lo]) / r).collect(),
        None => vec![T::zero(); product.len()],
    };
    let p_b = Tensor::new(m.m.shape(), p_b)?;
    let out = RetainEnhance::from_posterior(p_b, p.mu_r.item(), p.mu_e.item());
    Ok(PosteriorCache { prior, field, q, k, q_hidden, k_hidden, product, norm, out })
}

pub fn boundary_posterior<T: Real>(m: &GuidanceMap<T>, p: &PosteriorParams<T>) -> Result<RetainEnhance<T>> {
    Ok(posterior_forward(m, p)?.out)
}

/// Backpropagates `(dL/dR, dL/dE)`; returns `dL/dM` and accumulates parameter
/// gradients. `τ` receives none (hard threshold).
pub fn posterior_backward<T: Real>(
    m: &GuidanceMap<T>,
    p: &PosteriorParams<T>,
    cache: &PosteriorCache<T>,
    grad_retain: &Tensor<T>,
    grad_enhance: &Tensor<T>,
    grads: &mut PosteriorParams<T>,
) -> Result<Tensor<T>> {
    let n = cache.product.len();
    let (mu_r, mu_e) = (p.mu_r.item(), p.mu_e.item());
    let pb = cache.out.p_b.data();
    let (gr, ge) = (grad_retain.data(), grad_enhance.data());
    let mut g_mu_r = T::zero();
    let mut g_mu_e = T::zero();
    let mut g_pb = vec![T::zero(); n];
    for i in 0..n {
        g_mu_r += gr[i] * (T::one() - pb[i]);
        g_mu_e += ge[i] * pb[i];
        g_pb[i] = ge[i] * mu_e - gr[i] * mu_r;
    }
    grads.mu_r.data_mut()[0] += g_mu_r;
    grads.mu_e.data_mut()[0] += g_mu_e;

    // min-max normalization
    let mut g_prod = vec![T::zero(); n];
    if let Some((lo, hi, r)) = cache.norm {
        let (pmin, pmax) = (cache.product[lo], cache.product[hi]);
        let r2 = r * r;
        let mut g_min = T::zero();
        let mut g_max = T::zero();
        for i in 0..n {
            g_prod[i] = g_pb[i] / r;
            g_min += g_pb[i] * (cache.product[i] - pmax) / r2;
            g_max -= g_pb[i] * (cache.product[i] - pmin) / r2;
        }
        g_prod[lo] += g_min;
        g_prod[hi] += g_max;
    }

    let g = p.gamma();
    let prior = cache.prior.data();
    let mut g_q = vec![T::zero(); n];
    let mut g_k = vec![T::zero(); n];
    let mut g_prior = vec![T::zero(); n];
    let mut g_gamma = T::zero();
    for i in 0..n {
        let (q, k) = (cache.q[i], cache.k[i]);
        g_prior[i] = g_prod[i] * q * k / g;
        g_q[i] = g_prod[i] * prior[i] * k / g;
        g_k[i] = g_prod[i] * prior[i] * q / g;
        g_gamma -= g_prod[i] * cache.product[i] / g;
    }
    grads.gamma_raw.data_mut()[0] += g_gamma * sigmoid(p.gamma_raw.item());

    let (dm_q, dp_q) = p.q_mlp.backward(m.m.data(), prior, &cache.q_hidden, &g_q, &mut grads.q_mlp);
    let (dm_k, dp_k) = p.k_mlp.backward(m.m.data(), prior, &cache.k_hidden, &g_k, &mut grads.k_mlp);

    let mut g_alpha = T::zero();
    for i in 0..n {
        let gp = g_prior[i] + dp_q[i] + dp_k[i];
        g_alpha -= gp * cache.field.dist.data()[i] * prior[i];
    }
    grads.alpha_raw.data_mut()[0] += g_alpha * sigmoid(p.alpha_raw.item());

    Tensor::new(m.m.shape(), (0..n).map(|i| dm_q[i] + dm_k[i]).collect())
}

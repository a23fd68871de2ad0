//! Three-level U-shaped toy network: CMSA on the bottleneck, BASM on both
//! skip connections, a supervision head per decoder level.

use dualscan_core::basm::{basm_backward, basm_forward_cached, BasmCache, BasmConfig, BasmParams};
use dualscan_core::cmsa::{cmsa_backward, cmsa_forward_cached, CmsaCache, CmsaConfig, CmsaParams};
use dualscan_core::params::{visit_child, visit_child_mut, Parameterized};
use dualscan_core::{Real, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::layers::{maxpool2, maxpool2_backward, relu, relu_backward, upsample2, upsample2_backward, Conv};

#[derive(Clone, Debug, PartialEq)]
pub struct NetArch {
    pub widths: [usize; 3],
    pub classes: usize,
    /// Skip blocks for the 32-channel and 16-channel levels.
    pub basm: Option<(BasmConfig, BasmConfig)>,
    pub cmsa: Option<CmsaConfig>,
}

impl NetArch {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            widths: cfg.net.widths,
            classes: cfg.net.classes,
            basm: cfg.net.basm.enabled.then(|| (cfg.basm_config(1), cfg.basm_config(0))),
            cmsa: cfg.net.cmsa.enabled.then(|| cfg.cmsa_config()),
        }
    }
}

/// Normal draws from a stream keyed by `(seed, name)`, so a layer starts
/// from the same weights whatever else the network contains.
pub fn layer_stream(seed: u64, name: &str) -> impl FnMut() -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    let key = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    move || StandardNormal.sample(&mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet<T = f32> {
    pub enc1a: Conv<T>,
    pub enc1b: Conv<T>,
    pub enc2a: Conv<T>,
    pub enc2b: Conv<T>,
    pub enc3a: Conv<T>,
    pub enc3b: Conv<T>,
    pub cmsa: Option<CmsaParams<T>>,
    pub head3: Conv<T>,
    pub up2: Conv<T>,
    pub basm2: Option<BasmParams<T>>,
    pub dec2: Conv<T>,
    pub head2: Conv<T>,
    pub up1: Conv<T>,
    pub basm1: Option<BasmParams<T>>,
    pub dec1: Conv<T>,
    pub head1: Conv<T>,
}

impl<T: Real> ToyNet<T> {
    pub fn new(arch: &NetArch, seed: u64) -> Self {
        let [w1, w2, w3] = arch.widths;
        let k = arch.classes;
        let relu_gain = 2f64.sqrt();
        let conv = |name: &str, ci, co, ks, gain| Conv::new(ci, co, ks, gain, &mut layer_stream(seed, name));
        Self {
            enc1a: conv("enc1a", 1, w1, 3, relu_gain),
            enc1b: conv("enc1b", w1, w1, 3, relu_gain),
            enc2a: conv("enc2a", w1, w2, 3, relu_gain),
            enc2b: conv("enc2b", w2, w2, 3, relu_gain),
            enc3a: conv("enc3a", w2, w3, 3, relu_gain),
            enc3b: conv("enc3b", w3, w3, 3, relu_gain),
            cmsa: arch.cmsa.as_ref().map(|c| CmsaParams::new(c, &mut layer_stream(seed, "cmsa"))),
            head3: conv("head3", w3, k, 1, 1.0),
            up2: conv("up2", w3, w2, 1, 1.0),
            basm2: arch.basm.as_ref().map(|(c, _)| BasmParams::new(c, &mut layer_stream(seed, "basm2"))),
            dec2: conv("dec2", w2, w2, 3, relu_gain),
            head2: conv("head2", w2, k, 1, 1.0),
            up1: conv("up1", w2, w1, 1, 1.0),
            basm1: arch.basm.as_ref().map(|(_, c)| BasmParams::new(c, &mut layer_stream(seed, "basm1"))),
            dec1: conv("dec1", w1, w1, 3, relu_gain),
            head1: conv("head1", w1, k, 1, 1.0),
        }
    }

    /// Keeps constrained parameters in range after an optimizer step.
    pub fn project(&mut self) {
        for b in [&mut self.basm1, &mut self.basm2].into_iter().flatten() {
            b.project();
        }
    }

    pub fn cast<U: Real>(&self, arch: &NetArch) -> ToyNet<U> {
        let mut out = ToyNet::<U>::new(arch, 0);
        let mut src = Vec::new();
        self.visit(&mut |_, t| src.push(t.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut(&mut |_, t| *t = it.next().expect("same structure"));
        out
    }
}

impl<T: Real> Parameterized<T> for ToyNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        visit_child("enc1a", &self.enc1a, f);
        visit_child("enc1b", &self.enc1b, f);
        visit_child("enc2a", &self.enc2a, f);
        visit_child("enc2b", &self.enc2b, f);
        visit_child("enc3a", &self.enc3a, f);
        visit_child("enc3b", &self.enc3b, f);
        if let Some(c) = &self.cmsa {
            visit_child("cmsa", c, f);
        }
        visit_child("head3", &self.head3, f);
        visit_child("up2", &self.up2, f);
        if let Some(b) = &self.basm2 {
            visit_child("basm2", b, f);
        }
        visit_child("dec2", &self.dec2, f);
        visit_child("head2", &self.head2, f);
        visit_child("up1", &self.up1, f);
        if let Some(b) = &self.basm1 {
            visit_child("basm1", b, f);
        }
        visit_child("dec1", &self.dec1, f);
        visit_child("head1", &self.head1, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        visit_child_mut("enc1a", &mut self.enc1a, f);
        visit_child_mut("enc1b", &mut self.enc1b, f);
        visit_child_mut("enc2a", &mut self.enc2a, f);
        visit_child_mut("enc2b", &mut self.enc2b, f);
        visit_child_mut("enc3a", &mut self.enc3a, f);
        visit_child_mut("enc3b", &mut self.enc3b, f);
        if let Some(c) = &mut self.cmsa {
            visit_child_mut("cmsa", c, f);
        }
        visit_child_mut("head3", &mut self.head3, f);
        visit_child_mut("up2", &mut self.up2, f);
        if let Some(b) = &mut self.basm2 {
            visit_child_mut("basm2", b, f);
        }
        visit_child_mut("dec2", &mut self.dec2, f);
        visit_child_mut("head2", &mut self.head2, f);
        visit_child_mut("up1", &mut self.up1, f);
        if let Some(b) = &mut self.basm1 {
            visit_child_mut("basm1", b, f);
        }
        visit_child_mut("dec1", &mut self.dec1, f);
        visit_child_mut("head1", &mut self.head1, f);
    }
}

/// Activations kept for the backward pass. Public fields feed the report.
pub struct NetCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    pub e1: Tensor<T>,
    idx1: Vec<u32>,
    p1: Tensor<T>,
    a2: Tensor<T>,
    pub e2: Tensor<T>,
    idx2: Vec<u32>,
    p2: Tensor<T>,
    a3: Tensor<T>,
    e3: Tensor<T>,
    pub cmsa: Option<CmsaCache<T>>,
    bottleneck: Tensor<T>,
    fd2: Tensor<T>,
    s2: Tensor<T>,
    pub basm2: Option<BasmCache<T>>,
    d2: Tensor<T>,
    fd1: Tensor<T>,
    s1: Tensor<T>,
    pub basm1: Option<BasmCache<T>>,
    d1: Tensor<T>,
}

/// Logits per supervision level, coarse to fine.
pub type Logits<T> = [Tensor<T>; 3];

fn skip_forward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: Option<&BasmParams<T>>,
    cfg: Option<&BasmConfig>,
) -> Result<(Tensor<T>, Option<BasmCache<T>>)> {
    match (p, cfg) {
        (Some(p), Some(cfg)) => {
            let (y, c) = basm_forward_cached(fe, fd, p, cfg)?;
            Ok((y, Some(c)))
        }
        _ => Ok((fe.zip_map(fd, |a, b| a + b)?, None)),
    }
}

pub fn forward<T: Real>(net: &ToyNet<T>, arch: &NetArch, x: &Tensor<T>) -> Result<(Logits<T>, NetCache<T>)> {
    let a1 = relu(&net.enc1a.forward(x)?);
    let e1 = relu(&net.enc1b.forward(&a1)?);
    let (p1, idx1) = maxpool2(&e1)?;
    let a2 = relu(&net.enc2a.forward(&p1)?);
    let e2 = relu(&net.enc2b.forward(&a2)?);
    let (p2, idx2) = maxpool2(&e2)?;
    let a3 = relu(&net.enc3a.forward(&p2)?);
    let e3 = relu(&net.enc3b.forward(&a3)?);
    let (bottleneck, cmsa) = match (&net.cmsa, &arch.cmsa) {
        (Some(p), Some(cfg)) => {
            let (y, c) = cmsa_forward_cached(&e3, p, cfg)?;
            (y, Some(c))
        }
        _ => (e3.clone(), None),
    };
    let o3 = net.head3.forward(&bottleneck)?;
    // pointwise projection commutes with nearest upsampling, so project first
    let fd2 = upsample2(&net.up2.forward(&bottleneck)?)?;
    let (s2, basm2) = skip_forward(&e2, &fd2, net.basm2.as_ref(), arch.basm.as_ref().map(|b| &b.0))?;
    let d2 = relu(&net.dec2.forward(&s2)?);
    let o2 = net.head2.forward(&d2)?;
    let fd1 = upsample2(&net.up1.forward(&d2)?)?;
    let (s1, basm1) = skip_forward(&e1, &fd1, net.basm1.as_ref(), arch.basm.as_ref().map(|b| &b.1))?;
    let d1 = relu(&net.dec1.forward(&s1)?);
    let o1 = net.head1.forward(&d1)?;
    let cache = NetCache {
        x: x.clone(),
        a1,
        e1,
        idx1,
        p1,
        a2,
        e2,
        idx2,
        p2,
        a3,
        e3,
        cmsa,
        bottleneck,
        fd2,
        s2,
        basm2,
        d2,
        fd1,
        s1,
        basm1,
        d1,
    };
    Ok(([o3, o2, o1], cache))
}

/// Final-level logits only.
pub fn predict<T: Real>(net: &ToyNet<T>, arch: &NetArch, x: &Tensor<T>) -> Result<Tensor<T>> {
    let ([_, _, o1], _) = forward(net, arch, x)?;
    Ok(o1)
}

fn skip_backward<T: Real>(
    fe: &Tensor<T>,
    fd: &Tensor<T>,
    p: Option<&BasmParams<T>>,
    cfg: Option<&BasmConfig>,
    cache: Option<&BasmCache<T>>,
    g: &Tensor<T>,
    grads: Option<&mut BasmParams<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match (p, cfg, cache, grads) {
        (Some(p), Some(cfg), Some(c), Some(gp)) => basm_backward(fe, fd, p, cfg, c, g, gp),
        _ => Ok((g.clone(), g.clone())),
    }
}

/// Accumulates parameter gradients into `grads`; returns `dL/dx`.
pub fn backward<T: Real>(
    net: &ToyNet<T>,
    arch: &NetArch,
    cache: &NetCache<T>,
    g_logits: &Logits<T>,
    grads: &mut ToyNet<T>,
) -> Result<Tensor<T>> {
    let c = cache;
    let [g3, g2, g1] = g_logits;
    let mut g_d1 = net.head1.backward(&c.d1, g1, &mut grads.head1)?;
    g_d1 = relu_backward(&c.d1, &g_d1);
    let g_s1 = net.dec1.backward(&c.s1, &g_d1, &mut grads.dec1)?;
    let cfg1 = arch.basm.as_ref().map(|b| &b.1);
    let (g_e1_skip, g_fd1) =
        skip_backward(&c.e1, &c.fd1, net.basm1.as_ref(), cfg1, c.basm1.as_ref(), &g_s1, grads.basm1.as_mut())?;

    let mut g_d2 = net.up1.backward(&c.d2, &upsample2_backward(&g_fd1)?, &mut grads.up1)?;
    g_d2.add_assign(&net.head2.backward(&c.d2, g2, &mut grads.head2)?)?;
    g_d2 = relu_backward(&c.d2, &g_d2);
    let g_s2 = net.dec2.backward(&c.s2, &g_d2, &mut grads.dec2)?;
    let cfg2 = arch.basm.as_ref().map(|b| &b.0);
    let (g_e2_skip, g_fd2) =
        skip_backward(&c.e2, &c.fd2, net.basm2.as_ref(), cfg2, c.basm2.as_ref(), &g_s2, grads.basm2.as_mut())?;

    let mut g_b = net.up2.backward(&c.bottleneck, &upsample2_backward(&g_fd2)?, &mut grads.up2)?;
    g_b.add_assign(&net.head3.backward(&c.bottleneck, g3, &mut grads.head3)?)?;
    let g_e3 = match (&net.cmsa, &arch.cmsa, &c.cmsa, grads.cmsa.as_mut()) {
        (Some(p), Some(cfg), Some(cc), Some(gp)) => cmsa_backward(&c.e3, p, cfg, cc, &g_b, gp)?,
        _ => g_b,
    };

    let g_a3 = net.enc3b.backward(&c.a3, &relu_backward(&c.e3, &g_e3), &mut grads.enc3b)?;
    let g_p2 = net.enc3a.backward(&c.p2, &relu_backward(&c.a3, &g_a3), &mut grads.enc3a)?;
    let mut g_e2 = maxpool2_backward(&c.idx2, &g_p2, c.e2.shape());
    g_e2.add_assign(&g_e2_skip)?;
    let g_a2 = net.enc2b.backward(&c.a2, &relu_backward(&c.e2, &g_e2), &mut grads.enc2b)?;
    let g_p1 = net.enc2a.backward(&c.p1, &relu_backward(&c.a2, &g_a2), &mut grads.enc2a)?;
    let mut g_e1 = maxpool2_backward(&c.idx1, &g_p1, c.e1.shape());
    g_e1.add_assign(&g_e1_skip)?;
    let g_a1 = net.enc1b.backward(&c.a1, &relu_backward(&c.e1, &g_e1), &mut grads.enc1b)?;
    net.enc1a.backward(&c.x, &relu_backward(&c.a1, &g_a1), &mut grads.enc1a)
}

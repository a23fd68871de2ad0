//! Finite-difference audit of every learnable parameter group, in f64 on
//! small instances.

use dualscan_core::basm::{basm_backward, basm_forward, basm_forward_cached, BasmConfig, BasmParams, InputFusion};
use dualscan_core::cmsa::{cmsa_backward, cmsa_forward, cmsa_forward_cached, CmsaConfig, CmsaParams};
use dualscan_core::metrics::LabelMask;
use dualscan_core::params::{param_finite_diff, relative_error, Parameterized};
use dualscan_core::scan::ScanMode;
use dualscan_core::tensor::finite_diff_grad;
use dualscan_core::{Result, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::loss::{dice_ce_loss, LossWeights};
use crate::net::{backward, forward, layer_stream, NetArch, ToyNet};

const STEP: f64 = 1e-6;
/// The network loss sums thousands of terms; a smaller step would leave its
/// roundoff comparable to the weakest gradients (~1e-5).
const NET_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub case: String,
    pub group: String,
    pub tensors: usize,
    pub max_rel_err: f64,
    /// 2-norm of the analytic gradient over the group.
    pub grad_norm: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Group label for a BASM or CMSA parameter name.
pub fn group_of(name: &str, cmsa: bool) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if cmsa {
        return match leaf {
            "token_w" | "token_b" => "CMSA token projection",
            "out_w" | "out_b" => "CMSA output projection",
            "lambda_raw" => "CMSA λ",
            "theta" => "CMSA Λ",
            "a" => "CMSA A",
            _ => "CMSA Δ0/B0/C/D",
        };
    }
    if name.contains("ssm.") && !name.contains("fusion.") {
        return match leaf {
            "a" => "A",
            "w_delta" | "b_delta" => "Δ0 projection",
            "w_b" => "B0 projection",
            "w_c" => "C projection",
            _ => "D",
        };
    }
    match name {
        n if n.ends_with("guidance.w_b") => "w_b",
        n if n.ends_with("guidance.w_f") => "w_f",
        n if n.contains("guidance.fg_") => "foreground head",
        n if n.ends_with("tau_raw") => "τ path",
        n if n.ends_with("alpha_raw") => "α",
        n if n.ends_with("gamma_raw") => "γ",
        n if n.ends_with("mu_r") => "μ_R",
        n if n.ends_with("mu_e") => "μ_E",
        n if n.contains("q_mlp") || n.contains("k_mlp") => "Q/K pixel MLPs",
        n if n.contains("sasf.") => "SASF kernels",
        n if n.contains("fusion.") => "fusion heads",
        n if n.ends_with("input_proj") => "input projection",
        _ => "other",
    }
}

fn rand_tensor(shape: &[usize], seed: u64, name: &str) -> Tensor<f64> {
    let mut g = layer_stream(seed, name);
    Tensor::from_fn(shape, |_| g())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Groups per-tensor errors; a group's error is its worst tensor.
/// Rows are `(group, error, grad norm)`.
fn collect(case: &str, rows: Vec<(String, f64, f64)>) -> Vec<GroupCheck> {
    let mut out: Vec<GroupCheck> = Vec::new();
    for (group, err, norm) in rows {
        match out.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.tensors += 1;
                g.max_rel_err = g.max_rel_err.max(err);
                g.grad_norm = (g.grad_norm.powi(2) + norm * norm).sqrt();
            }
            None => out.push(GroupCheck { case: case.to_string(), group, tensors: 1, max_rel_err: err, grad_norm: norm }),
        }
    }
    out
}

fn norm(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_params<P: Parameterized<f64>>(
    step: f64,
    model: &P,
    grads: &P,
    loss: impl Fn(&P) -> f64,
    label: impl Fn(&str) -> String,
) -> Result<Vec<(String, f64, f64)>> {
    let mut rows = Vec::new();
    for name in model.names() {
        let num = param_finite_diff(model, &name, &loss, step)?;
        let ana = grads.get(&name).expect("gradient buffer mirrors the model");
        rows.push((label(&name), relative_error(&ana, &num), norm(&ana)));
    }
    Ok(rows)
}

pub fn basm_case(input: InputFusion, se_fusion: bool, mode: ScanMode, seed: u64) -> Result<Vec<GroupCheck>> {
    let (c, h, w) = (3, 6, 5);
    let mut cfg = BasmConfig { state: 3, input, se_fusion, mode, ..BasmConfig::new(c) };
    let fe = rand_tensor(&[c, h, w], seed, "fe");
    let fd = rand_tensor(&[c, h, w], seed, "fd");
    // put τ in the widest gap of M near its median, so the thresholded mask
    // is neither empty nor full and small perturbations do not flip it
    let probe = BasmParams::<f64>::new(&cfg, &mut layer_stream(seed, "basm"));
    let mut m = basm_forward_cached(&fe, &fd, &probe, &cfg)?.1.guidance.map.m.data().to_vec();
    m.sort_by(f64::total_cmp);
    let (lo, hi) = (m.len() / 4, 3 * m.len() / 4);
    let gap = (lo..hi).max_by(|&i, &j| (m[i + 1] - m[i]).total_cmp(&(m[j + 1] - m[j]))).expect("non-empty");
    cfg.tau = 0.5 * (m[gap] + m[gap + 1]);
    let p = BasmParams::<f64>::new(&cfg, &mut layer_stream(seed, "basm"));
    let r = rand_tensor(&[c, h, w], seed, "probe");
    let (_, cache) = basm_forward_cached(&fe, &fd, &p, &cfg)?;
    let mut grads = p.zeroed_like();
    let (gfe, gfd) = basm_backward(&fe, &fd, &p, &cfg, &cache, &r, &mut grads)?;
    let loss = |q: &BasmParams<f64>| dot(&basm_forward(&fe, &fd, q, &cfg).expect("forward"), &r);
    let mut rows = check_params(STEP, &p, &grads, loss, |n| group_of(n, false).to_string())?;
    let nfe = finite_diff_grad(|t| dot(&basm_forward(t, &fd, &p, &cfg).expect("forward"), &r), &fe, STEP)?;
    let nfd = finite_diff_grad(|t| dot(&basm_forward(&fe, t, &p, &cfg).expect("forward"), &r), &fd, STEP)?;
    rows.push(("input F_e".into(), relative_error(&gfe, &nfe), norm(&gfe)));
    rows.push(("input F_d".into(), relative_error(&gfd, &nfd), norm(&gfd)));
    let name = format!("BASM {input:?} input, SE fusion {}, {mode:?} scan", if se_fusion { "on" } else { "off" });
    Ok(collect(&name, rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipCase {
    /// No transition reaches the bound; gradients reach A.
    Inactive,
    Lambda,
    Cap,
}

pub fn cmsa_case(clip: ClipCase, seed: u64) -> Result<Vec<GroupCheck>> {
    let (lambda_init, cap_init) = match clip {
        ClipCase::Inactive => (0.99, 0.99),
        ClipCase::Lambda => (0.3, 0.9),
        ClipCase::Cap => (2.0, 0.3),
    };
    let cfg = CmsaConfig {
        groups: 4,
        width: 3,
        state: 2,
        lambda_init,
        cap_init,
        dt_init: 0.5,
        ..CmsaConfig::new(8)
    };
    let p = CmsaParams::<f64>::new(&cfg, &mut layer_stream(seed, "cmsa"));
    let x = rand_tensor(&[8, 4, 4], seed, "x");
    let r = rand_tensor(&[8, 4, 4], seed, "probe");
    let (_, cache) = cmsa_forward_cached(&x, &p, &cfg)?;
    let mut grads = p.zeroed_like();
    let gx = cmsa_backward(&x, &p, &cfg, &cache, &r, &mut grads)?;
    let loss = |q: &CmsaParams<f64>| dot(&cmsa_forward(&x, q, &cfg).expect("forward"), &r);
    let mut rows = check_params(STEP, &p, &grads, loss, |n| group_of(n, true).to_string())?;
    let nx = finite_diff_grad(|t| dot(&cmsa_forward(t, &p, &cfg).expect("forward"), &r), &x, STEP)?;
    rows.push(("input X".into(), relative_error(&gx, &nx), norm(&gx)));
    let name = match clip {
        ClipCase::Inactive => "CMSA, clip inactive".to_string(),
        ClipCase::Lambda => "CMSA, λ bound active".to_string(),
        ClipCase::Cap => "CMSA, Λ bound active".to_string(),
    };
    Ok(collect(&name, rows))
}

/// The whole toy network plus Dice-CE loss on an 8×8 image.
pub fn network_case(seed: u64) -> Result<Vec<GroupCheck>> {
    let mut cfg = RunConfig::default();
    cfg.net.widths = [4, 4, 8];
    cfg.net.basm.state = 2;
    cfg.net.cmsa.groups = 4;
    cfg.net.cmsa.width = 3;
    cfg.net.cmsa.state = 2;
    cfg.seed = seed;
    let arch = NetArch::from_config(&cfg);
    let net = ToyNet::<f64>::new(&arch, seed);
    let x = rand_tensor(&[1, 8, 8], seed, "image").map(|v| 0.5 + 0.2 * v);
    let mut lg = layer_stream(seed, "labels");
    let labels = (0..64).map(|_| ((lg().abs() * 3.0) as u8).min(3)).collect();
    let mask = LabelMask::new(8, 8, labels, 4)?;
    let w = LossWeights { dice: 1.0, ce: 1.0, levels: vec![1.0, 0.5, 0.25] };
    let loss = |n: &ToyNet<f64>| {
        let (z, _) = forward(n, &arch, &x).expect("forward");
        dice_ce_loss(&z, &mask, &w).expect("loss").0
    };
    let (z, cache) = forward(&net, &arch, &x)?;
    let (_, _, gz) = dice_ce_loss(&z, &mask, &w)?;
    let gz: [Tensor<f64>; 3] = gz.try_into().expect("three levels");
    let mut grads = net.zeroed_like();
    backward(&net, &arch, &cache, &gz, &mut grads)?;
    let rows = check_params(NET_STEP, &net, &grads, loss, |n| match n.split_once('.') {
        Some((b, rest)) if b.starts_with("basm") => format!("{b} {}", group_of(rest, false)),
        Some(("cmsa", rest)) => group_of(rest, true).to_string(),
        _ => "encoder/decoder convs and heads".to_string(),
    })?;
    Ok(collect("toy network with Dice-CE loss", rows))
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<GroupCheck>> {
    let mut all = Vec::new();
    all.extend(basm_case(InputFusion::Sum, true, ScanMode::Parallel, seed)?);
    all.extend(basm_case(InputFusion::Concat, false, ScanMode::Sequential, seed + 1)?);
    for clip in [ClipCase::Inactive, ClipCase::Lambda, ClipCase::Cap] {
        all.extend(cmsa_case(clip, seed)?);
    }
    all.extend(network_case(seed)?);
    Ok(all)
}

//! Soft-Dice + cross-entropy with deep supervision.

use dualscan_core::metrics::LabelMask;
use dualscan_core::{Error, Real, Result, Tensor};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
    /// Per supervision level, in the order the logits are passed.
    pub levels: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelLoss {
    pub dice: f64,
    pub ce: f64,
}

/// Nearest-neighbour label downsampling by an integer factor (top-left sample).
pub fn downsample_labels(mask: &LabelMask, factor: usize) -> Vec<u8> {
    let (h, w) = mask.dims();
    let (ho, wo) = (h / factor, w / factor);
    let l = mask.labels();
    (0..ho * wo).map(|k| l[(k / wo) * factor * w + (k % wo) * factor]).collect()
}

fn softmax_planes<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let z = logits.data();
    let mut p = vec![0.0; k * n];
    for i in 0..n {
        let m = (0..k).map(|c| z[c * n + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (z[c * n + i].as_f64() - m).exp();
            p[c * n + i] = e;
            s += e;
        }
        for c in 0..k {
            p[c * n + i] /= s;
        }
    }
    Ok((k, n, p))
}

/// Mean soft Dice loss over all classes and mean pixel cross-entropy for
/// one level, with the gradient of `wd·dice + wc·ce` w.r.t. the logits.
pub fn dice_ce_level<T: Real>(logits: &Tensor<T>, labels: &[u8], wd: f64, wc: f64) -> Result<(LevelLoss, Tensor<T>)> {
    let (k, n, p) = softmax_planes(logits)?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Dimension(format!("label {bad} for {k} classes")));
    }
    let mut ce = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        ce -= p[l as usize * n + i].max(1e-300).ln();
    }
    ce /= n as f64;

    // dL/dp for the Dice part, then through the softmax together with CE
    let mut gp = vec![0.0; k * n];
    let mut dice = 0.0;
    for c in 0..k {
        let (mut inter, mut sum) = (0.0, 0.0);
        for i in 0..n {
            let g = (labels[i] as usize == c) as u8 as f64;
            inter += p[c * n + i] * g;
            sum += p[c * n + i] + g;
        }
        let den = sum + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        dice += 1.0 - num / den;
        for i in 0..n {
            let g = (labels[i] as usize == c) as u8 as f64;
            gp[c * n + i] = -wd / k as f64 * (2.0 * g * den - num) / (den * den);
        }
    }
    dice /= k as f64;

    let mut gz = vec![T::zero(); k * n];
    for i in 0..n {
        let dot: f64 = (0..k).map(|c| p[c * n + i] * gp[c * n + i]).sum();
        for c in 0..k {
            let pc = p[c * n + i];
            let onehot = (labels[i] as usize == c) as u8 as f64;
            let g = pc * (gp[c * n + i] - dot) + wc * (pc - onehot) / n as f64;
            gz[c * n + i] = T::lit(g);
        }
    }
    Ok((LevelLoss { dice, ce }, Tensor::new(logits.shape(), gz)?))
}

/// `Σ_l w_l (wd·softDice_l + wc·CE_l)`, labels downsampled to each level.
pub fn dice_ce_loss<T: Real>(
    logits: &[Tensor<T>],
    gt: &LabelMask,
    w: &LossWeights,
) -> Result<(f64, Vec<LevelLoss>, Vec<Tensor<T>>)> {
    if logits.len() != w.levels.len() {
        return Err(Error::Config(format!(
            "{} deep-supervision weights for {} levels",
            w.levels.len(),
            logits.len()
        )));
    }
    let (h, _) = gt.dims();
    let mut total = 0.0;
    let mut parts = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &wl) in logits.iter().zip(&w.levels) {
        let (_, zh, _) = z.dims3()?;
        if zh == 0 || h % zh != 0 {
            return Err(Error::Dimension(format!("level height {zh} does not divide {h}")));
        }
        let labels = downsample_labels(gt, h / zh);
        let (ll, mut g) = dice_ce_level(z, &labels, wl * w.dice, wl * w.ce)?;
        if wl == 0.0 {
            g.fill(T::zero());
        }
        total += wl * (w.dice * ll.dice + w.ce * ll.ce);
        parts.push(ll);
        grads.push(g);
    }
    Ok((total, parts, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualscan_core::tensor::finite_diff_grad;
    use dualscan_core::params::relative_error;

    #[test]
    fn uniform_logits_give_ln_k() {
        let z = Tensor::<f64>::zeros(&[4, 3, 3]);
        let (l, _) = dice_ce_level(&z, &[0, 1, 2, 3, 0, 1, 2, 3, 0], 1.0, 1.0).unwrap();
        assert!((l.ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let labels = [0u8, 1, 2, 3, 3, 2, 1, 0];
        let z = Tensor::<f64>::from_fn(&[4, 2, 4], |i| if labels[i % 8] as usize == i / 8 { 40.0 } else { -40.0 });
        let (l, _) = dice_ce_level(&z, &labels, 1.0, 1.0).unwrap();
        assert!(l.ce < 1e-12 && l.dice < 1e-9, "{l:?}");
    }

    #[test]
    fn gradient_matches_finite_differences_on_4x4() {
        let mask = LabelMask::new(4, 4, vec![0, 1, 1, 0, 2, 2, 3, 0, 0, 3, 3, 1, 0, 0, 2, 2], 4).unwrap();
        let mut s = 1u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let z: Vec<Tensor<f64>> = [1, 2, 4].iter().map(|&r| Tensor::from_fn(&[4, r, r], |_| rnd())).collect();
        let w = LossWeights { dice: 1.0, ce: 1.0, levels: vec![1.0, 0.5, 0.25] };
        let (_, _, grads) = dice_ce_loss(&z, &mask, &w).unwrap();
        for lvl in 0..3 {
            let num = finite_diff_grad(
                |t| {
                    let mut zz = z.clone();
                    zz[lvl] = t.clone();
                    dice_ce_loss(&zz, &mask, &w).unwrap().0
                },
                &z[lvl],
                1e-6,
            )
            .unwrap();
            let err = relative_error(&grads[lvl], &num);
            assert!(err < 1e-4, "level {lvl}: {err}");
        }
    }

    #[test]
    fn weight_count_mismatch_is_a_config_error() {
        let mask = LabelMask::new(2, 2, vec![0; 4], 4).unwrap();
        let z = vec![Tensor::<f64>::zeros(&[4, 2, 2])];
        let w = LossWeights { dice: 1.0, ce: 1.0, levels: vec![1.0, 0.5] };
        assert!(matches!(dice_ce_loss(&z, &mask, &w), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_downsampling_picks_top_left() {
        let mask = LabelMask::new(4, 4, (0..16).map(|i| (i % 4) as u8).collect(), 4).unwrap();
        assert_eq!(downsample_labels(&mask, 2), vec![0, 2, 0, 2]);
        assert_eq!(downsample_labels(&mask, 1), mask.labels());
    }
}

use dualscan_core::cmsa::{boundedness_check, grouped_bounded_scan, CmsaConfig, CmsaParams};
use dualscan_core::edt::squared_edt;
use dualscan_core::metrics::{dice_iou, hd95_asd, LabelMask};
use dualscan_core::posterior::RetainEnhance;
use dualscan_core::real::softplus;
use dualscan_core::scan::{
    modulate_params, selective_scan_parallel, selective_scan_seq, ScanSequence, SsmParams,
};
use dualscan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !m[i * w + j] {
                continue;
            }
            let nbrs = [(i as isize - 1, j as isize), (i as isize + 1, j as isize), (i as isize, j as isize - 1), (i as isize, j as isize + 1)];
            let open = nbrs.iter().any(|&(a, b)| a < 0 || b < 0 || a >= h as isize || b >= w as isize || !m[a as usize * w + b as usize]);
            if open {
                out.push((i, j));
            }
        }
    }
    out
}

/// All-pairs pooled surface distances, sorted.
fn brute_surface(p: &[bool], g: &[bool], h: usize, w: usize) -> (f64, f64) {
    let (bp, bg) = (brute_boundary(p, h, w), brute_boundary(g, h, w));
    if bp.is_empty() && bg.is_empty() {
        return (0.0, 0.0);
    }
    if bp.is_empty() || bg.is_empty() {
        let d = ((h * h + w * w) as f64).sqrt();
        return (d, d);
    }
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|&b| {
                let (di, dj) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
                (di * di + dj * dj).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = bp.iter().map(|&a| nearest(a, &bg)).chain(bg.iter().map(|&b| nearest(b, &bp))).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let hd = if lo + 1 < all.len() { all[lo] * (1.0 - frac) + all[lo + 1] * frac } else { all[lo] };
    (hd, all.iter().sum::<f64>() / all.len() as f64)
}

fn random_blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    // a few random discs plus salt noise, so boundaries are varied
    let mut l = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (ci, cj, r) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64, rng.random_range(1.0..8.0));
        for i in 0..h {
            for j in 0..w {
                if (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) <= r * r {
                    l[i * w + j] = 1;
                }
            }
        }
    }
    for v in l.iter_mut() {
        if rng.random::<f64>() < 0.03 {
            *v ^= 1;
        }
    }
    l
}

#[test]
fn metrics_match_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (a, b) = (random_blob_mask(&mut rng, h, w), random_blob_mask(&mut rng, h, w));
        let (pa, pb) = (a.iter().map(|&v| v == 1).collect::<Vec<_>>(), b.iter().map(|&v| v == 1).collect::<Vec<_>>());
        let inter = pa.iter().zip(&pb).filter(|(x, y)| **x && **y).count() as f64;
        let (np, ng) = (pa.iter().filter(|&&x| x).count() as f64, pb.iter().filter(|&&x| x).count() as f64);
        let (dice_o, iou_o) = if np + ng == 0.0 { (1.0, 1.0) } else { (2.0 * inter / (np + ng), inter / (np + ng - inter)) };
        let (hd_o, asd_o) = brute_surface(&pa, &pb, h, w);

        let (ma, mb) = (LabelMask::new(h, w, a, 2).unwrap(), LabelMask::new(h, w, b, 2).unwrap());
        let (dice, iou) = dice_iou(&ma, &mb, 1).unwrap();
        let s = hd95_asd(&ma, &mb, 1).unwrap();
        assert!((dice - dice_o).abs() <= 1e-9 && (iou - iou_o).abs() <= 1e-9, "case {case}: overlap");
        assert!((s.hd95 - hd_o).abs() <= 1e-9, "case {case}: hd95 {} vs {}", s.hd95, hd_o);
        assert!((s.asd - asd_o).abs() <= 1e-9, "case {case}: asd {} vs {}", s.asd, asd_o);
        assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
    }
}

#[test]
fn distance_transform_matches_brute_force_up_to_32() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.001..0.3);
        let m: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
        let sites: Vec<(usize, usize)> = (0..h * w).filter(|&k| m[k]).map(|k| (k / w, k % w)).collect();
        let got = squared_edt(&m, h, w, (1.0, 1.0));
        if sites.is_empty() {
            assert!(got.is_none());
            continue;
        }
        let got = got.unwrap();
        for i in 0..h {
            for j in 0..w {
                let best = sites
                    .iter()
                    .map(|&(a, b)| (i as f64 - a as f64).powi(2) + (j as f64 - b as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(got[i * w + j], best);
            }
        }
    }
}

fn random_f32_case(rng: &mut ChaCha8Rng, l: usize, c: usize, n: usize) -> (ScanSequence<f32>, SsmParams<f32>) {
    let mut t = |shape: &[usize], f: &dyn Fn(f64) -> f64| Tensor::<f32>::from_fn(shape, |_| f(normal(rng)) as f32);
    let tokens = t(&[l, c], &|v| v);
    let a = Tensor::<f32>::from_fn(&[c, n], |i| -((i % n) as f32 + 1.0));
    let delta0 = t(&[l, c], &|v| softplus(v - 1.0));
    let b0 = t(&[l, n], &|v| v);
    let cm = t(&[l, n], &|v| v);
    let d = t(&[c], &|v| v);
    let retain = (0..l).map(|i| (0.8 * ((i * 7) % 11) as f32 / 10.0).min(0.8)).collect();
    let enhance = (0..l).map(|i| ((i * 3) % 5) as f32 * 0.25).collect();
    (ScanSequence { tokens, retain: Some(retain), enhance: Some(enhance) }, SsmParams { a, delta0, b0, c: cm, d: Some(d), a_max: None })
}

#[test]
fn parallel_scan_matches_sequential_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (l, n) in [(64, 4), (512, 16), (1000, 4)] {
        for _ in 0..5 {
            let (seq, p) = random_f32_case(&mut rng, l, 3, n);
            let a = selective_scan_seq(&seq, &p).unwrap();
            let b = selective_scan_parallel(&seq, &p).unwrap();
            let err = a.data().iter().zip(b.data()).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
            assert!(err <= 1e-5, "L={l} N={n}: {err}");
        }
    }
}

#[test]
fn boundary_interior_timestep_ratio() {
    // P_b step map: left half boundary (1), right half interior (0)
    let (h, w) = (6, 8);
    let pb = Tensor::<f64>::from_fn(&[h, w], |i| if i % w < w / 2 { 1.0 } else { 0.0 });
    for mu_r in [0.5, 0.8] {
        let re = RetainEnhance::from_posterior(pb.clone(), mu_r, 1.2);
        let delta0 = Tensor::full(&[h * w, 3], 0.37);
        let b0 = Tensor::full(&[h * w, 2], 1.0);
        let m = modulate_params(&delta0, &b0, re.retain.data(), re.enhance.data()).unwrap();
        let (mut sb, mut nb, mut si, mut ni) = (0.0, 0, 0.0, 0);
        for k in 0..h * w {
            for ch in 0..3 {
                if pb.data()[k] == 1.0 {
                    sb += m.delta.data()[k * 3 + ch];
                    nb += 1;
                } else {
                    si += m.delta.data()[k * 3 + ch];
                    ni += 1;
                }
            }
        }
        let ratio = (sb / nb as f64) / (si / ni as f64);
        assert!((ratio - 1.0 / (1.0 - mu_r)).abs() < 1e-12, "μ_R={mu_r}: {ratio}");
    }
}

#[test]
fn grouped_scans_respect_the_state_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..200 {
        let groups = [1, 2, 4, 8][case % 4];
        let cap = rng.random_range(0.01..0.99);
        let cfg = CmsaConfig {
            channels: 16,
            groups,
            width: 4,
            state: 3,
            cap_init: cap,
            lambda_init: rng.random_range(0.05..2.0),
            dt_init: rng.random_range(0.01..3.0),
            ..CmsaConfig::new(16)
        };
        let mut init = || normal(&mut rng);
        let mut p = CmsaParams::<f64>::new(&cfg, &mut init);
        // any sign for A: the clip alone must keep the state bounded
        p.ssm.a = p.ssm.a.map(|v| v * if case % 3 == 0 { -1.0 } else { 0.5 });
        let u = Tensor::<f64>::from_fn(&[16, 4], |_| 3.0 * normal(&mut rng));
        let scan = grouped_bounded_scan(&u, &p, &cfg).unwrap();
        let rep = boundedness_check(&scan).unwrap();
        assert!(rep.max_ratio <= 1.0 + 1e-9, "case {case}");
    }
}

//! Exact Euclidean distance transform by two separable lower-envelope passes
//! (columns, then rows), with optional anisotropic pixel spacing.

/// Squared distance from every pixel to the nearest `true` pixel, or `None`
/// when the mask has no `true` pixel. `spacing` is `(row, col)` size.
pub fn squared_edt(mask: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Option<Vec<f64>> {
    assert_eq!(mask.len(), h * w, "mask length");
    if !mask.iter().any(|&b| b) {
        return None;
    }
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let (sy2, sx2) = (spacing.0 * spacing.0, spacing.1 * spacing.1);
    for col in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + col];
        }
        lower_envelope(&f[..h], sy2, &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + col] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&f[..w], sx2, &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Some(grid)
}

/// 1-D squared distance transform of the sampled function `f` under
/// `d(q, p) = s2 (q - p)^2 + f(p)`; infinite samples are not sites.
fn lower_envelope(f: &[f64], s2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut sites = (0..n).filter(|&q| f[q].is_finite());
    let Some(first) = sites.next() else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in sites {
        let mut s;
        loop {
            let p = v[k];
            s = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

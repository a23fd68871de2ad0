//! Synthetic hollow-organ stand-ins: filled ellipses, thin closed rings and
//! open C-rings on a noisy low-contrast background.

use std::path::Path;

use dualscan_core::metrics::LabelMask;
use dualscan_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::pgm::{load_pgm, save_pgm, Pgm};

pub const CLASSES: usize = 4;
const NOISE_SD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, S, S)` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { a: f64, b: f64, rot: f64 },
    Ring { r: f64, wall: f64 },
    CRing { r: f64, wall: f64, gap_dir: f64, gap_half: f64 },
}

impl Shape {
    fn random(class: u8, rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64 / 64.0;
        match class {
            1 => Shape::Ellipse {
                a: rng.random_range(4.0..9.0) * s,
                b: rng.random_range(3.0..7.0) * s,
                rot: rng.random_range(0.0..std::f64::consts::PI),
            },
            2 => Shape::Ring { r: rng.random_range(6.0..11.0) * s, wall: rng.random_range(1.0..2.0) },
            _ => Shape::CRing {
                r: rng.random_range(6.0..11.0) * s,
                wall: 3.0,
                gap_dir: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                gap_half: rng.random_range(60.0f64..90.0).to_radians() / 2.0,
            },
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Ellipse { a, b, .. } => a.max(b),
            Shape::Ring { r, wall } | Shape::CRing { r, wall, .. } => r + wall / 2.0,
        }
    }

    fn contains(&self, dy: f64, dx: f64) -> bool {
        match *self {
            Shape::Ellipse { a, b, rot } => {
                let (s, c) = rot.sin_cos();
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Ring { r, wall } => ((dy * dy + dx * dx).sqrt() - r).abs() <= wall / 2.0,
            Shape::CRing { r, wall, gap_dir, gap_half } => {
                let on_ring = ((dy * dy + dx * dx).sqrt() - r).abs() <= wall / 2.0;
                let mut off = dy.atan2(dx) - gap_dir;
                off = (off + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
                on_ring && off.abs() > gap_half
            }
        }
    }
}

/// One image. Objects keep a 2-pixel moat from each other and from the border;
/// a class that cannot be placed after a bounded number of tries is skipped.
pub fn synth_image(seed: u64, index: u64, size: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let bg = rng.random_range(0.3..0.4);
    let noise = Normal::new(0.0, NOISE_SD).expect("positive sd");
    let mut labels = vec![0u8; size * size];
    let mut level = vec![bg; size * size];
    let mut classes = [1u8, 2, 3];
    for i in (1..3).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    for class in classes {
        for _attempt in 0..40 {
            let shape = Shape::random(class, &mut rng, size);
            let ext = shape.extent() + 2.0;
            if 2.0 * ext >= size as f64 {
                continue;
            }
            let cy = rng.random_range(ext..size as f64 - ext);
            let cx = rng.random_range(ext..size as f64 - ext);
            let pix: Vec<usize> = (0..size * size)
                .filter(|&k| shape.contains((k / size) as f64 - cy, (k % size) as f64 - cx))
                .collect();
            if pix.is_empty() {
                continue;
            }
            let clash = pix.iter().any(|&k| {
                let (y, x) = ((k / size) as isize, (k % size) as isize);
                (-2..=2).any(|oy| {
                    (-2..=2).any(|ox| {
                        let (yy, xx) = (y + oy, x + ox);
                        yy >= 0
                            && xx >= 0
                            && (yy as usize) < size
                            && (xx as usize) < size
                            && labels[yy as usize * size + xx as usize] != 0
                    })
                })
            });
            if clash {
                continue;
            }
            let val = bg + rng.random_range(0.1..0.2);
            for &k in &pix {
                labels[k] = class;
                level[k] = val;
            }
            break;
        }
    }
    let data: Vec<f32> = level.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect();
    Sample {
        image: Tensor::new(&[1, size, size], data).expect("square image"),
        mask: LabelMask::new(size, size, labels, CLASSES).expect("labels in range"),
    }
}

/// Images `first .. first + n` of the stream for `seed`.
pub fn synth_range(seed: u64, first: usize, n: usize, size: usize) -> Vec<Sample> {
    (first..first + n).map(|i| synth_image(seed, i as u64, size)).collect()
}

pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Vec<Sample> {
    synth_range(seed, 0, n, size)
}

/// Train and validation splits drawn from disjoint parts of one stream.
pub fn synth_splits(seed: u64, train: usize, val: usize, size: usize) -> (Vec<Sample>, Vec<Sample>) {
    (synth_range(seed, 0, train, size), synth_range(seed, train, val, size))
}

pub fn image_to_pgm(img: &Tensor<f32>) -> Result<Pgm> {
    let (_, h, w) = img.dims3()?;
    let pixels = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(Pgm { width: w, height: h, pixels })
}

/// Writes `image_NNNN.pgm` / `mask_NNNN.pgm` pairs.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        save_pgm(&image_to_pgm(&s.image)?, dir.join(format!("image_{i:04}.pgm")))?;
        let (h, w) = s.mask.dims();
        save_pgm(&Pgm { width: w, height: h, pixels: s.mask.labels().to_vec() }, dir.join(format!("mask_{i:04}.pgm")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("image_") && n.ends_with(".pgm"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let img = load_pgm(dir.join(&name))?;
        let mask = load_pgm(dir.join(name.replacen("image_", "mask_", 1)))?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::Format(format!("{name}: image and mask sizes differ")));
        }
        let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        out.push(Sample {
            image: Tensor::new(&[1, img.height, img.width], data)?,
            mask: LabelMask::new(img.height, img.width, mask.pixels, CLASSES)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?,
        });
    }
    Ok(out)
}

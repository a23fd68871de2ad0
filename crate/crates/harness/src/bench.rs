//! Scan throughput: sequential recurrence vs the parallel prefix scan.

use std::time::Instant;

use dualscan_core::scan::{selective_scan_parallel, selective_scan_seq, ScanSequence, SsmParams};
use dualscan_core::{Result, Tensor};
use serde::Serialize;

use crate::net::layer_stream;

#[derive(Clone, Debug, Serialize)]
pub struct ScanBench {
    pub len: usize,
    pub state: usize,
    pub channels: usize,
    pub reps: usize,
    pub sequential_ns_per_token: f64,
    pub parallel_ns_per_token: f64,
    /// Max-abs difference between the two outputs.
    pub max_abs_diff: f64,
}

pub fn random_scan(len: usize, channels: usize, state: usize, seed: u64) -> (ScanSequence<f32>, SsmParams<f32>) {
    let mut g = layer_stream(seed, "scan-bench");
    let mut t = |shape: &[usize], f: &dyn Fn(f64) -> f64| Tensor::from_fn(shape, |_| f(g()) as f32);
    let tokens = t(&[len, channels], &|v| v);
    let p = SsmParams {
        a: t(&[channels, state], &|v| -(0.5 + v.abs())),
        delta0: t(&[len, channels], &|v| 0.01 + 0.1 * v.abs()),
        b0: t(&[len, state], &|v| v),
        c: t(&[len, state], &|v| v),
        d: Some(t(&[channels], &|v| v)),
        a_max: None,
    };
    (ScanSequence::plain(tokens), p)
}

pub fn scan_bench(len: usize, state: usize, channels: usize, reps: usize) -> Result<ScanBench> {
    let (seq, p) = random_scan(len, channels, state, 0);
    let reps = reps.max(1);
    let time = |f: &dyn Fn() -> Result<Tensor<f32>>| -> Result<(f64, Tensor<f32>)> {
        let out = f()?;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(f()?);
        }
        Ok((t.elapsed().as_nanos() as f64 / (reps * len) as f64, out))
    };
    let (seq_ns, ys) = time(&|| selective_scan_seq(&seq, &p))?;
    let (par_ns, yp) = time(&|| selective_scan_parallel(&seq, &p))?;
    let max_abs_diff = ys.data().iter().zip(yp.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    Ok(ScanBench {
        len,
        state,
        channels,
        reps,
        sequential_ns_per_token: seq_ns,
        parallel_ns_per_token: par_ns,
        max_abs_diff,
    })
}

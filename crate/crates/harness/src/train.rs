//! Training loop, held-out evaluation and parameter sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualscan_core::metrics::{seg_metrics, LabelMask, SegMetrics};
use dualscan_core::params::Parameterized;
use dualscan_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::loss::{dice_ce_loss, LossWeights};
use crate::net::{backward, forward, predict, NetArch, ToyNet};
use crate::optim::{cosine_lr, AdamW};
use crate::synth::{synth_splits, Sample};

/// Decaying scan states and saturated gates drift into subnormal floats late
/// in training, which costs ~2x on x86. Flush them to zero on the workers.
fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only sets the FTZ and DAZ bits of this thread's MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .start_handler(|_| flush_subnormals())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn loss_weights(cfg: &RunConfig) -> LossWeights {
    LossWeights { dice: cfg.train.dice_weight, ce: cfg.train.ce_weight, levels: cfg.train.ds_weights.clone() }
}

/// Loss and parameter gradients for one image.
pub fn sample_grads(net: &ToyNet<f32>, arch: &NetArch, s: &Sample, w: &LossWeights) -> Result<(f64, ToyNet<f32>)> {
    let (logits, cache) = forward(net, arch, &s.image)?;
    let (loss, _, g_logits) = dice_ce_loss(&logits, &s.mask, w)?;
    let g_logits: [Tensor<f32>; 3] = g_logits.try_into().map_err(|_| Error::Config("expected 3 levels".into()))?;
    let mut grads = net.zeroed_like();
    backward(net, arch, &cache, &g_logits, &mut grads)?;
    Ok((loss, grads))
}

/// Batch-mean loss and gradients. Items may run in parallel; the reduction
/// is always in batch order, so the result does not depend on thread count.
pub fn batch_grads(
    net: &ToyNet<f32>,
    arch: &NetArch,
    batch: &[&Sample],
    w: &LossWeights,
    pool: &rayon::ThreadPool,
) -> Result<(f64, ToyNet<f32>)> {
    let per: Vec<Result<(f64, ToyNet<f32>)>> = pool.install(|| batch.par_iter().map(|s| sample_grads(net, arch, s, w)).collect());
    let mut total = net.zeroed_like();
    let mut loss = 0.0;
    for r in per {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f32;
    total.visit_mut(&mut |_, t| t.scale(inv));
    Ok((loss / batch.len() as f64, total))
}

pub fn argmax_mask(logits: &Tensor<f32>) -> Result<LabelMask> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let z = logits.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if z[c * n + i] > z[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels, k)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub mdice: f64,
    pub miou: f64,
    /// Foreground classes 1..K, averaged over images.
    pub class_dice: Vec<f64>,
    pub class_hd95: Vec<f64>,
    #[serde(skip)]
    pub per_image: Vec<SegMetrics>,
}

/// Mean over images of the per-image foreground mDice/mIoU.
pub fn evaluate(net: &ToyNet<f32>, arch: &NetArch, data: &[Sample], pool: &rayon::ThreadPool) -> Result<EvalSummary> {
    let per: Vec<Result<SegMetrics>> = pool.install(|| {
        data.par_iter()
            .map(|s| {
                let pred = argmax_mask(&predict(net, arch, &s.image)?)?;
                seg_metrics(&pred, &s.mask)
            })
            .collect()
    });
    let per_image: Vec<SegMetrics> = per.into_iter().collect::<Result<_>>()?;
    let n = per_image.len().max(1) as f64;
    let classes = arch.classes - 1;
    let mut class_dice = vec![0.0; classes];
    let mut class_hd95 = vec![0.0; classes];
    for m in &per_image {
        for (c, cm) in m.per_class.iter().enumerate() {
            class_dice[c] += cm.dice / n;
            class_hd95[c] += cm.hd95 / n;
        }
    }
    Ok(EvalSummary {
        mdice: per_image.iter().map(|m| m.mdice).sum::<f64>() / n,
        miou: per_image.iter().map(|m| m.miou).sum::<f64>() / n,
        class_dice,
        class_hd95,
        per_image,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: f64,
    pub mdice: f64,
    pub miou: f64,
}

pub struct TrainResult {
    pub net: ToyNet<f32>,
    pub arch: NetArch,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub last: EvalSummary,
    pub seconds: f64,
    pub config_hash: String,
}

/// Where a run writes `metrics.jsonl` and `checkpoint/`.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub verbose: bool,
}

struct Log(Option<std::io::BufWriter<std::fs::File>>);

impl Log {
    fn open(dir: Option<&Path>) -> Result<Self> {
        match dir {
            None => Ok(Log(None)),
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(Log(Some(std::io::BufWriter::new(std::fs::File::create(d.join("metrics.jsonl"))?))))
            }
        }
    }

    fn write(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

fn nan_dump(net: &ToyNet<f32>, grads: Option<&ToyNet<f32>>, step: usize, cause: &str, dir: Option<&Path>) -> Error {
    let mut gstat = Vec::new();
    if let Some(g) = grads {
        g.visit(&mut |_, t| gstat.push(json!({"grad_max_abs": t.max_abs(), "grad_finite": t.is_finite()})));
    }
    let mut rows = Vec::new();
    net.visit(&mut |n, t| {
        let mut row = json!({"param": n, "max_abs": t.max_abs(), "finite": t.is_finite()});
        if let Some(g) = gstat.get(rows.len()) {
            row["grad_max_abs"] = g["grad_max_abs"].clone();
            row["grad_finite"] = g["grad_finite"].clone();
        }
        rows.push(row);
    });
    let dump = json!({"step": step, "cause": cause, "params": rows});
    let mut msg = format!("training diverged at step {step} ({cause})");
    if let Some(d) = dir {
        let path = d.join("nan_dump.json");
        if std::fs::write(&path, dump.to_string()).is_ok() {
            msg.push_str(&format!("; diagnostics in {}", path.display()));
        }
    }
    Error::Invariant(msg)
}

pub fn train_on(cfg: &RunConfig, train: &[Sample], val: &[Sample], out: &RunOutput) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let t0 = Instant::now();
    let arch = NetArch::from_config(cfg);
    let mut net = ToyNet::<f32>::new(&arch, cfg.seed);
    let pool = thread_pool(cfg.train.threads)?;
    let w = loss_weights(cfg);
    let tc = &cfg.train;
    let batch = tc.batch.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let eval_every = if tc.eval_every == 0 { per_epoch } else { tc.eval_every };
    let mut opt = AdamW::new(tc.weight_decay);
    let mut log = Log::open(out.dir.as_deref())?;
    let hash = cfg.hash();
    log.write(json!({"kind": "config", "hash": hash, "params": net.param_count(), "config": cfg.to_text()}))?;

    let mut order: Vec<usize> = Vec::new();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(tc.steps);
    let mut evals = Vec::new();
    for step in 0..tc.steps {
        let pos = (step % per_epoch) * batch;
        if pos == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut shuffler);
        }
        let items: Vec<&Sample> = order[pos..(pos + batch).min(order.len())].iter().map(|&i| &train[i]).collect();
        let (loss, grads) = match batch_grads(&net, &arch, &items, &w, &pool) {
            Ok(r) => r,
            // the same batch shapes passed at step 0, so a later failure is
            // a non-finite intermediate
            Err(e) if step > 0 => {
                log.flush()?;
                return Err(nan_dump(&net, None, step, &e.to_string(), out.dir.as_deref()));
            }
            Err(e) => return Err(e),
        };
        let mut grads_finite = true;
        grads.visit(&mut |_, t| grads_finite &= t.is_finite());
        if !loss.is_finite() || !grads_finite {
            log.flush()?;
            let cause = format!("loss {loss}, gradients finite: {grads_finite}");
            return Err(nan_dump(&net, Some(&grads), step, &cause, out.dir.as_deref()));
        }
        let lr = cosine_lr(step, tc.steps, tc.lr, tc.lr_min);
        opt.step(&mut net, &grads, lr);
        net.project();
        let mut params_finite = true;
        net.visit(&mut |_, t| params_finite &= t.is_finite());
        if !params_finite {
            log.flush()?;
            return Err(nan_dump(&net, Some(&grads), step + 1, "non-finite parameters after the update", out.dir.as_deref()));
        }
        losses.push(loss);
        log.write(json!({"kind": "step", "step": step + 1, "lr": lr, "loss": loss}))?;
        let done = step + 1 == tc.steps;
        if (!val.is_empty()) && ((step + 1) % eval_every == 0 || done) {
            let e = match evaluate(&net, &arch, val, &pool) {
                Ok(e) => e,
                Err(e) => {
                    log.flush()?;
                    return Err(nan_dump(&net, None, step + 1, &e.to_string(), out.dir.as_deref()));
                }
            };
            let point = EvalPoint { step: step + 1, epoch: (step + 1) as f64 / per_epoch as f64, mdice: e.mdice, miou: e.miou };
            if out.verbose {
                eprintln!(
                    "step {:>5}  loss {:.4}  val mDice {:.4}  mIoU {:.4}  ({:.0}s)",
                    point.step,
                    loss,
                    e.mdice,
                    e.miou,
                    t0.elapsed().as_secs_f64()
                );
            }
            log.write(json!({"kind": "eval", "step": point.step, "epoch": point.epoch, "mdice": e.mdice, "miou": e.miou, "class_dice": e.class_dice}))?;
            evals.push(point);
        }
    }
    let last = evaluate(&net, &arch, val, &pool)?;
    log.flush()?;
    if let Some(d) = &out.dir {
        save_checkpoint(&net, cfg, &d.join("checkpoint"))?;
    }
    Ok(TrainResult { net, arch, losses, evals, last, seconds: t0.elapsed().as_secs_f64(), config_hash: hash })
}

/// Generates the configured splits, then trains.
pub fn train(cfg: &RunConfig, out: &RunOutput) -> Result<TrainResult> {
    cfg.validate()?;
    let d = &cfg.data;
    let (tr, va) = synth_splits(d.seed, d.train, d.val, d.size);
    train_on(cfg, &tr, &va, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub mdice: f64,
    pub miou: f64,
}

pub fn sweep_config(base: &RunConfig, param: &str, value: &str) -> Result<RunConfig> {
    let key = match param {
        "mu_R" | "mu_r" => "basm.mu_r",
        "mu_E" | "mu_e" => "basm.mu_e",
        "G" | "groups" => "cmsa.groups",
        other => other,
    };
    let mut c = base.clone();
    c.set(key, value)?;
    c.validate()?;
    Ok(c)
}

/// One run per value with the base seed. All values are validated before
/// any training starts.
pub fn sweep(base: &RunConfig, param: &str, values: &[String], out: &RunOutput) -> Result<Vec<SweepRow>> {
    let cfgs: Vec<RunConfig> = values.iter().map(|v| sweep_config(base, param, v)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (v, c) in values.iter().zip(cfgs) {
        let sub = RunOutput { dir: out.dir.as_ref().map(|d| d.join(format!("{param}={v}"))), verbose: out.verbose };
        let r = train(&c, &sub)?;
        rows.push(SweepRow { param: param.to_string(), value: v.clone(), mdice: r.last.mdice, miou: r.last.miou });
    }
    Ok(rows)
}

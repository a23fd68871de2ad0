//! Static run report: a JSON summary of a metric log plus PGM heatmaps of
//! the boundary-guidance internals for one validation image.

use std::path::{Path, PathBuf};

use dualscan_core::params::Parameterized;
use dualscan_core::{Error, Result, Tensor};
use serde_json::{json, Value};

use crate::bench::scan_bench;
use crate::checkpoint::{load_checkpoint, manifest_param_count};
use crate::net::{forward, NetArch};
use crate::pgm::{heatmap, save_pgm};
use crate::synth::synth_splits;

#[derive(Clone, Debug, Default)]
pub struct ReportOptions {
    /// Defaults to `checkpoint/` next to the log.
    pub checkpoint: Option<PathBuf>,
    /// Where heatmaps and `summary.json` go; defaults to the log's directory.
    pub out: Option<PathBuf>,
    /// Validation image index used for the heatmaps.
    pub sample: usize,
    pub bench: bool,
}

/// Reads a JSON-lines metric log. A missing file is an I/O error.
pub fn read_log(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn last_of<'a>(log: &'a [Value], kind: &str) -> Option<&'a Value> {
    log.iter().rev().find(|v| v["kind"] == kind)
}

/// Summary fields derived from the log alone.
pub fn summarize_log(log: &[Value]) -> Value {
    let steps: Vec<&Value> = log.iter().filter(|v| v["kind"] == "step").collect();
    let evals: Vec<&Value> = log.iter().filter(|v| v["kind"] == "eval").collect();
    let metrics = match last_of(log, "eval") {
        Some(e) => json!({
            "step": e["step"],
            "mdice": e["mdice"],
            "miou": e["miou"],
            "class_dice": e["class_dice"],
            "best_mdice": evals.iter().filter_map(|v| v["mdice"].as_f64()).fold(f64::NEG_INFINITY, f64::max),
        }),
        None => json!("no data"),
    };
    let loss = match steps.last() {
        Some(s) => json!({"steps": steps.len(), "first": steps[0]["loss"], "last": s["loss"]}),
        None => json!("no data"),
    };
    let config = last_of(log, "config");
    json!({
        "config_hash": config.map_or(json!("no data"), |c| c["hash"].clone()),
        "metrics": metrics,
        "loss": loss,
        "evals": evals.len(),
        "logged_param_count": config.map_or(json!("no data"), |c| c["params"].clone()),
    })
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Writes `M`, `P_b`, `R`, `E` and `w_ssm` of the finest BASM block. `M`,
/// `P_b` and `w_ssm` map `[0, 1]` to 0–255; `R` and `E` use their own range.
fn write_heatmaps(ckpt: &Path, out: &Path, sample: usize) -> Result<Value> {
    let (cfg, net) = load_checkpoint(ckpt)?;
    let arch = NetArch::from_config(&cfg);
    if arch.basm.is_none() {
        return Ok(json!("no data (BASM disabled in this run)"));
    }
    let d = &cfg.data;
    let (_, val) = synth_splits(d.seed, d.train, d.val.max(sample + 1), d.size);
    let (_, cache) = forward(&net, &arch, &val[sample].image)?;
    let basm = cache.basm1.as_ref().expect("BASM enabled");
    let (h, w) = (d.size, d.size);
    let mut maps: Vec<(&str, Vec<f64>, Option<(f64, f64)>)> = vec![("M", to_f64(&basm.guidance.map.m), Some((0.0, 1.0)))];
    if let Some(p) = &basm.posterior {
        maps.push(("P_b", to_f64(&p.out.p_b), Some((0.0, 1.0))));
        maps.push(("R", to_f64(&p.out.retain), None));
        maps.push(("E", to_f64(&p.out.enhance), None));
    }
    maps.push(("w_ssm", to_f64(&basm.fusion.w_ssm), Some((0.0, 1.0))));
    std::fs::create_dir_all(out)?;
    let mut files = serde_json::Map::new();
    for (name, values, fixed) in maps {
        let (lo, hi) = fixed.unwrap_or_else(|| range(&values));
        let path = out.join(format!("heatmap_{name}.pgm"));
        save_pgm(&heatmap(&values, w, h, lo, hi), &path)?;
        files.insert(name.to_string(), json!({"file": path.display().to_string(), "lo": lo, "hi": hi}));
    }
    Ok(json!({"sample": sample, "maps": files}))
}

pub fn report(log_path: &Path, opts: &ReportOptions) -> Result<Value> {
    let log = read_log(log_path)?;
    let base = log_path.parent().unwrap_or(Path::new("."));
    let out = opts.out.clone().unwrap_or_else(|| base.to_path_buf());
    let mut summary = summarize_log(&log);
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| base.join("checkpoint"));
    if ckpt.join(crate::checkpoint::MANIFEST).exists() {
        let (_, net) = load_checkpoint(&ckpt)?;
        let counted = net.param_count();
        let recount = manifest_param_count(&ckpt)?;
        summary["param_count"] = json!({"network": counted, "manifest": recount, "match": counted == recount});
        summary["heatmaps"] = write_heatmaps(&ckpt, &out, opts.sample)?;
    } else {
        summary["param_count"] = json!("no data");
        summary["heatmaps"] = json!("no data");
    }
    summary["scan_bench"] = if opts.bench { serde_json::to_value(scan_bench(1024, 16, 16, 3)?).expect("plain struct") } else { json!("skipped") };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json value"))?;
    Ok(summary)
}

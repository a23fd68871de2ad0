//! Run configuration: `key = value` text files with dotted keys.

use std::fmt::Write as _;
use std::path::Path;

use dualscan_core::basm::{BasmConfig, InputFusion};
use dualscan_core::cmsa::CmsaConfig;
use dualscan_core::scan::ScanMode;
use dualscan_core::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct BasmSettings {
    pub enabled: bool,
    pub modulation: bool,
    pub se_fusion: bool,
    pub input: InputFusion,
    pub state: usize,
    pub dt_init: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub mu_r: f64,
    pub mu_e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmsaSettings {
    pub enabled: bool,
    pub groups: usize,
    pub width: usize,
    pub state: usize,
    pub lambda_init: f64,
    pub cap_init: f64,
    pub dt_init: f64,
}

/// Architecture of the toy network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub widths: [usize; 3],
    pub classes: usize,
    pub scan_mode: ScanMode,
    pub basm: BasmSettings,
    pub cmsa: CmsaSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// One weight per supervision level, coarse to fine.
    pub ds_weights: Vec<f64>,
    /// Evaluate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BasmConfig::new(1);
        let c = CmsaConfig::new(1);
        Self {
            seed: 0,
            net: NetConfig {
                widths: [16, 32, 64],
                classes: 4,
                // one core: the recurrence beats the prefix scan
                scan_mode: ScanMode::Sequential,
                basm: BasmSettings {
                    enabled: true,
                    modulation: b.modulation,
                    se_fusion: b.se_fusion,
                    input: b.input,
                    state: 4,
                    dt_init: b.dt_init,
                    tau: b.tau,
                    alpha: b.alpha,
                    gamma: b.gamma,
                    mu_r: b.mu_r,
                    mu_e: b.mu_e,
                },
                cmsa: CmsaSettings {
                    enabled: true,
                    groups: c.groups,
                    width: c.width,
                    state: c.state,
                    lambda_init: c.lambda_init,
                    cap_init: c.cap_init,
                    dt_init: c.dt_init,
                },
            },
            train: TrainConfig {
                steps: 2000,
                batch: 4,
                lr: 1e-4,
                lr_min: 0.0,
                weight_decay: 0.01,
                dice_weight: 1.0,
                ce_weight: 1.0,
                ds_weights: vec![1.0, 0.5, 0.25],
                eval_every: 0,
                threads: 1,
            },
            data: DataConfig { train: 128, val: 32, size: 64, seed: 0 },
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => cfg_err(format!("{key}: expected on|off, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| cfg_err(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn onoff(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (n, t, d) = (&mut self.net, &mut self.train, &mut self.data);
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "net.widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                n.widths = w.try_into().or_else(|_| cfg_err("net.widths needs exactly 3 values"))?;
            }
            "net.classes" => n.classes = parse_num(key, v)?,
            "scan.mode" => {
                n.scan_mode = match v {
                    "sequential" => ScanMode::Sequential,
                    "parallel" => ScanMode::Parallel,
                    _ => return cfg_err(format!("scan.mode: expected sequential|parallel, got `{v}`")),
                }
            }
            "basm.enabled" => n.basm.enabled = parse_bool(key, v)?,
            "basm.modulation" => n.basm.modulation = parse_bool(key, v)?,
            "basm.se_fusion" => n.basm.se_fusion = parse_bool(key, v)?,
            "basm.input" => {
                n.basm.input = match v {
                    "sum" => InputFusion::Sum,
                    "concat" => InputFusion::Concat,
                    _ => return cfg_err(format!("basm.input: expected sum|concat, got `{v}`")),
                }
            }
            "basm.state" => n.basm.state = parse_num(key, v)?,
            "basm.dt_init" => n.basm.dt_init = parse_num(key, v)?,
            "basm.tau" => n.basm.tau = parse_num(key, v)?,
            "basm.alpha" => n.basm.alpha = parse_num(key, v)?,
            "basm.gamma" => n.basm.gamma = parse_num(key, v)?,
            "basm.mu_r" => n.basm.mu_r = parse_num(key, v)?,
            "basm.mu_e" => n.basm.mu_e = parse_num(key, v)?,
            "cmsa.enabled" => n.cmsa.enabled = parse_bool(key, v)?,
            "cmsa.groups" => n.cmsa.groups = parse_num(key, v)?,
            "cmsa.width" => n.cmsa.width = parse_num(key, v)?,
            "cmsa.state" => n.cmsa.state = parse_num(key, v)?,
            "cmsa.lambda_init" => n.cmsa.lambda_init = parse_num(key, v)?,
            "cmsa.Lambda_init" => n.cmsa.cap_init = parse_num(key, v)?,
            "cmsa.dt_init" => n.cmsa.dt_init = parse_num(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.batch" => t.batch = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.lr_min" => t.lr_min = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.dice_weight" => t.dice_weight = parse_num(key, v)?,
            "train.ce_weight" => t.ce_weight = parse_num(key, v)?,
            "train.ds_weights" => t.ds_weights = parse_list(key, v)?,
            "train.eval_every" => t.eval_every = parse_num(key, v)?,
            "train.threads" => t.threads = parse_num(key, v)?,
            "data.train" => d.train = parse_num(key, v)?,
            "data.val" => d.val = parse_num(key, v)?,
            "data.size" => d.size = parse_num(key, v)?,
            "data.seed" => d.seed = parse_num(key, v)?,
            _ => return cfg_err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(format!("line {}: expected `key = value`", lineno + 1));
            };
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = (&self.net, &self.train);
        if n.widths.contains(&0) || n.classes < 2 {
            return cfg_err("widths must be positive and classes ≥ 2");
        }
        if self.data.size % 4 != 0 || self.data.size == 0 {
            return cfg_err(format!("data.size = {} must be a positive multiple of 4", self.data.size));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.lr_min >= 0.0 && t.lr_min <= t.lr.max(t.lr_min)) {
            return cfg_err(format!("train.lr = {} must be finite and non-negative", t.lr));
        }
        if t.batch == 0 || t.threads == 0 {
            return cfg_err("train.batch and train.threads must be positive");
        }
        if t.ds_weights.len() != 3 {
            return cfg_err(format!("train.ds_weights has {} entries for 3 supervision levels", t.ds_weights.len()));
        }
        let all = [t.dice_weight, t.ce_weight, t.weight_decay].into_iter().chain(t.ds_weights.iter().copied());
        if all.into_iter().any(|w| !(w >= 0.0 && w.is_finite())) {
            return cfg_err("loss weights and weight decay must be finite and ≥ 0");
        }
        if n.basm.state == 0 || !(n.basm.dt_init > 0.0) || n.basm.mu_r < 0.0 || n.basm.mu_e < 0.0 {
            return cfg_err("basm: state, dt_init must be positive; mu_r, mu_e non-negative");
        }
        if n.cmsa.enabled {
            self.cmsa_config().validate()?;
        }
        Ok(())
    }

    pub fn basm_config(&self, level: usize) -> BasmConfig {
        let s = &self.net.basm;
        BasmConfig {
            channels: self.net.widths[level],
            state: s.state,
            modulation: s.modulation,
            se_fusion: s.se_fusion,
            input: s.input,
            mode: self.net.scan_mode,
            dt_init: s.dt_init,
            tau: s.tau,
            alpha: s.alpha,
            gamma: s.gamma,
            mu_r: s.mu_r,
            mu_e: s.mu_e,
        }
    }

    pub fn cmsa_config(&self) -> CmsaConfig {
        let s = &self.net.cmsa;
        CmsaConfig {
            channels: self.net.widths[2],
            groups: s.groups,
            width: s.width,
            state: s.state,
            lambda_init: s.lambda_init,
            cap_init: s.cap_init,
            dt_init: s.dt_init,
            mode: self.net.scan_mode,
            clip: true,
        }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let (n, t, d) = (&self.net, &self.train, &self.data);
        let (b, c) = (&n.basm, &n.cmsa);
        let mode = match n.scan_mode {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        };
        let input = match b.input {
            InputFusion::Sum => "sum",
            InputFusion::Concat => "concat",
        };
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("net.widths", join(&n.widths)),
            ("net.classes", n.classes.to_string()),
            ("scan.mode", mode.into()),
            ("basm.enabled", onoff(b.enabled).into()),
            ("basm.modulation", onoff(b.modulation).into()),
            ("basm.se_fusion", onoff(b.se_fusion).into()),
            ("basm.input", input.into()),
            ("basm.state", b.state.to_string()),
            ("basm.dt_init", b.dt_init.to_string()),
            ("basm.tau", b.tau.to_string()),
            ("basm.alpha", b.alpha.to_string()),
            ("basm.gamma", b.gamma.to_string()),
            ("basm.mu_r", b.mu_r.to_string()),
            ("basm.mu_e", b.mu_e.to_string()),
            ("cmsa.enabled", onoff(c.enabled).into()),
            ("cmsa.groups", c.groups.to_string()),
            ("cmsa.width", c.width.to_string()),
            ("cmsa.state", c.state.to_string()),
            ("cmsa.lambda_init", c.lambda_init.to_string()),
            ("cmsa.Lambda_init", c.cap_init.to_string()),
            ("cmsa.dt_init", c.dt_init.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.dice_weight", t.dice_weight.to_string()),
            ("train.ce_weight", t.ce_weight.to_string()),
            ("train.ds_weights", join(&t.ds_weights)),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.threads", t.threads.to_string()),
            ("data.train", d.train.to_string()),
            ("data.val", d.val.to_string()),
            ("data.size", d.size.to_string()),
            ("data.seed", d.seed.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// The six ablation rows by name.
    pub fn ablation(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        let (b, m) = match name {
            "baseline" => (false, false),
            "basm" => (true, false),
            "cmsa" => (false, true),
            "full" => (true, true),
            "no_modulation" => {
                c.net.basm.modulation = false;
                (true, true)
            }
            "no_se_fusion" => {
                c.net.basm.se_fusion = false;
                (true, true)
            }
            _ => return cfg_err(format!("unknown ablation `{name}`")),
        };
        c.net.basm.enabled = b;
        c.net.cmsa.enabled = m;
        Ok(c)
    }
}

pub const ABLATIONS: [&str; 6] = ["baseline", "basm", "cmsa", "no_modulation", "no_se_fusion", "full"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply("basm.modulation = off\ncmsa.groups = 8 # fewer\n\n# comment\ntrain.lr=3e-3").unwrap();
        assert!(!c.net.basm.modulation);
        assert_eq!(c.net.cmsa.groups, 8);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in ["nope = 1", "cmsa.groups = 7", "train.lr = -1", "basm.modulation = maybe", "seed"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(RunConfig::parse("train.ds_weights = 1,0.5"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_switches() {
        let a = RunConfig::default();
        let b = RunConfig::parse("basm.modulation = off").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
        let names: std::collections::HashSet<_> = ABLATIONS.iter().map(|n| a.ablation(n).unwrap().hash()).collect();
        assert_eq!(names.len(), 6);
    }
}

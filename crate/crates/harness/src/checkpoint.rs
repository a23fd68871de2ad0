//! Checkpoints: a directory of TNSR files, `manifest.txt` (`name = file`)
//! and the run's `config.txt`.

use std::io::Write;
use std::path::Path;

use dualscan_core::params::Parameterized;
use dualscan_core::tnsr::{load_tnsr, read_tnsr_shape, save_tnsr};
use dualscan_core::{Error, Result};

use crate::config::RunConfig;
use crate::net::{NetArch, ToyNet};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

pub fn save_checkpoint(net: &ToyNet<f32>, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG), cfg.to_text())?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    let mut res = Ok(());
    net.visit(&mut |name, t| {
        if res.is_err() {
            return;
        }
        let file = format!("{name}.tnsr");
        res = save_tnsr(t, dir.join(&file)).and_then(|_| Ok(writeln!(manifest, "{name} = {file}")?));
    });
    res?;
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("bad manifest line `{l}`")))
        })
        .collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, ToyNet<f32>)> {
    let cfg = RunConfig::load(&dir.join(CONFIG))?;
    let mut net = ToyNet::<f32>::new(&NetArch::from_config(&cfg), cfg.seed);
    let entries = read_manifest(dir)?;
    let expected = net.names();
    if entries.len() != expected.len() || entries.iter().zip(&expected).any(|((n, _), e)| n != e) {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, the configured network has {}",
            entries.len(),
            expected.len()
        )));
    }
    for (name, file) in entries {
        let t = load_tnsr(dir.join(&file))?;
        net.set(&name, &t).map_err(|e| Error::Format(format!("{file}: {e}")))?;
    }
    Ok((cfg, net))
}

/// Parameter count from the tensor headers listed in the manifest alone.
pub fn manifest_param_count(dir: &Path) -> Result<usize> {
    let mut n = 0;
    for (_, file) in read_manifest(dir)? {
        let mut f = std::fs::File::open(dir.join(file))?;
        n += read_tnsr_shape(&mut f)?.iter().product::<usize>();
    }
    Ok(n)
}

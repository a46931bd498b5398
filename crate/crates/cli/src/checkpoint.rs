//! Checkpoint = text manifest (`<prefix>.manifest`) plus a raw little-endian
//! f64 blob (`<prefix>.bin`).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use patchmoe::model::{ModelConfig, PatchMoe};
use patchmoe::numerics::Tensor;

use crate::config::model_echo;

pub const FORMAT: &str = "patchmoe-checkpoint 1";

fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let base = prefix.to_string_lossy();
    let base = base.strip_suffix(".manifest").unwrap_or(&base);
    (PathBuf::from(format!("{base}.manifest")), PathBuf::from(format!("{base}.bin")))
}

pub fn save(prefix: &Path, model: &PatchMoe) -> Result<()> {
    let (manifest, blob) = paths(prefix);
    let mut text = format!("{FORMAT}\n[config]\n{}[params]\n", model_echo(model.config()));
    let mut bytes = Vec::with_capacity(model.params().num_values() * 8);
    for (name, t) in model.params().iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("{name} {} {} {}\n", shape.join("x"), bytes.len(), t.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&blob, bytes).with_context(|| format!("writing {}", blob.display()))?;
    std::fs::write(&manifest, text).with_context(|| format!("writing {}", manifest.display()))?;
    Ok(())
}

/// Builds a model for `config` and fills it from the checkpoint. Refuses a
/// checkpoint whose stored config differs.
pub fn load(prefix: &Path, config: &ModelConfig) -> Result<PatchMoe> {
    let (manifest, blob) = paths(prefix);
    let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT) {
        bail!("{}: not a {FORMAT} manifest", manifest.display());
    }
    if lines.next() != Some("[config]") {
        bail!("{}: missing [config] section", manifest.display());
    }
    let mut stored = String::new();
    for line in lines.by_ref() {
        if line == "[params]" {
            break;
        }
        stored.push_str(line);
        stored.push('\n');
    }
    let expected = model_echo(config);
    if stored != expected {
        let diff: Vec<String> = stored
            .lines()
            .zip(expected.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint {a} vs config {b}"))
            .collect();
        bail!("checkpoint does not match the configuration: {}", if diff.is_empty() { "key sets differ".to_string() } else { diff.join(", ") });
    }
    let bytes = std::fs::read(&blob).with_context(|| format!("reading {}", blob.display()))?;
    let mut model = PatchMoe::new(config.clone())?;
    let mut seen = 0;
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset, count] = f.as_slice() else {
            bail!("bad manifest line `{line}`");
        };
        let shape: Vec<usize> = shape.split('x').map(str::parse).collect::<Result<_, _>>()?;
        let (offset, count): (usize, usize) = (offset.parse()?, count.parse()?);
        let raw = bytes
            .get(offset..offset + count * 8)
            .ok_or_else(|| anyhow!("parameter `{name}` runs past the blob"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.params_mut().set(name, Tensor::new(shape, data)?)?;
        seen += 1;
    }
    if seen != model.params().len() {
        bail!("checkpoint holds {seen} parameters, model has {}", model.params().len());
    }
    Ok(model)
}

//! Model checkpoints: a directory holding a `config` file, a `manifest` that
//! lists every tensor with its shape and partition tag, and one STSR blob per
//! tensor.

use std::fs;
use std::path::Path;

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::model::{ModelParams, NetworkConfig, Parameter, Partition, Susinet};
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest";
const CONFIG: &str = "config";
const BUFFER_TAG: &str = "buffer";

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &Susinet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = String::new();
    for (k, v) in model.config().to_pairs() {
        config.push_str(&format!("{k}={v}\n"));
    }
    write(&dir.join(CONFIG), &config)?;

    let mut manifest = String::new();
    for p in model.params().iter() {
        manifest.push_str(&format!("{}={} {}\n", p.name, shape_string(p.value.shape()), p.partition.tag()));
        p.value.save(&dir.join(format!("{}.stsr", p.name)))?;
    }
    for (name, stats) in model.params().bn_stats() {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = Tensor::new(vec![values.len()], values.clone())?;
            let full = format!("{name}.{suffix}");
            manifest.push_str(&format!("{full}={} {BUFFER_TAG}\n", values.len()));
            t.save(&dir.join(format!("{full}.stsr")))?;
        }
    }
    write(&dir.join(MANIFEST), &manifest)
}

/// Reads a network config file of `key=value` lines.
pub fn load_network_config(path: &Path) -> Result<NetworkConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = NetworkConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, Some(i + 1), "expected key=value"))?;
        match cfg.set(k.trim(), v.trim()) {
            Ok(true) => {}
            Ok(false) => return Err(Error::parse(path, Some(i + 1), format!("unknown key '{}'", k.trim()))),
            Err(e) => return Err(Error::parse(path, Some(i + 1), e.to_string())),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_model(dir: &Path) -> Result<Susinet> {
    let config = load_network_config(&dir.join(CONFIG))?;
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut params = Vec::new();
    let mut buffers: Vec<(String, Tensor)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::parse(&manifest_path, Some(i + 1), msg.to_string());
        let (name, rest) = line.split_once('=').ok_or_else(|| bad("expected name=shape tag"))?;
        let (shape, tag) = rest.split_once(' ').ok_or_else(|| bad("missing partition tag"))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let value = Tensor::load(&dir.join(format!("{name}.stsr")))?;
        if value.shape() != shape.as_slice() {
            return Err(bad(&format!("{name}: blob shape {:?} differs from manifest {:?}", value.shape(), shape)));
        }
        if tag == BUFFER_TAG {
            buffers.push((name.to_string(), value));
        } else {
            let partition = Partition::from_tag(tag).ok_or_else(|| bad(&format!("unknown tag '{tag}'")))?;
            params.push(Parameter {
                name: name.to_string(),
                value,
                partition,
                requires_grad: true,
            });
        }
    }
    if buffers.len() % 2 != 0 {
        return Err(Error::parse(&manifest_path, None, "unpaired running statistics"));
    }
    let mut stats = Vec::new();
    for pair in buffers.chunks(2) {
        let layer = pair[0]
            .0
            .strip_suffix(".running_mean")
            .filter(|l| pair[1].0.strip_suffix(".running_var") == Some(*l))
            .ok_or_else(|| Error::parse(&manifest_path, None, format!("unpaired running statistics at {}", pair[0].0)))?;
        stats.push((
            layer.to_string(),
            RunningStats {
                mean: pair[0].1.data().to_vec(),
                var: pair[1].1.data().to_vec(),
            },
        ));
    }
    Susinet::with_params(config, ModelParams::from_parts(params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskSet;

    fn small() -> NetworkConfig {
        NetworkConfig {
            frames: 2,
            height: 32,
            width: 32,
            widths: [2, 2, 3, 3],
            head_width: 3,
            classes: 4,
            sal_channels: 2,
            fuse_channels: 2,
            heads: TaskSet::all(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Susinet::new(small(), 11).unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded.config(), model.config());
    }

    #[test]
    fn truncated_blob_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let model = Susinet::new(small(), 11).unwrap();
        save_model(&model, dir.path()).unwrap();
        let victim = dir.path().join("am2.feat.weight.stsr");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("am2.feat.weight.stsr"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&Susinet::new(small(), 1).unwrap(), dir.path()).unwrap();
        let cfg = NetworkConfig { classes: 7, ..small() };
        let mut text = String::new();
        for (k, v) in cfg.to_pairs() {
            text.push_str(&format!("{k}={v}\n"));
        }
        fs::write(dir.path().join(CONFIG), text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Config(_))));
    }
}

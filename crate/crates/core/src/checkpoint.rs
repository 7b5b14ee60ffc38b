//! On-disk training checkpoints.
//!
//! A checkpoint is a directory holding `manifest.txt` (one `key = value` per
//! line) and one little-endian f64 array per tensor:
//!
//! ```text
//! layer{i}_W.f64, layer{i}_b.f64       parameters
//! layer{i}_W.m.f64, layer{i}_W.v.f64   optimizer first/second moments
//! ```
//!
//! Floats in the manifest use Rust's shortest round-trip formatting, so
//! loading reproduces every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::loss::{BaseMode, LossParams, RegularizerMode, WeightMode};
use crate::net::{Layer, NetConfig, NetState};
use crate::optim::OptimizerState;
use crate::trainer::TrainState;

pub const FORMAT: &str = "minent-checkpoint";
pub const VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.txt";

fn tensor_names(layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|i| [format!("layer{i}_W"), format!("layer{i}_b")])
        .collect()
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::CorruptCheckpoint(format!("missing tensor file {}", path.display()))
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CorruptCheckpoint(format!(
            "{} has {} bytes, not a whole number of f64 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn fmt_f64s(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn weight_mode_str(m: WeightMode) -> String {
    match m {
        WeightMode::Fixed(v) => format!("fixed:{v:?}"),
        WeightMode::Learnable => "learnable".into(),
    }
}

fn reg_mode_str(m: RegularizerMode) -> String {
    match m {
        RegularizerMode::Disabled => "disabled".into(),
        RegularizerMode::Fixed(v) => format!("fixed:{v:?}"),
        RegularizerMode::Learnable => "learnable".into(),
    }
}

fn base_mode_str(m: BaseMode) -> String {
    match m {
        BaseMode::Fixed(v) => format!("fixed:{v:?}"),
        BaseMode::Learnable => "learnable".into(),
    }
}

/// Write `state` into `dir`, creating it if needed.
pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let cfg = state.net.config();
    let names = tensor_names(state.net.layers().len());
    let tensors = state.net.tensors();

    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push_str(" = ");
        m.push_str(&v);
        m.push('\n');
    };
    kv("format", FORMAT.into());
    kv("version", VERSION.into());
    kv("input_dim", cfg.input_dim.to_string());
    kv(
        "hidden_dims",
        cfg.hidden_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("num_classes", cfg.num_classes.to_string());
    kv("dropout_rate", format!("{:?}", cfg.dropout_rate));
    kv("seed", cfg.seed.to_string());
    kv("epoch", state.epoch.to_string());
    kv("theta_beta1", format!("{:?}", state.loss.theta_beta1));
    kv("theta_beta2", format!("{:?}", state.loss.theta_beta2));
    kv("theta_base", format!("{:?}", state.loss.theta_base));
    kv("beta1_mode", weight_mode_str(state.loss.beta1_mode));
    kv("beta2_mode", reg_mode_str(state.loss.beta2_mode));
    kv("base_mode", base_mode_str(state.loss.base_mode));
    kv("model_step", state.model_opt.step.to_string());
    kv("head_step", state.head_opt.step.to_string());
    kv("head_m", fmt_f64s(&state.head_opt.first.concat()));
    kv("head_v", fmt_f64s(&state.head_opt.second.concat()));
    kv("tensor_count", tensors.len().to_string());
    kv("tensors", names.join(","));
    fs::write(dir.join(MANIFEST), m)
        .map_err(|e| Error::io(format!("writing manifest in {}", dir.display()), e))?;

    for (i, (name, values)) in names.iter().zip(&tensors).enumerate() {
        write_f64_file(&dir.join(format!("{name}.f64")), values)?;
        write_f64_file(
            &dir.join(format!("{name}.m.f64")),
            &state.model_opt.first[i],
        )?;
        write_f64_file(
            &dir.join(format!("{name}.v.f64")),
            &state.model_opt.second[i],
        )?;
    }
    Ok(())
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::CorruptCheckpoint(format!("manifest line {} has no '='", n + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest(map))
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("manifest lacks {key:?}")))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::CorruptCheckpoint(format!("bad value {raw:?} for {key:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::CorruptCheckpoint(format!("bad list item {s:?} in {key:?}"))
                })
            })
            .collect()
    }

    fn mode<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        let raw = self.get(key)?;
        parse(raw).ok_or_else(|| Error::CorruptCheckpoint(format!("bad mode {raw:?} for {key:?}")))
    }
}

fn fixed_value(s: &str) -> Option<f64> {
    s.strip_prefix("fixed:").and_then(|v| v.parse().ok())
}

/// Load a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<TrainState> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.clone())
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    let m = Manifest::parse(&text)?;
    if m.get("format")? != FORMAT {
        return Err(Error::CorruptCheckpoint(format!(
            "not a checkpoint manifest (format {:?})",
            m.get("format")?
        )));
    }
    let version = m.get("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version.into(),
            expected: VERSION.into(),
        });
    }
    let config = NetConfig {
        input_dim: m.parse_value("input_dim")?,
        hidden_dims: m.list("hidden_dims")?,
        num_classes: m.parse_value("num_classes")?,
        dropout_rate: m.parse_value("dropout_rate")?,
        seed: m.parse_value("seed")?,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("network config: {e}")))?;
    let shapes = config.layer_shapes();
    let names = tensor_names(shapes.len());
    let count: usize = m.parse_value("tensor_count")?;
    let listed: Vec<String> = m.list("tensors")?;
    if count != names.len() || listed != names {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest lists {count} tensors, network needs {}",
            names.len()
        )));
    }

    let read_sized = |name: &str, expected: usize| -> Result<Vec<f64>> {
        let v = read_f64_file(&dir.join(name))?;
        if v.len() != expected {
            return Err(Error::CheckpointShape(format!(
                "{name} has {} values, expected {expected}",
                v.len()
            )));
        }
        Ok(v)
    };

    let mut layers = Vec::with_capacity(shapes.len());
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for (i, (out, fan_in)) in shapes.iter().copied().enumerate() {
        let w_name = &names[2 * i];
        let b_name = &names[2 * i + 1];
        let w = read_sized(&format!("{w_name}.f64"), out * fan_in)?;
        let b = read_sized(&format!("{b_name}.f64"), out)?;
        first.push(read_sized(&format!("{w_name}.m.f64"), out * fan_in)?);
        second.push(read_sized(&format!("{w_name}.v.f64"), out * fan_in)?);
        first.push(read_sized(&format!("{b_name}.m.f64"), out)?);
        second.push(read_sized(&format!("{b_name}.v.f64"), out)?);
        layers.push(Layer {
            weight: Array2::from_shape_vec((out, fan_in), w)
                .map_err(|e| Error::CheckpointShape(e.to_string()))?,
            bias: Array1::from(b),
        });
    }
    let net = NetState::from_layers(config, layers)?;

    let loss = LossParams {
        theta_beta1: m.parse_value("theta_beta1")?,
        theta_beta2: m.parse_value("theta_beta2")?,
        theta_base: m.parse_value("theta_base")?,
        beta1_mode: m.mode("beta1_mode", |s| match s {
            "learnable" => Some(WeightMode::Learnable),
            s => fixed_value(s).map(WeightMode::Fixed),
        })?,
        beta2_mode: m.mode("beta2_mode", |s| match s {
            "learnable" => Some(RegularizerMode::Learnable),
            "disabled" => Some(RegularizerMode::Disabled),
            s => fixed_value(s).map(RegularizerMode::Fixed),
        })?,
        base_mode: m.mode("base_mode", |s| match s {
            "learnable" => Some(BaseMode::Learnable),
            s => fixed_value(s).map(BaseMode::Fixed),
        })?,
    };

    let head_m: Vec<f64> = m.list("head_m")?;
    let head_v: Vec<f64> = m.list("head_v")?;
    if head_m.len() != 3 || head_v.len() != 3 {
        return Err(Error::CheckpointShape(
            "loss-head moments must have 3 entries".into(),
        ));
    }
    let head_opt = OptimizerState {
        step: m.parse_value("head_step")?,
        first: head_m.iter().map(|v| vec![*v]).collect(),
        second: head_v.iter().map(|v| vec![*v]).collect(),
    };
    let model_opt = OptimizerState {
        step: m.parse_value("model_step")?,
        first,
        second,
    };
    Ok(TrainState {
        net,
        loss,
        model_opt,
        head_opt,
        epoch: m.parse_value("epoch")?,
    })
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::data::json_hash;
use crate::encoders::{sharing_groups, ModelParams};
use crate::error::{bail, Result};
use crate::numerics::{read_tns, write_tns, Tensor};

const FORMAT: &str = "infomask-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingGroup {
    pub group: String,
    pub roles: Vec<String>,
}

/// First line of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed training steps.
    pub step: u64,
    /// Completed optimizer updates.
    pub adam_step: u64,
    pub sharing_groups: Vec<SharingGroup>,
    pub tensors: Vec<String>,
}

/// Trainer state restored from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ModelParams,
    pub opt: AdamState,
}

fn current_groups() -> Vec<SharingGroup> {
    sharing_groups()
        .into_iter()
        .map(|(g, roles)| SharingGroup { group: g.into(), roles: roles.into_iter().map(String::from).collect() })
        .collect()
}

/// Writes a manifest line followed by every parameter and both Adam moments
/// as named tensor records, in store order.
pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    step: u64,
    params: &ModelParams,
    opt: &AdamState,
) -> Result<()> {
    let names: Vec<String> = params.store.entries().iter().map(|e| e.name.clone()).collect();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        config_hash: json_hash(config)?,
        step,
        adam_step: opt.step,
        sharing_groups: current_groups(),
        tensors: names.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (e, name) in params.store.entries().iter().zip(&names) {
        write_tns(&mut w, Some(name), &e.tensor)?;
    }
    for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
        for (t, name) in moments.iter().zip(&names) {
            write_tns(&mut w, Some(&format!("{prefix}{name}")), t)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint. With `expected` set, the stored config must equal
/// it. Nothing is returned unless every record checks out.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: CheckpointManifest = serde_json::from_str(line.trim_end())
        .map_err(|e| crate::Error::Checkpoint(format!("bad manifest in {}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        bail!(Checkpoint, "unsupported checkpoint {} v{}", manifest.format, manifest.version);
    }
    if let Some(want) = expected {
        if *want != manifest.config {
            bail!(Checkpoint, "checkpoint config (hash {}) differs from the requested config", manifest.config_hash);
        }
    }
    if json_hash(&manifest.config)? != manifest.config_hash {
        bail!(Checkpoint, "config hash does not match the stored config");
    }
    if manifest.sharing_groups != current_groups() {
        bail!(Checkpoint, "sharing groups differ from this build: {:?}", manifest.sharing_groups);
    }
    manifest.config.validate()?;
    let mut params = ModelParams::init(&manifest.config.encoder, manifest.config.seed)?;
    let names: Vec<String> = params.store.entries().iter().map(|e| e.name.clone()).collect();
    if names != manifest.tensors {
        bail!(Checkpoint, "tensor list differs from the model layout");
    }

    let mut next = |expect: &str, like: &Tensor| -> Result<Tensor> {
        let Some((name, t)) = read_tns(&mut r)? else {
            bail!(Checkpoint, "file ends before tensor {expect}");
        };
        if name.as_deref() != Some(expect) {
            bail!(Checkpoint, "expected tensor {expect}, found {name:?}");
        }
        if t.shape() != like.shape() {
            bail!(Checkpoint, "tensor {expect} has shape {:?}, model wants {:?}", t.shape(), like.shape());
        }
        Ok(t)
    };
    let shapes: Vec<Tensor> = params.store.entries().iter().map(|e| e.tensor.clone()).collect();
    let mut values = Vec::with_capacity(names.len());
    for (n, like) in names.iter().zip(&shapes) {
        values.push(next(n, like)?);
    }
    let mut m = Vec::with_capacity(names.len());
    for (n, like) in names.iter().zip(&shapes) {
        m.push(next(&format!("adam.m.{n}"), like)?);
    }
    let mut v = Vec::with_capacity(names.len());
    for (n, like) in names.iter().zip(&shapes) {
        v.push(next(&format!("adam.v.{n}"), like)?);
    }
    if read_tns(&mut r)?.is_some() {
        bail!(Checkpoint, "trailing records after the last moment tensor");
    }
    let ids: Vec<_> = params.store.ids().collect();
    for (id, t) in ids.into_iter().zip(values) {
        params.store.set(id, t)?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
        opt: AdamState { step: manifest.adam_step, m, v },
    })
}

//! Checkpoints: the complete trainer state in one tensor container,
//! restoring to bit-identical training behaviour.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ParameterStore};
use crate::records::{read_container_file, write_container_file};
use crate::train::engine::{TrainConfig, Trainer};
use crate::train::optimizer::AdamW;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OBIF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn header_for(trainer: &Trainer) -> String {
    let mut head = String::from("kind = checkpoint\n");
    head.push_str(&format!("epochs_done = {}\n", trainer.epochs_done));
    head.push_str(&format!("global_step = {}\n", trainer.global_step));
    head.push_str(&format!("adam_steps = {}\n", trainer.optimizer.steps));
    for line in trainer.model_config.to_kv().lines() {
        head.push_str(&format!("model.{line}\n"));
    }
    for line in trainer.train_config.to_kv().lines() {
        head.push_str(&format!("train.{line}\n"));
    }
    for (i, v) in trainer.val_records.iter().enumerate() {
        head.push_str(&format!("val.{i} = {} {} {}\n", v.epoch, v.psnr_db, v.ssim));
    }
    head
}

fn parse_val_records(path: &Path, header: &str) -> Result<Vec<crate::train::ValRecord>> {
    let mut out = Vec::new();
    for line in header.lines() {
        let Some(rest) = line.strip_prefix("val.") else {
            continue;
        };
        let Some((_, value)) = rest.split_once('=') else {
            return Err(Error::format(path, format!("malformed validation line {line:?}")));
        };
        let fields: Vec<&str> = value.split_whitespace().collect();
        let bad = || Error::format(path, format!("malformed validation line {line:?}"));
        let [epoch, psnr, ssim] = fields.as_slice() else {
            return Err(bad());
        };
        out.push(crate::train::ValRecord {
            epoch: epoch.parse().map_err(|_| bad())?,
            psnr_db: psnr.parse().map_err(|_| bad())?,
            ssim: ssim.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Serialise the full trainer: parameters, running buffers, optimizer
/// moments, and progress counters.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut tensors: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for (name, arr) in trainer.store.iter_params() {
        tensors.push((format!("param/{name}"), arr));
    }
    for (name, arr) in trainer.store.iter_buffers() {
        tensors.push((format!("buffer/{name}"), arr));
    }
    for (name, m, v) in trainer.optimizer.moments() {
        tensors.push((format!("adam/m/{name}"), m));
        tensors.push((format!("adam/v/{name}"), v));
    }
    write_container_file(
        path,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &header_for(trainer),
        tensors.iter().map(|(n, a)| (n.as_str(), *a)),
    )
}

fn header_field(header: &str, key: &str) -> Result<String> {
    for line in header.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return Ok(v.trim().to_string());
            }
        }
    }
    Err(Error::Config(format!("checkpoint header lacks {key}")))
}

fn header_section(header: &str, prefix: &str) -> String {
    let mut out = String::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix(prefix) {
            out.push_str(rest);
            out.push('\n');
        }
    }
    out
}

/// Restore a trainer saved by [`save_checkpoint`]. The tensor set is
/// validated against a fresh build of the stored architecture, so
/// renamed, missing, or misshapen tensors are rejected with the path
/// named.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let container = read_container_file(path, CHECKPOINT_MAGIC)?;
    if container.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported checkpoint version {} (this build reads {})",
                container.version, CHECKPOINT_VERSION
            ),
        ));
    }
    let header = &container.header;
    if header_field(header, "kind")? != "checkpoint" {
        return Err(Error::format(path, "container is not a checkpoint"));
    }
    let model_config = ModelConfig::from_kv(&header_section(header, "model."))?;
    let train_config = TrainConfig::from_kv(&header_section(header, "train."))?;
    let epochs_done: usize = header_field(header, "epochs_done")?
        .parse()
        .map_err(|_| Error::format(path, "epochs_done is not an integer"))?;
    let global_step: u64 = header_field(header, "global_step")?
        .parse()
        .map_err(|_| Error::format(path, "global_step is not an integer"))?;
    let adam_steps: u64 = header_field(header, "adam_steps")?
        .parse()
        .map_err(|_| Error::format(path, "adam_steps is not an integer"))?;

    // A reference build supplies the authoritative tensor inventory.
    let reference = build_model(&model_config, 0)?;
    let mut store = ParameterStore::new();
    let mut adam_m: IndexMap<String, ArrayD<f32>> = IndexMap::new();
    let mut adam_v: IndexMap<String, ArrayD<f32>> = IndexMap::new();
    for (name, tensor) in container.tensors {
        if let Some(param) = name.strip_prefix("param/") {
            store.insert_param(param, tensor)?;
        } else if let Some(buffer) = name.strip_prefix("buffer/") {
            store.insert_buffer(buffer, tensor)?;
        } else if let Some(m) = name.strip_prefix("adam/m/") {
            adam_m.insert(m.to_string(), tensor);
        } else if let Some(v) = name.strip_prefix("adam/v/") {
            adam_v.insert(v.to_string(), tensor);
        } else {
            return Err(Error::format(path, format!("unexpected tensor {name}")));
        }
    }
    for (name, arr) in reference.iter_params() {
        let got = store
            .param(name)
            .map_err(|_| Error::format(path, format!("checkpoint lacks parameter {name}")))?;
        if got.shape() != arr.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    arr.shape()
                ),
            ));
        }
    }
    for (name, arr) in reference.iter_buffers() {
        let got = store
            .buffer(name)
            .map_err(|_| Error::format(path, format!("checkpoint lacks buffer {name}")))?;
        if got.shape() != arr.shape() {
            return Err(Error::format(
                path,
                format!(
                    "buffer {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    arr.shape()
                ),
            ));
        }
    }
    if store.num_params() != reference.num_params()
        || store.num_buffers() != reference.num_buffers()
    {
        return Err(Error::format(
            path,
            "checkpoint carries tensors unknown to this architecture",
        ));
    }
    for name in adam_m.keys() {
        if !store.has_param(name) {
            return Err(Error::format(
                path,
                format!("optimizer moment for unknown parameter {name}"),
            ));
        }
    }
    store.check_finite()?;

    let mut optimizer = AdamW::new(train_config.weight_decay);
    optimizer.restore_moments(adam_m, adam_v, adam_steps)?;
    let val_records = parse_val_records(path, header)?;
    Ok(Trainer {
        model_config,
        train_config,
        store,
        optimizer,
        epochs_done,
        global_step,
        val_records,
    })
}

impl Trainer {
    /// See [`save_checkpoint`].
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    /// See [`load_checkpoint`].
    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

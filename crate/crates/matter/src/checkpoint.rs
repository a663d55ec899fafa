//! Checkpoint container: magic `MTCK`, a version word, a UTF-8 header
//! carrying the config hash, iteration, seed, and the full config text, then
//! named little-endian f32 tensor records for the backbone, the cluster
//! bank, and the optimizer velocities. Save, load, save again is
//! byte-identical.

use std::io::Write;
use std::path::Path;

use crate::backbone::init_backbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::num::{SgdState, Tensor};
use crate::resenc::init_bank;
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug)]
pub struct CheckpointData {
    pub config: RunConfig,
    pub config_hash: u64,
    pub state: TrainState,
}

fn push_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a training state. The embedded config must be the one the
/// state was built from; its hash is what later loads verify against.
pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let header = format!(
        "config_hash={:016x}\niteration={}\nseed={}\n\n{}",
        cfg.config_hash(),
        state.iteration,
        cfg.train.seed,
        cfg.serialize()
    );

    let mut records: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (name, t) in state.model.params.named() {
        records.push((name, t));
    }
    for (name, t) in state.model.bank.named() {
        records.push((name.to_string(), t));
    }
    for (i, t) in state.opt.velocity().iter().enumerate() {
        records.push((format!("velocity.{i}"), t));
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in &records {
        push_record(&mut bytes, name, tensor);
    }

    let tmp = path.with_extension("mtck.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name_len = r.u32()? as usize;
    if name_len > MAX_NAME {
        return Err(Error::data(format!("checkpoint tensor name length {name_len} is implausible")));
    }
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::data(format!("checkpoint tensor {name}: bad rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elements = 1u64;
    for _ in 0..rank {
        let e = r.u64()?;
        elements = elements.saturating_mul(e.max(1));
        shape.push(e as usize);
    }
    if elements > MAX_ELEMENTS {
        return Err(Error::data(format!("checkpoint tensor {name}: implausible size {elements}")));
    }
    let count: usize = shape.iter().product();
    let raw = r.take(count * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint version {version} unsupported (this build reads {VERSION})"
        )));
    }
    let header_len = r.u64()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::data("checkpoint header is not UTF-8"))?;

    let (meta, config_text) = header
        .split_once("\n\n")
        .ok_or_else(|| Error::data("checkpoint header is missing the config section"))?;
    let mut stored_hash = None;
    let mut iteration = None;
    for line in meta.lines() {
        match line.split_once('=') {
            Some(("config_hash", v)) => {
                stored_hash = Some(u64::from_str_radix(v, 16).map_err(|_| {
                    Error::data(format!("checkpoint config_hash {v:?} is not hex"))
                })?)
            }
            Some(("iteration", v)) => {
                iteration = Some(v.parse::<u64>().map_err(|_| {
                    Error::data(format!("checkpoint iteration {v:?} is not a number"))
                })?)
            }
            Some(("seed", _)) => {}
            _ => return Err(Error::data(format!("unrecognized checkpoint header line {line:?}"))),
        }
    }
    let stored_hash =
        stored_hash.ok_or_else(|| Error::data("checkpoint header lacks config_hash"))?;
    let iteration = iteration.ok_or_else(|| Error::data("checkpoint header lacks iteration"))?;

    let config = RunConfig::parse_text(config_text)?;
    if config.config_hash() != stored_hash {
        return Err(Error::data(
            "checkpoint header hash does not match its own embedded config",
        ));
    }

    let record_count = r.u32()? as usize;
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        records.push(read_record(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!(
            "checkpoint has {} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }

    // Template structures provide the expected names and shapes; every
    // record must fill exactly one slot, in order.
    let mut params = init_backbone(&config.model.backbone, 0)?;
    let mut bank = init_bank(config.model.clusters, config.model.backbone.descriptor_dim, 0)?;
    let velocity_count = {
        let probe = Model::from_parts(config.model.clone(), params.clone(), bank.clone())?;
        let mut n = probe.params.named().len();
        if config.model.residual_encoder {
            n += probe.bank.named().len();
        }
        n
    };

    let mut expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    expected.extend(bank.named().iter().map(|(n, _)| n.to_string()));
    expected.extend((0..velocity_count).map(|i| format!("velocity.{i}")));
    if records.len() != expected.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} tensors, config implies {}",
            records.len(),
            expected.len()
        )));
    }

    fn place(slot: &mut Tensor<f32>, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if slot.shape() != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint tensor {name}: shape {:?} does not match config {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    let mut velocities = Vec::with_capacity(velocity_count);
    for ((name, tensor), want) in records.into_iter().zip(&expected) {
        if &name != want {
            return Err(Error::data(format!(
                "checkpoint tensor order mismatch: found {name:?}, expected {want:?}"
            )));
        }
        if !tensor.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("checkpoint tensor {name} has non-finite values")));
        }
        if name.starts_with("velocity.") {
            velocities.push(tensor);
        } else if name.starts_with("clusters.") {
            let mut it = bank.named_mut().into_iter();
            let (_, slot) = it
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::data(format!("checkpoint tensor {name:?} fits no slot")))?;
            place(slot, &name, tensor)?;
        } else {
            let mut it = params.named_mut().into_iter();
            let (_, slot) = it
                .find(|(n, _)| n == &name)
                .ok_or_else(|| Error::data(format!("checkpoint tensor {name:?} fits no slot")))?;
            place(slot, &name, tensor)?;
        }
    }

    let model = Model::from_parts(config.model.clone(), params, bank)?;
    let opt = SgdState::from_parts(
        config.train.learning_rate,
        config.train.momentum,
        config.train.weight_decay,
        velocities,
    )?;
    let state = TrainState::from_parts(model, opt, iteration);
    Ok(CheckpointData { config, config_hash: stored_hash, state })
}

/// Refuses a checkpoint whose canonical settings differ from the run's,
/// unless the caller explicitly allows the mismatch.
pub fn check_config(data: &CheckpointData, cfg: &RunConfig, allow_mismatch: bool) -> Result<()> {
    if data.config_hash == cfg.config_hash() || allow_mismatch {
        return Ok(());
    }
    Err(Error::data(format!(
        "checkpoint was trained under config hash {:016x}, this run has {:016x}; \
         pass --allow-config-mismatch to proceed",
        data.config_hash,
        cfg.config_hash()
    )))
}

/// Human-readable summary for the inspect command.
pub fn describe(data: &CheckpointData) -> String {
    let state = &data.state;
    let mut out = String::new();
    out.push_str(&format!("config_hash\t{:016x}\n", data.config_hash));
    out.push_str(&format!("iteration\t{}\n", state.iteration));
    out.push_str(&format!("seed\t{}\n", data.config.train.seed));
    let mut total = 0usize;
    for (name, t) in state.model.params.named() {
        total += t.len();
        out.push_str(&format!("tensor\t{name}\t{:?}\n", t.shape()));
    }
    for (name, t) in state.model.bank.named() {
        total += t.len();
        out.push_str(&format!("tensor\t{name}\t{:?}\n", t.shape()));
    }
    out.push_str(&format!("parameters\t{total}\n"));
    out.push_str(&format!("velocity_slots\t{}\n", state.opt.velocity().len()));
    out
}

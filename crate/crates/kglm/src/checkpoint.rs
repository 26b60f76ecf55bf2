//! Self-describing binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!   magic "KGLMCKPT" | format version u32 | config text (u64 len + bytes) |
//!   global step u64 | param count u64 | per param: name, group u8, t u64,
//!   shape (u64 rank + dims), then value/m/v as f64 runs | memory flag u8 |
//!   matrix shape + data, updates u64, steps_since u64.
//!
//! Save then load restores every bit: f64 values round-trip through
//! to_le_bytes exactly. Loading refuses other format versions.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{ParamGroup, ParamStore};
use crate::pretrain::Trainer;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KGLMCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Deserialized checkpoint, not yet bound to a model. `restore` checks it
/// against an initialized trainer of the same architecture.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: Vec<ParamRecord>,
    pub memory: MemoryRecord,
}

#[derive(Clone, Debug)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub t: u64,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct MemoryRecord {
    pub matrix: Tensor,
    pub updates: u64,
    pub steps_since: u64,
}

pub fn save(path: &Path, trainer: &Trainer, step: u64) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    write_bytes(&mut w, trainer.cfg.to_text().as_bytes()).map_err(io)?;
    w.write_all(&step.to_le_bytes()).map_err(io)?;
    w.write_all(&(trainer.store.len() as u64).to_le_bytes()).map_err(io)?;
    for p in trainer.store.iter() {
        write_bytes(&mut w, p.name.as_bytes()).map_err(io)?;
        w.write_all(&[group_code(p.group)]).map_err(io)?;
        w.write_all(&p.t.to_le_bytes()).map_err(io)?;
        write_tensor(&mut w, &p.value).map_err(io)?;
        write_tensor(&mut w, &p.m).map_err(io)?;
        write_tensor(&mut w, &p.v).map_err(io)?;
    }
    write_tensor(&mut w, &trainer.memory.matrix).map_err(io)?;
    w.write_all(&trainer.memory.updates.to_le_bytes()).map_err(io)?;
    w.write_all(&trainer.memory.steps_since.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let config_text = String::from_utf8(read_bytes(&mut r, path)?)
        .map_err(|e| Error::Checkpoint(format!("config text not utf-8: {e}")))?;
    let step = read_u64(&mut r, path)?;
    let count = read_u64(&mut r, path)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r, path)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name not utf-8: {e}")))?;
        let mut code = [0u8; 1];
        read_exact(&mut r, &mut code, path)?;
        let group = group_from_code(code[0])?;
        let t = read_u64(&mut r, path)?;
        let value = read_tensor(&mut r, path)?;
        let m = read_tensor(&mut r, path)?;
        let v = read_tensor(&mut r, path)?;
        params.push(ParamRecord { name, group, t, value, m, v });
    }
    let matrix = read_tensor(&mut r, path)?;
    let updates = read_u64(&mut r, path)?;
    let steps_since = read_u64(&mut r, path)?;
    Ok(Checkpoint { config_text, step, params, memory: MemoryRecord { matrix, updates, steps_since } })
}

/// Overwrites a trainer's parameters, optimizer slots, and memory from a
/// checkpoint. The trainer must already have the architecture the
/// checkpoint was saved from: names, groups, and shapes must all match.
pub fn restore(trainer: &mut Trainer, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != trainer.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            trainer.store.len()
        )));
    }
    for rec in &ckpt.params {
        apply_param(&mut trainer.store, rec)?;
    }
    if ckpt.memory.matrix.shape() != trainer.memory.matrix.shape() {
        return Err(Error::Checkpoint(format!(
            "memory shape {:?} in checkpoint, {:?} in model",
            ckpt.memory.matrix.shape(),
            trainer.memory.matrix.shape()
        )));
    }
    trainer.memory.matrix = ckpt.memory.matrix.clone();
    trainer.memory.updates = ckpt.memory.updates;
    trainer.memory.steps_since = ckpt.memory.steps_since;
    Ok(())
}

/// Applies only the parameters, leaving memory alone. Adaptation restores
/// pre-trained weights into models built over a different graph, whose
/// memory is rebuilt rather than carried over; entity counts may differ,
/// parameter names, groups, and shapes must not.
pub fn restore_params(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for rec in &ckpt.params {
        apply_param(store, rec)?;
    }
    Ok(())
}

fn apply_param(store: &mut ParamStore, rec: &ParamRecord) -> Result<()> {
    let p = store.get_mut(&rec.name).map_err(|_| {
        Error::Checkpoint(format!("checkpoint parameter {} unknown to this model", rec.name))
    })?;
    if p.group != rec.group {
        return Err(Error::Checkpoint(format!("{}: parameter group mismatch", rec.name)));
    }
    if p.value.shape() != rec.value.shape() {
        return Err(Error::Checkpoint(format!(
            "{}: shape {:?} in checkpoint, {:?} in model",
            rec.name,
            rec.value.shape(),
            p.value.shape()
        )));
    }
    p.value = rec.value.clone();
    p.m = rec.m.clone();
    p.v = rec.v.clone();
    p.t = rec.t;
    Ok(())
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Language => 0,
        ParamGroup::Knowledge => 1,
    }
}

fn group_from_code(c: u8) -> Result<ParamGroup> {
    match c {
        0 => Ok(ParamGroup::Language),
        1 => Ok(ParamGroup::Knowledge),
        other => Err(Error::Checkpoint(format!("unknown parameter group code {other}"))),
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("{}: truncated ({e})", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_FIELD: u64 = 1 << 33;

fn read_bytes(r: &mut impl Read, path: &Path) -> Result<Vec<u8>> {
    let len = read_u64(r, path)?;
    if len > MAX_FIELD {
        return Err(Error::Checkpoint(format!("{}: corrupt length {len}", path.display())));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, path)?;
    Ok(buf)
}

fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let rank = read_u64(r, path)?;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("{}: corrupt tensor rank {rank}", path.display())));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel = 1u64;
    for _ in 0..rank {
        let d = read_u64(r, path)?;
        numel = numel.saturating_mul(d.max(1));
        shape.push(d as usize);
    }
    if numel > MAX_FIELD {
        return Err(Error::Checkpoint(format!("{}: corrupt tensor size", path.display())));
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        read_exact(r, &mut b, path)?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

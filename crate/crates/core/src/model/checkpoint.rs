//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HETCANCK"
//! version  u32      currently 1
//! header   u32 length + UTF-8 `key = value` text: the model config, then
//!          `graph.feature_dims`, `graph.num_edge_types`, `graph.classes`,
//!          `epoch`, and the optimizer settings/step count when present
//! count    u32      number of tensor records
//! record   u32 name length, name bytes, u64 rows, u64 cols, u8 flags
//!          (bit 0: frozen), rows·cols f64 values in row-major order
//! ```
//!
//! Model parameters come first in registration order. Optimizer moments, if
//! saved, follow as `adam.m/<name>` and `adam.v/<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::train::{Adam, AdamSettings};
use super::{CascadeConfig, GraphShape, HetCan};
use crate::error::{Error, Result};
use crate::kv;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HETCANCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HetCan,
    pub adam: Option<Adam>,
    pub epoch: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor, frozen: bool) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    w.write_all(&[frozen as u8])?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &HetCan,
    adam: Option<&Adam>,
    epoch: usize,
) -> Result<()> {
    let mut header = model.config.to_kv();
    header.push_str(&format!(
        "graph.feature_dims = {}\n",
        kv::join(&model.shape.feature_dims)
    ));
    header.push_str(&format!(
        "graph.num_edge_types = {}\n",
        model.shape.num_edge_types
    ));
    header.push_str(&format!("graph.classes = {}\n", model.shape.classes));
    header.push_str(&format!("epoch = {epoch}\n"));
    if let Some(a) = adam {
        let s = a.settings;
        header.push_str(&format!(
            "adam.lr = {}\nadam.beta1 = {}\nadam.beta2 = {}\nadam.eps = {}\nadam.weight_decay = {}\nadam.steps = {}\n",
            s.lr, s.beta1, s.beta2, s.eps, s.weight_decay, a.steps
        ));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, header.len() as u32)?;
    w.write_all(header.as_bytes())?;
    let n = model.params.len();
    let count = if adam.is_some() { 3 * n } else { n };
    put_u32(w, count as u32)?;
    for (id, name, t) in model.params.iter() {
        put_tensor(w, name, t, model.params.is_frozen(id))?;
    }
    if let Some(a) = adam {
        for (prefix, moments) in [("adam.m/", &a.m), ("adam.v/", &a.v)] {
            for ((_, name, t), m) in model.params.iter().zip(moments) {
                let tensor = Tensor::new(t.rows(), t.cols(), m.clone())?;
                put_tensor(w, &format!("{prefix}{name}"), &tensor, false)?;
            }
        }
    }
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(take::<R, 4>(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<R, 8>(r)?))
}

fn get_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > limit {
        return Err(bad(format!("string of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    String::from_utf8(buf).map_err(|_| bad("non-UTF-8 text"))
}

struct Record {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
    data: Vec<f64>,
}

fn get_record<R: Read>(r: &mut R) -> Result<Record> {
    let name = get_string(r, 1 << 16)?;
    let rows = get_u64(r)? as usize;
    let cols = get_u64(r)? as usize;
    let flags = take::<R, 1>(r)?[0];
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 32)
        .ok_or_else(|| bad(format!("tensor {name}: bad shape")))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f64::from_le_bytes(take::<R, 8>(r)?));
    }
    Ok(Record {
        name,
        rows,
        cols,
        frozen: flags & 1 == 1,
        data,
    })
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    if &take::<R, 8>(r)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header = get_string(r, 1 << 20)?;
    let mut config = CascadeConfig::default();
    let mut dims = None;
    let mut edge_types = None;
    let mut classes = None;
    let mut epoch = 0;
    let mut adam_settings = AdamSettings::default();
    let mut adam_steps = None;
    for e in kv::parse(&header)? {
        match e.key.as_str() {
            "graph.feature_dims" => dims = Some(kv::list::<usize>(&e)?),
            "graph.num_edge_types" => edge_types = Some(kv::value(&e)?),
            "graph.classes" => classes = Some(kv::value(&e)?),
            "epoch" => epoch = kv::value(&e)?,
            "adam.lr" => adam_settings.lr = kv::value(&e)?,
            "adam.beta1" => adam_settings.beta1 = kv::value(&e)?,
            "adam.beta2" => adam_settings.beta2 = kv::value(&e)?,
            "adam.eps" => adam_settings.eps = kv::value(&e)?,
            "adam.weight_decay" => adam_settings.weight_decay = kv::value(&e)?,
            "adam.steps" => adam_steps = Some(kv::value(&e)?),
            _ => {
                if !config.apply(&e)? {
                    return Err(bad(format!("unknown header key `{}`", e.key)));
                }
            }
        }
    }
    let shape = GraphShape {
        feature_dims: dims.ok_or_else(|| bad("header lacks graph.feature_dims"))?,
        num_edge_types: edge_types.ok_or_else(|| bad("header lacks graph.num_edge_types"))?,
        classes: classes.ok_or_else(|| bad("header lacks graph.classes"))?,
    };
    let mut model = HetCan::new(config, shape)?;
    let n = model.params.len();
    let count = get_u32(r)? as usize;
    let expected = if adam_steps.is_some() { 3 * n } else { n };
    if count != expected {
        return Err(bad(format!("{count} tensors, expected {expected}")));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let rec = get_record(r)?;
        let want = model.params.name(id).to_string();
        let t = model.params.get(id);
        if rec.name != want || (rec.rows, rec.cols) != t.shape() {
            return Err(bad(format!(
                "tensor `{}` {}x{} where `{want}` {}x{} was expected",
                rec.name,
                rec.rows,
                rec.cols,
                t.rows(),
                t.cols()
            )));
        }
        if rec.data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor `{want}` holds non-finite values")));
        }
        model
            .params
            .get_mut(id)
            .data_mut()
            .copy_from_slice(&rec.data);
        if rec.frozen {
            model.params.freeze(id);
        }
    }
    let adam = match adam_steps {
        None => None,
        Some(steps) => {
            let mut adam = Adam::new(adam_settings, &model.params);
            adam.steps = steps;
            for (prefix, which) in [("adam.m/", 0), ("adam.v/", 1)] {
                for &id in &ids {
                    let rec = get_record(r)?;
                    let want = format!("{prefix}{}", model.params.name(id));
                    if rec.name != want || rec.data.len() != model.params.get(id).len() {
                        return Err(bad(format!(
                            "optimizer record `{}` where `{want}` was expected",
                            rec.name
                        )));
                    }
                    let slot = if which == 0 { &mut adam.m } else { &mut adam.v };
                    slot[id.index()] = rec.data;
                }
            }
            Some(adam)
        }
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(Checkpoint { model, adam, epoch })
}

pub fn save_checkpoint(
    path: &Path,
    model: &HetCan,
    adam: Option<&Adam>,
    epoch: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, adam, epoch)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

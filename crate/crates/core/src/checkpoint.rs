//! Binary parameter checkpoints with a plain-text `key = value` sidecar.
//!
//! Layout: magic, parameter count, then per tensor its name, rank, shape
//! and little-endian f32 data. The sidecar lives at `<path>.meta`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ParamSet;

const MAGIC: &[u8; 8] = b"V2SCKPT1";

pub type Meta = BTreeMap<String, String>;

/// Something that can be rebuilt from its configuration and refilled
/// from a checkpoint.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn build(cfg: &Self::Config) -> Result<Self>;
    fn checkpoint_config(&self) -> &Self::Config;
    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> &mut ParamSet;
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Current source revision, or `unknown` outside a git checkout.
pub fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Overwrites `params` in place; names and shapes must match exactly.
pub fn read_params_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let n = read_u32(&mut r)? as usize;
    if n != params.len() {
        return Err(bad(
            path,
            format!("{n} tensors stored, model has {}", params.len()),
        ));
    }
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let len = read_u32(&mut r).map_err(|_| bad(path, "truncated"))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad(path, "truncated"))?;
        let stored = String::from_utf8_lossy(&buf);
        if stored != name.as_str() {
            return Err(bad(path, format!("expected tensor {name}, found {stored}")));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|_| bad(path, "truncated"))?;
        if shape != t.shape() {
            return Err(bad(
                path,
                format!("{name}: stored shape {shape:?}, model {:?}", t.shape()),
            ));
        }
        let mut bytes = vec![0u8; t.len() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(path, "truncated"))?;
        for (dst, src) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
    }
    Ok(())
}

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::config(format!(
                "metadata entry {k:?} is not one line"
            )));
        }
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(meta_path(path), out)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Err(Error::MissingFile(mp));
    }
    let text = std::fs::read_to_string(&mp)?;
    let mut meta = Meta::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(&mp, format!("malformed line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

/// Writes parameters plus a sidecar holding kind, configuration, seed,
/// epoch, parameter count and source revision. `extra` entries are added
/// verbatim.
pub fn save<M: Checkpointable>(
    path: &Path,
    model: &M,
    seed: u64,
    epoch: usize,
    extra: &[(&str, String)],
) -> Result<()> {
    write_params(path, model.param_set())?;
    let mut meta = Meta::new();
    meta.insert("kind".into(), M::KIND.into());
    meta.insert(
        "config".into(),
        serde_json::to_string(model.checkpoint_config())?,
    );
    meta.insert("seed".into(), seed.to_string());
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("parameters".into(), model.param_set().count().to_string());
    meta.insert("git_revision".into(), git_revision());
    for (k, v) in extra {
        meta.insert((*k).to_string(), v.clone());
    }
    write_meta(path, &meta)
}

pub fn load<M: Checkpointable>(path: &Path) -> Result<M> {
    let meta = read_meta(path)?;
    match meta.get("kind") {
        Some(k) if k == M::KIND => {}
        other => {
            return Err(bad(
                path,
                format!("expected a {} checkpoint, found {other:?}", M::KIND),
            ))
        }
    }
    let cfg_json = meta
        .get("config")
        .ok_or_else(|| bad(path, "metadata lacks config"))?;
    let cfg: M::Config = serde_json::from_str(cfg_json)?;
    let mut model = M::build(&cfg)?;
    read_params_into(path, model.param_set_mut())?;
    Ok(model)
}

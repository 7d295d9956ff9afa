//! Single-file model archives: magic, format version, a JSON header
//! describing the model, then the parameter tensors.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use synthseg_nn::ParamStore;

use crate::error::IoContext;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SYNSEGCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    header: H,
}

/// Writes atomically through a temporary sibling file.
pub fn write_checkpoint<H: Serialize>(path: &Path, kind: &str, header: &H, params: &ParamStore<f32>) -> Result<()> {
    let json = serde_json::to_vec(&Envelope { kind: kind.to_string(), header })
        .map_err(|e| Error::Checkpoint(format!("header does not serialize: {e}")))?;
    let mut buf = Vec::with_capacity(json.len() + 16 + params.num_scalars() * 4);
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    params.write_to(&mut buf).expect("vec write");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&buf).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, ParamStore<f32>)> {
    let bytes = std::fs::read(path).at(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a model checkpoint".into()));
    }
    let mut r = &bytes[8..];
    let version = r.read_u32::<LittleEndian>().expect("length checked");
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().expect("length checked") as usize;
    if r.len() < len {
        return Err(bad("truncated header".into()));
    }
    let envelope: Envelope<H> =
        serde_json::from_slice(&r[..len]).map_err(|e| bad(format!("bad header: {e}")))?;
    if envelope.kind != kind {
        return Err(bad(format!("holds a {} model, expected {kind}", envelope.kind)));
    }
    let mut rest = &r[len..];
    let params = ParamStore::read_from(&mut rest).map_err(|e| bad(e.to_string()))?;
    let mut tail = Vec::new();
    rest.read_to_end(&mut tail).expect("slice read");
    if !tail.is_empty() {
        return Err(bad(format!("{} trailing bytes", tail.len())));
    }
    Ok((envelope.header, params))
}

/// Errors unless `loaded` has the names and shapes of `fresh`.
pub fn check_layout(loaded: &ParamStore<f32>, fresh: &ParamStore<f32>) -> Result<()> {
    if loaded.len() != fresh.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            loaded.len(),
            fresh.len()
        )));
    }
    for id in fresh.ids() {
        if loaded.name(id) != fresh.name(id) || loaded.get(id).shape() != fresh.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {} {:?}, expected {} {:?}",
                id.0,
                loaded.name(id),
                loaded.get(id).shape(),
                fresh.name(id),
                fresh.get(id).shape()
            )));
        }
    }
    Ok(())
}

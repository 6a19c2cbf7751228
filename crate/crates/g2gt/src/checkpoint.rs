//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset        | size  | content                                         |
//! |---------------|-------|-------------------------------------------------|
//! | 0             | 8     | magic `G2GTCKPT`                                |
//! | 8             | 4     | format version, `u32` (currently 1)             |
//! | 12            | 8     | header length `H` in bytes, `u64`               |
//! | 20            | H     | UTF-8 JSON header (see below)                   |
//! | 20 + H        | 8·N   | parameter data, `f64` values in header order    |
//! | end − 32      | 32    | SHA-256 of every preceding byte                 |
//!
//! The header is an object with keys `model` (the [`ModelSpec`]), `t_max`,
//! `vocab` (`{"forms": [...], "deprels": [...]}`) and `params`, a list of
//! `{"name", "shape"}` entries. Each parameter's values follow in row-major
//! order, `product(shape)` of them, in the order the list gives. Values are
//! stored as their exact IEEE-754 bit patterns, so a reloaded model computes
//! bit-identical outputs.

use std::fs;
use std::path::Path;

use g2gt_core::numerics::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelSpec;
use crate::error::{Error, Result};
use crate::parser::Parser;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"G2GTCKPT";
pub const VERSION: u32 = 1;

const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    t_max: usize,
    vocab: Vocab,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(parser: &Parser) -> Result<Vec<u8>> {
    let header = Header {
        model: parser.spec,
        t_max: parser.t_max,
        vocab: parser.vocab.clone(),
        params: parser
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * parser.params.numel() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in parser.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Parser> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < PREFIX + DIGEST {
        return Err(corrupt("file too short to be a checkpoint"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| PREFIX.checked_add(h))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&body[PREFIX..header_end])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut parser = Parser::new(header.model, header.vocab, 0)
        .map_err(|e| Error::Checkpoint(format!("model: {e}")))?;
    parser.t_max = header.t_max;
    if header.params.len() != parser.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            parser.params.len()
        )));
    }
    let mut data = &body[header_end..];
    for entry in &header.params {
        let id = parser
            .params
            .id(&entry.name)
            .map_err(|_| Error::Checkpoint(format!("unknown parameter {:?}", entry.name)))?;
        if parser.params.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                parser.params.value(id).shape()
            )));
        }
        let count: usize = entry.shape.iter().product();
        if data.len() < 8 * count {
            return Err(corrupt("parameter data shorter than the header declares"));
        }
        let (chunk, rest) = data.split_at(8 * count);
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        *parser.params.value_mut(id) = Tensor::new(entry.shape.clone(), values)?;
        data = rest;
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after parameter data"));
    }
    Ok(parser)
}

pub fn save(path: impl AsRef<Path>, parser: &Parser) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(parser)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Parser> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

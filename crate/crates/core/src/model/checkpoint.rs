//! Portable checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DU2C\0\0\0\x01" (last byte is the format version)
//! length     u64 LE   manifest length in bytes
//! manifest   UTF-8    line-oriented, see below
//! blob       f32 LE   tensors back to back, row-major
//! ```
//!
//! Manifest lines:
//!
//! ```text
//! format 1
//! hparam <name> <value>        (one per HyperParams field)
//! vocab <items|categories|cross|profiles> <rows>
//! tensor <name> <d0>x<d1> f32 <byte offset>
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{tensor_layout, HyperParams, ModelParams, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DU2C\0\0\0\x01";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    let mut manifest = format!("format {CHECKPOINT_VERSION}\n");
    for (name, v) in params.hparams.entries() {
        manifest.push_str(&format!("hparam {name} {v}\n"));
    }
    let v = &params.vocab;
    for (name, n) in [
        ("items", v.items),
        ("categories", v.categories),
        ("cross", v.cross),
        ("profiles", v.profiles),
    ] {
        manifest.push_str(&format!("vocab {name} {n}\n"));
    }
    let mut offset = 0usize;
    for (name, shape, data) in params.tensors() {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor {name} {} f32 {offset}\n", dims.join("x")));
        offset += data.len() * 4;
    }
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    for (_, _, data) in params.tensors() {
        for &x in data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

struct Manifest {
    hparams: HyperParams,
    vocab: Vocab,
    tensors: Vec<(String, Vec<usize>, usize)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let bad = |msg: String| Error::Manifest(msg);
    let mut hp: HashMap<&str, usize> = HashMap::new();
    let mut vocab: HashMap<&str, usize> = HashMap::new();
    let mut tensors = Vec::new();
    let mut version = None;
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
        match parts.as_slice() {
            ["format", v] => version = Some(v.parse::<u32>().map_err(|_| bad(format!("bad version {v:?}")))?),
            ["hparam", k, v] => {
                hp.insert(k, num(v)?);
            }
            ["vocab", k, v] => {
                vocab.insert(k, num(v)?);
            }
            ["tensor", name, dims, "f32", off] => {
                let shape = dims.split('x').map(num).collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_string(), shape, num(off)?));
            }
            [] => {}
            _ => return Err(bad(format!("unrecognized line {line:?}"))),
        }
    }
    match version {
        Some(CHECKPOINT_VERSION) => {}
        Some(found) => {
            return Err(Error::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            })
        }
        None => return Err(bad("missing format line".into())),
    }
    let get = |m: &HashMap<&str, usize>, k: &str| m.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
    let hparams = HyperParams {
        max_history: get(&hp, "max_history")?,
        d_model: get(&hp, "d_model")?,
        d_cat: get(&hp, "d_cat")?,
        d_cross: get(&hp, "d_cross")?,
        d_prof: get(&hp, "d_prof")?,
        heads: get(&hp, "heads")?,
        d_head: get(&hp, "d_head")?,
        d_match: get(&hp, "d_match")?,
        ffn_hidden: get(&hp, "ffn_hidden")?,
    };
    let vocab = Vocab {
        items: get(&vocab, "items")?,
        categories: get(&vocab, "categories")?,
        cross: get(&vocab, "cross")?,
        profiles: get(&vocab, "profiles")?,
    };
    Ok(Manifest {
        hparams,
        vocab,
        tensors,
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let io = |e: std::io::Error| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadMagic("checkpoint".into()))?;
    if magic[..7] != CHECKPOINT_MAGIC[..7] {
        return Err(Error::BadMagic("checkpoint".into()));
    }
    if magic[7] as u32 != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: magic[7] as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::SizeMismatch("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut text = Vec::new();
    (&mut r).take(len as u64).read_to_end(&mut text).map_err(io)?;
    if text.len() != len {
        return Err(Error::SizeMismatch(format!(
            "manifest declares {len} bytes, found {}",
            text.len()
        )));
    }
    let text = String::from_utf8(text).map_err(|_| Error::Manifest("not UTF-8".into()))?;
    let manifest = parse_manifest(&text)?;
    manifest.hparams.validate()?;

    let layout = tensor_layout(&manifest.hparams, &manifest.vocab);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Manifest(format!(
            "expected {} tensors, found {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let mut expected_offset = 0usize;
    for ((name, shape), (found_name, found_shape, offset)) in layout.iter().zip(&manifest.tensors) {
        if name != found_name {
            return Err(Error::Manifest(format!("expected tensor {name}, found {found_name}")));
        }
        if shape != found_shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: found_shape.clone(),
            });
        }
        if *offset != expected_offset {
            return Err(Error::Manifest(format!(
                "tensor {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        expected_offset += shape.iter().product::<usize>() * 4;
    }

    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(io)?;
    if blob.len() != expected_offset {
        return Err(Error::SizeMismatch(format!(
            "blob has {} bytes, manifest describes {expected_offset}",
            blob.len()
        )));
    }
    let mut params = ModelParams::zeros(manifest.hparams, manifest.vocab)?;
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for (name, _, data) in params.tensors_mut() {
        for x in data.iter_mut() {
            *x = values.next().expect("blob length checked");
            if !x.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

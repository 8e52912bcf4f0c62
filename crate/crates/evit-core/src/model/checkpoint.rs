//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "EVCK" | u32 version | 32-byte config digest |
//!   u32 config-text length | config text (canonical key=value UTF-8) |
//!   u32 param count | param manifest | u32 buffer count | buffer manifest |
//!   u64 payload length | payload
//!
//! A manifest entry is: u16 name length, name bytes, u8 dtype code,
//! u8 rank, rank u64 extents, u64 byte offset into the payload. Each
//! payload record is a standalone EVT1 encoding. The manifest's param
//! section lists exactly the trainable tensors; running statistics ride in
//! the buffer section so parameter counting stays honest.

use std::io::{Read, Write};
use std::path::Path;

use super::{EvitUnet, EvitUnetConfig};
use crate::dtype::{Dtype, Scalar};
use crate::error::{Error, Result};
use crate::evt1;

pub const MAGIC: &[u8; 4] = b"EVCK";
pub const VERSION: u32 = 1;

struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

fn write_manifest_entry(out: &mut Vec<u8>, e: &ManifestEntry) {
    out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
    out.extend_from_slice(e.name.as_bytes());
    out.push(e.dtype.code());
    out.push(e.shape.len() as u8);
    for &d in &e.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&e.offset.to_le_bytes());
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(_: std::io::Error) -> Error {
    Error::CorruptFile("truncated checkpoint".into())
}

fn read_manifest_entry<R: Read>(r: &mut R) -> Result<ManifestEntry> {
    let nlen = read_u16(r)? as usize;
    let mut name = vec![0u8; nlen];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::CorruptFile("non-UTF-8 parameter name".into()))?;
    let mut meta = [0u8; 2];
    r.read_exact(&mut meta).map_err(truncated)?;
    let dtype = Dtype::from_code(meta[0])
        .ok_or_else(|| Error::CorruptFile(format!("unknown dtype code {}", meta[0])))?;
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let offset = read_u64(r)?;
    Ok(ManifestEntry {
        name,
        dtype,
        shape,
        offset,
    })
}

/// Serialize model parameters and buffers. Byte-for-byte deterministic for
/// a given model state.
pub fn save<T: Scalar>(model: &EvitUnet<T>, path: &Path) -> Result<()> {
    let set = model.param_set();
    let mut payload: Vec<u8> = Vec::new();
    let mut param_entries = Vec::new();
    for (name, t) in &set.params {
        param_entries.push(ManifestEntry {
            name: name.clone(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&evt1::encode(t.shape(), &t.data()));
    }
    let mut buffer_entries = Vec::new();
    for (name, b) in &set.buffers {
        let data = b.borrow();
        buffer_entries.push(ManifestEntry {
            name: name.clone(),
            dtype: T::DTYPE,
            shape: vec![data.len()],
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&evt1::encode(&[data.len()], &data));
    }

    let cfg_text = model.config.canonical_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&(param_entries.len() as u32).to_le_bytes());
    for e in &param_entries {
        write_manifest_entry(&mut out, e);
    }
    out.extend_from_slice(&(buffer_entries.len() as u32).to_le_bytes());
    for e in &buffer_entries {
        write_manifest_entry(&mut out, e);
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);

    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read just the embedded config (digest-verified).
pub fn read_config(path: &Path) -> Result<EvitUnetConfig> {
    let mut f = std::fs::File::open(path)?;
    read_config_from(&mut f)
}

fn read_config_from<R: Read>(r: &mut R) -> Result<EvitUnetConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::CorruptFile("bad magic, not a checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::CorruptFile(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(truncated)?;
    let text_len = read_u32(r)? as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text).map_err(truncated)?;
    let text =
        String::from_utf8(text).map_err(|_| Error::CorruptFile("non-UTF-8 config text".into()))?;
    let config = EvitUnetConfig::from_text(&text)?;
    if config.digest() != digest {
        return Err(Error::CorruptFile(
            "config text does not match stored digest".into(),
        ));
    }
    Ok(config)
}

/// Rebuild a model from a checkpoint. The provided config must match the
/// stored one exactly.
pub fn load<T: Scalar>(path: &Path, config: &EvitUnetConfig) -> Result<EvitUnet<T>> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let stored = read_config_from(&mut r)?;
    if &stored != config {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint built for a different config (stored {:?} classes, input {:?})",
            stored.num_classes, stored.input_hw
        )));
    }
    let n_params = read_u32(&mut r)? as usize;
    let mut param_entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        param_entries.push(read_manifest_entry(&mut r)?);
    }
    let n_buffers = read_u32(&mut r)? as usize;
    let mut buffer_entries = Vec::with_capacity(n_buffers);
    for _ in 0..n_buffers {
        buffer_entries.push(read_manifest_entry(&mut r)?);
    }
    let payload_len = read_u64(&mut r)? as usize;
    if r.len() != payload_len {
        return Err(Error::CorruptFile(format!(
            "payload length {} does not match header {payload_len}",
            r.len()
        )));
    }
    let payload = r;

    let model = EvitUnet::<T>::build(config)?;
    let set = model.param_set();
    if set.params.len() != n_params || set.buffers.len() != n_buffers {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {n_params} params / {n_buffers} buffers, model expects {} / {}",
            set.params.len(),
            set.buffers.len()
        )));
    }
    for ((name, t), e) in set.params.iter().zip(&param_entries) {
        if *name != e.name || t.shape() != e.shape.as_slice() || e.dtype != T::DTYPE {
            return Err(Error::ConfigMismatch(format!(
                "parameter {} does not match checkpoint entry {}",
                name, e.name
            )));
        }
        let mut slice = &payload[e.offset as usize..];
        let loaded = evt1::read_tensor::<T, _>(&mut slice)?;
        t.set_data(&loaded.data())?;
    }
    for ((name, b), e) in set.buffers.iter().zip(&buffer_entries) {
        if *name != e.name {
            return Err(Error::ConfigMismatch(format!(
                "buffer {} does not match checkpoint entry {}",
                name, e.name
            )));
        }
        let mut slice = &payload[e.offset as usize..];
        let loaded = evt1::read_tensor::<T, _>(&mut slice)?;
        b.borrow_mut().copy_from_slice(&loaded.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::tape::Tape;

    fn tiny() -> EvitUnetConfig {
        EvitUnetConfig {
            stage_widths: [8, 16, 24, 32],
            stage_depths: [1, 1, 1, 1],
            heads: [2, 2],
            head_dim: 8,
            expansion: 2,
            num_classes: 2,
            input_hw: (32, 32),
            ..Default::default()
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = EvitUnet::<f32>::build(&cfg).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&model, &p1).unwrap();
        let loaded = load::<f32>(&p1, &cfg).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_forward_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = EvitUnet::<f32>::build(&cfg).unwrap();
        let p = dir.path().join("m.ckpt");
        save(&model, &p).unwrap();
        let loaded = load::<f32>(&p, &cfg).unwrap();
        let img = crate::init::random_tensor(&[1, 3, 32, 32], 9, -1.0, 1.0);
        let tape = Tape::disabled();
        let a = model.forward(&tape, &img, Mode::Eval).unwrap();
        let b = loaded.forward(&tape, &img, Mode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn config_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = EvitUnet::<f32>::build(&cfg).unwrap();
        let p = dir.path().join("m.ckpt");
        save(&model, &p).unwrap();
        let other = EvitUnetConfig {
            num_classes: 5,
            ..tiny()
        };
        assert!(matches!(
            load::<f32>(&p, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn stored_config_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = EvitUnet::<f32>::build(&cfg).unwrap();
        let p = dir.path().join("m.ckpt");
        save(&model, &p).unwrap();
        assert_eq!(read_config(&p).unwrap(), cfg);
    }
}

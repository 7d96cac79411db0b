//! Versioned binary container used for indexes and model checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` payload length, then the bincode-encoded payload.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<W: Write, T: Serialize>(mut w: W, magic: &[u8; 8], version: u32, payload: &T) -> Result<()> {
    let bytes = bincode::serialize(payload)?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

pub fn to_bytes<T: Serialize>(magic: &[u8; 8], version: u32, payload: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf, magic, version, payload)?;
    Ok(buf)
}

pub fn read<R: Read, T: DeserializeOwned>(mut r: R, magic: &[u8; 8], version: u32) -> Result<T> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&head)
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let found = u32::from_le_bytes(v);
    if found != version {
        return Err(Error::Format(format!("format version {found} unsupported (expected {version})")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Ok(bincode::deserialize(&bytes)?)
}

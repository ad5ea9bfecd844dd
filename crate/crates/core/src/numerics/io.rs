//! `.tns` tensor files: one JSON header line `{"shape":[...],"name":...}`
//! followed by the little-endian `f64` payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    name: Option<String>,
}

pub fn write_tns(w: &mut impl Write, name: Option<&str>, tensor: &Tensor) -> Result<()> {
    let header = Header { shape: tensor.shape().to_vec(), name: name.map(str::to_owned) };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record. Returns `None` at a clean end of stream.
pub fn read_tns(r: &mut impl BufRead) -> Result<Option<(Option<String>, Tensor)>> {
    let mut line = Vec::new();
    if r.read_until(b'\n', &mut line)? == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        bail!(Input, "truncated tensor header");
    }
    let header: Header = serde_json::from_slice(&line)?;
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some((header.name, Tensor::new(header.shape, data)?)))
}

pub fn save_tns(path: impl AsRef<Path>, name: Option<&str>, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tns(&mut w, name, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn load_tns(path: impl AsRef<Path>) -> Result<(Option<String>, Tensor)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    match read_tns(&mut r)? {
        Some(rec) => Ok(rec),
        None => bail!(Input, "{} is empty", path.display()),
    }
}

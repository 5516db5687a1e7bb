//! Binary tensor files ("YTF") and named tensor records.
//!
//! A YTF blob is laid out as
//!
//! ```text
//! "YTF1" | rank: u32 LE | shape: rank x u64 LE | payload: numel x f64 LE
//! ```
//!
//! with no padding. A named record prefixes a YTF blob with
//! `name_len: u32 LE | name bytes (UTF-8)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const YTF_MAGIC: &[u8; 4] = b"YTF1";

/// Upper bound on rank accepted when reading. Guards against reading a
/// garbage rank field and allocating a huge shape vector.
const MAX_RANK: u32 = 32;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            fmt_err(format!("truncated {what}"))
        } else {
            fmt_err(format!("reading {what}: {e}"))
        }
    })
}

pub fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != expected {
        return Err(fmt_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

pub fn write_ytf(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(YTF_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ytf(r: &mut impl Read) -> Result<Tensor> {
    read_magic(r, YTF_MAGIC)?;
    let rank = read_u32(r, "rank")?;
    if rank > MAX_RANK {
        return Err(fmt_err(format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u64(r, "shape")?;
        let d = usize::try_from(d).map_err(|_| fmt_err(format!("dimension {d} overflows")))?;
        if d == 0 {
            return Err(fmt_err("zero-sized dimension"));
        }
        numel = numel
            .checked_mul(d)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| fmt_err("shape overflows element count"))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact_or(r, &mut buf, "payload")?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ytf(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_ytf(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(fmt_err("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_ytf(w, t)
}

pub fn read_record(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r, "record name length")? as usize;
    if len > 4096 {
        return Err(fmt_err(format!("record name length {len} is implausible")));
    }
    let mut name = vec![0u8; len];
    read_exact_or(r, &mut name, "record name")?;
    let name = String::from_utf8(name).map_err(|_| fmt_err("record name is not UTF-8"))?;
    let t = read_ytf(r)?;
    Ok((name, t))
}

pub fn write_json_block(w: &mut impl Write, json: &str) -> std::io::Result<()> {
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())
}

pub fn read_json_block(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r, "descriptor length")? as usize;
    if len > 1 << 24 {
        return Err(fmt_err(format!("descriptor length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact_or(r, &mut buf, "descriptor")?;
    String::from_utf8(buf).map_err(|_| fmt_err("descriptor is not UTF-8"))
}

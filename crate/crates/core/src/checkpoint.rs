//! `HARMCKPT1` checkpoint files.
//!
//! ```text
//! HARMCKPT1\n
//! <name>\n
//! <dtype> <rank> <dim0> <dim1> ...\n
//! <little-endian payload>
//! ...
//! ```
//!
//! Batch-norm running statistics are stored as ordinary entries named
//! `<layer>.running_mean` / `<layer>.running_var`; the architecture
//! descriptor is an ASCII `u8` entry named [`ARCH_ENTRY`].

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{format_err, Result};
use crate::experiments::Arch;
use crate::model::Model;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &str = "HARMCKPT1";
pub const ARCH_ENTRY: &str = "model.arch";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(format!("{} {}", T::DTYPE.tag(), t.rank()).as_bytes());
    for d in t.dims() {
        out.extend_from_slice(format!(" {d}").as_bytes());
    }
    out.push(b'\n');
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = format!("{MAGIC}\n").into_bytes();
    for e in entries {
        if e.name.is_empty() || e.name.contains('\n') {
            return Err(format_err!("entry name {:?} is not a single non-empty line", e.name));
        }
        out.extend_from_slice(e.name.as_bytes());
        out.push(b'\n');
        match &e.payload {
            Payload::F32(t) => push_tensor(&mut out, t),
            Payload::F64(t) => push_tensor(&mut out, t),
            Payload::U8(bytes) => {
                out.extend_from_slice(format!("u8 1 {}\n", bytes.len()).as_bytes());
                out.extend_from_slice(bytes);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err!("truncated checkpoint: missing line at byte {}", self.pos))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| format_err!("non-UTF-8 header line"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format_err!("truncated checkpoint: payload needs {n} bytes at byte {}", self.pos))?;
        self.pos += n;
        Ok(chunk)
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>, dims: &[usize]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let size = T::DTYPE.size();
    let bytes = r.take(n * size)?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(dims, data).map_err(|e| format_err!("{e}"))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.line().map_err(|_| format_err!("missing {MAGIC} magic line"))?;
    if magic != MAGIC {
        return Err(format_err!("bad magic {magic:?}, expected {MAGIC}"));
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let name = r.line()?.to_string();
        let header = r.line()?;
        let mut fields = header.split(' ');
        let tag = fields.next().unwrap_or_default();
        let rank: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| format_err!("{name}: bad header {header:?}"))?;
        let dims = fields
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err!("{name}: bad dims in {header:?}"))?;
        if dims.len() != rank {
            return Err(format_err!("{name}: rank {rank} but {} dims", dims.len()));
        }
        let payload = match (tag, DType::from_tag(tag)) {
            (_, Some(DType::F32)) => Payload::F32(read_tensor(&mut r, &dims)?),
            (_, Some(DType::F64)) => Payload::F64(read_tensor(&mut r, &dims)?),
            ("u8", None) if rank == 1 => Payload::U8(r.take(dims[0])?.to_vec()),
            _ => return Err(format_err!("{name}: unknown dtype {tag:?}")),
        };
        entries.push(Entry { name, payload });
    }
    Ok(entries)
}

pub fn save_checkpoint<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let mut entries = vec![Entry { name: ARCH_ENTRY.into(), payload: Payload::U8(model.arch.clone().into_bytes()) }];
    for (name, t) in model.state() {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.cast()),
            DType::F64 => Payload::F64(t.cast()),
        };
        entries.push(Entry { name, payload });
    }
    fs::write(path, encode(&entries)?)?;
    Ok(())
}

/// Element type of the tensors stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let entries = decode(&fs::read(path)?)?;
    entries
        .iter()
        .find_map(|e| match e.payload {
            Payload::F32(_) => Some(DType::F32),
            Payload::F64(_) => Some(DType::F64),
            Payload::U8(_) => None,
        })
        .ok_or_else(|| format_err!("checkpoint holds no tensors"))
}

/// Rebuilds the model named by the architecture entry and loads every
/// parameter and running statistic. Tensors are converted to `T` if the
/// file was written with the other element type.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let entries = decode(&fs::read(path)?)?;
    let arch = entries
        .iter()
        .find_map(|e| match (&e.payload, e.name.as_str()) {
            (Payload::U8(b), ARCH_ENTRY) => Some(String::from_utf8_lossy(b).into_owned()),
            _ => None,
        })
        .ok_or_else(|| format_err!("checkpoint has no {ARCH_ENTRY} entry"))?;
    let arch = Arch::from_str(&arch)?;
    let mut model = arch.build::<T>(0)?;
    let state: Vec<(String, Tensor<T>)> = entries
        .into_iter()
        .filter_map(|e| match e.payload {
            Payload::F32(t) => Some((e.name, t.cast())),
            Payload::F64(t) => Some((e.name, t.cast())),
            Payload::U8(_) => None,
        })
        .collect();
    model.load_state(&state).map_err(|e| format_err!("{e}"))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let entries = vec![
            Entry { name: "a".into(), payload: Payload::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1)) },
            Entry { name: "b.running_var".into(), payload: Payload::F64(Tensor::full(&[4], 1.0 / 3.0)) },
            Entry { name: "arch".into(), payload: Payload::U8(b"x y\nz".to_vec()) },
            Entry { name: "scalar".into(), payload: Payload::F64(Tensor::full(&[], 2.5)) },
        ];
        assert_eq!(decode(&encode(&entries).unwrap()).unwrap(), entries);
    }

    #[test]
    fn header_layout() {
        let e = vec![Entry { name: "w".into(), payload: Payload::F32(Tensor::full(&[2, 1], 1.0)) }];
        let bytes = encode(&e).unwrap();
        assert!(bytes.starts_with(b"HARMCKPT1\nw\nf32 2 2 1\n"));
        assert_eq!(bytes.len(), 22 + 8);
        assert_eq!(&bytes[22..26], &1f32.to_le_bytes());
    }

    #[test]
    fn corrupt_files_rejected() {
        let e = vec![Entry { name: "w".into(), payload: Payload::F64(Tensor::full(&[3], 1.0)) }];
        let bytes = encode(&e).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"HARMCKPT2\n").is_err());
        assert!(decode(b"").is_err());
        let mut bad = bytes.clone();
        bad[12] = b'x';
        assert!(decode(&bad).is_err());
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "SADMCKPT" | version u32 | step u64 | record* | crc32 u32
//! record = name_len u32 | name bytes | rank u32 | extents u64×rank | f64×numel
//! ```
//!
//! All integers and floats are little-endian. The CRC covers every byte
//! between the magic and the CRC itself. Each parameter contributes its
//! value record under its own name, followed by the optimizer moments as
//! `adam.m1/<name>` and `adam.m2/<name>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::network::params::{Parameter, ParameterStore};

pub const MAGIC: &[u8; 8] = b"SADMCKPT";
pub const VERSION: u32 = 1;
const M1: &str = "adam.m1/";
const M2: &str = "adam.m2/";

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((t.ndim() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend((e as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8 * 3);
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend(store.step().to_le_bytes());
    for (name, p) in store.iter() {
        put_record(&mut buf, name, &p.value);
    }
    for (name, p) in store.iter() {
        put_record(&mut buf, &format!("{M1}{name}"), &p.moment1);
        put_record(&mut buf, &format!("{M2}{name}"), &p.moment2);
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    buf.extend(crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

type Record = (String, Vec<usize>, Vec<f64>);

/// Structural parse of the record region; `None` if a record overruns.
fn parse_records(region: &[u8]) -> Option<std::result::Result<Vec<Record>, String>> {
    let mut r = Reader { bytes: region, pos: 0 };
    let mut out = Vec::new();
    while r.pos < region.len() {
        let name_len = r.u32()? as usize;
        let name = match std::str::from_utf8(r.take(name_len)?) {
            Ok(s) => s.to_owned(),
            Err(_) => return Some(Err("tensor name is not UTF-8".into())),
        };
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 16 {
            return Some(Err(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).ok()?);
        }
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b))?;
        let raw = r.take(n.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    Some(Ok(out))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParameterStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "SADMCKPT",
        });
    }
    let header = MAGIC.len() + 4 + 8;
    if bytes.len() < header + 4 {
        return Err(Error::Truncated { path: path.into() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: VERSION,
        });
    }
    let step = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    let parsed = parse_records(&bytes[header..body_end]);
    if stored != computed {
        return Err(match parsed {
            None => Error::Truncated { path: path.into() },
            Some(_) => Error::Crc {
                path: path.into(),
                stored,
                computed,
            },
        });
    }
    let records = match parsed {
        None => return Err(Error::Truncated { path: path.into() }),
        Some(Err(msg)) => return Err(Error::Format { path: path.into(), msg }),
        Some(Ok(r)) => r,
    };

    let mut store = ParameterStore::new();
    let mut moments = Vec::new();
    for (name, shape, data) in records {
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        if name.starts_with(M1) || name.starts_with(M2) {
            moments.push((name, t));
        } else {
            if store.id(&name).is_some() {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!("duplicate tensor {name:?}"),
                });
            }
            let z = Tensor::zeros_like(&t);
            store.insert_raw(
                name,
                Parameter {
                    grad: z.clone(),
                    moment1: z.clone(),
                    moment2: z,
                    value: t,
                },
            );
        }
    }
    for (name, t) in moments {
        let (target, first) = match name.strip_prefix(M1) {
            Some(n) => (n, true),
            None => (name.strip_prefix(M2).unwrap(), false),
        };
        let p = store
            .param_by_name_mut(target)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        if p.value.shape() != t.shape() {
            return Err(Error::TensorShape {
                name,
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        if first {
            p.moment1 = t;
        } else {
            p.moment2 = t;
        }
    }
    store.set_step(step);
    Ok(store)
}

/// Read a checkpoint as a free-standing store (no name/shape expectations).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Read a checkpoint into `store`, which fixes the expected names and shapes.
pub fn load_into(store: &mut ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    store.restore_from(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        let a = s.insert("a.weight", Tensor::new(&[2, 3], (0..6).map(|v| v as f64 * 0.1).collect()).unwrap()).unwrap();
        s.insert("b", Tensor::scalar(-2.5)).unwrap();
        s.get_mut(a).moment1 = Tensor::full(&[2, 3], 0.25);
        s.get_mut(a).moment2 = Tensor::full(&[2, 3], 1e-7);
        s.set_step(42);
        s
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let s = sample_store();
        let bytes = encode(&s);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample_store());
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad, p), Err(Error::VersionMismatch { found: 9, .. })));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0x01;
        assert!(matches!(decode(&bad, p), Err(Error::Crc { .. })));

        let bad = &bytes[..bytes.len() - 13];
        assert!(matches!(decode(bad, p), Err(Error::Truncated { .. })));
    }
}

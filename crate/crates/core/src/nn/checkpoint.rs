//! Binary parameter container.
//!
//! Layout: the magic bytes `CMOE`, a little-endian `u32` format version, then one record per
//! tensor until end of file. A record is the name length (`u32`), UTF-8 name bytes, rank
//! (`u32`), each dimension (`u64`), and the values as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + store.count(None) * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads every `(name, tensor)` record in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    while r.at < bytes.len() {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        records.push((name, tensor));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut store = ParamStore::new();
        let special = vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, f64::MAX, -1e-300, 7.0];
        store
            .add(
                "a.weight",
                ParamGroup::Detector,
                Tensor::new(vec![2, 3], special).unwrap(),
            )
            .unwrap();
        store.add("b", ParamGroup::Rest, Tensor::scalar(0.1)).unwrap();
        save_checkpoint(&store, &path).unwrap();
        let records = load_checkpoint(&path).unwrap();
        assert_eq!(records.len(), 2);
        for ((name, t), (_, p)) in records.iter().zip(store.iter()) {
            assert_eq!(name, &p.name);
            assert!(t.bitwise_eq(&p.value));
        }
        let mut fresh = store.clone();
        fresh.value_mut(fresh.find("b").unwrap()).data_mut()[0] = 9.0;
        fresh.load_values(records).unwrap();
        assert_eq!(fresh.fingerprint(ParamGroup::Rest), store.fingerprint(ParamGroup::Rest));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        let mut store = ParamStore::new();
        store
            .add("w", ParamGroup::Rest, Tensor::vector(vec![1.0, 2.0]))
            .unwrap();
        save_checkpoint(&store, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}

//! Named-tensor container (".ntc"): magic "NTC1", a 32-bit LE entry count,
//! then per entry (sorted by name): name length (u16 LE), UTF-8 name, rank
//! (u8), dims (u32 LE each), dtype byte (0 = f32 LE), raw data. Round-trips
//! are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTC1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    map: BTreeMap<String, ArrayD<f32>>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f32>) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("bad tensor name length {}", name.len())));
        }
        if tensor.ndim() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank {} too large", tensor.ndim())));
        }
        if tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Checkpoint("dimension exceeds u32".into()));
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.map.len() > u32::MAX as usize {
            return Err(Error::Checkpoint("too many entries".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, tensor) in &self.map {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.ndim() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            let standard = tensor.as_standard_layout();
            for &v in standard.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut map = BTreeMap::new();
        let mut last_name: Option<String> = None;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if let Some(prev) = &last_name {
                if *prev >= name {
                    return Err(Error::Checkpoint(format!(
                        "entries not strictly sorted: {prev:?} then {name:?}"
                    )));
                }
            }
            let rank = cur.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("unknown dtype {dtype}")));
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| {
                Error::Checkpoint("tensor size overflow".into())
            })?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("shape mismatch: {e}")))?;
            last_name = Some(name.clone());
            map.insert(name, tensor);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            Error::Checkpoint("length overflow".into())
        })?;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(dims: &[usize], vals: Vec<f32>) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(dims), vals).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = NamedTensors::new();
        t.insert("b.weight", arr(&[2, 3], vec![0.1, -2.5e-8, 3e12, f32::MIN_POSITIVE, 0.0, -0.0]))
            .unwrap();
        t.insert("a.bias", arr(&[4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        t.insert("scalar", arr(&[], vec![42.0])).unwrap();
        let bytes = t.to_bytes().unwrap();
        let back = NamedTensors::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for (name, tensor) in t.iter() {
            let other = back.get(name).unwrap();
            assert_eq!(tensor.shape(), other.shape());
            let a: Vec<u32> = tensor.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = other.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn byte_layout_of_minimal_container() {
        let mut t = NamedTensors::new();
        t.insert("a", arr(&[2], vec![1.0, 2.0])).unwrap();
        let bytes = t.to_bytes().unwrap();
        let expected: Vec<u8> = [
            b"NTC1".as_slice(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"a",
            &[1u8],
            &2u32.to_le_bytes(),
            &[0u8],
            &1.0f32.to_le_bytes(),
            &2.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn entries_serialize_sorted_regardless_of_insert_order() {
        let mut t1 = NamedTensors::new();
        t1.insert("z", arr(&[1], vec![1.0])).unwrap();
        t1.insert("a", arr(&[1], vec![2.0])).unwrap();
        let mut t2 = NamedTensors::new();
        t2.insert("a", arr(&[1], vec![2.0])).unwrap();
        t2.insert("z", arr(&[1], vec![1.0])).unwrap();
        assert_eq!(t1.to_bytes().unwrap(), t2.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut t = NamedTensors::new();
        t.insert("w", arr(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let good = t.to_bytes().unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(NamedTensors::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));

        let truncated = &good[..good.len() - 3];
        let err = NamedTensors::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(NamedTensors::from_bytes(&trailing).is_err());

        let mut unknown_dtype = good;
        // dtype byte sits after magic+count+name_len+name+rank+2 dims
        let off = 4 + 4 + 2 + 1 + 1 + 8;
        unknown_dtype[off] = 7;
        assert!(NamedTensors::from_bytes(&unknown_dtype).is_err());
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        // hand-build a container with entries out of order
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NTC1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for name in ["b", "a"] {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(1);
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(NamedTensors::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.ntc");
        let mut t = NamedTensors::new();
        t.insert("conv.w", arr(&[2, 1, 3], vec![0.5; 6])).unwrap();
        t.save(&path).unwrap();
        let back = NamedTensors::load(&path).unwrap();
        assert_eq!(t, back);
    }
}

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParams(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Binary checkpoint container.
///
/// Layout (all integers little-endian):
///
/// ```text
/// magic      8 bytes   "SLNGCKPT"
/// version    u32       1
/// meta_len   u32       length of the UTF-8 metadata block
/// meta       bytes     free-form (JSON by convention)
/// count      u32       number of entries
/// entry*:
///   name_len u32, name bytes (UTF-8)
///   rank     u32, extents u64 x rank
///   data     f64 LE x product(extents)
/// ```
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<(String, Tensor)>,
}

const MAGIC: &[u8; 8] = b"SLNGCKPT";
const VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: String) -> Self {
        Checkpoint {
            metadata,
            entries: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(w, self.metadata.len())?;
        w.write_all(self.metadata.as_bytes())?;
        write_len(w, self.entries.len())?;
        for (name, t) in &self.entries {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_len(w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let metadata = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            entries.push((name, t));
        }
        Ok(Checkpoint { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }

    /// Copy entries into `store`; every parameter must be present with a
    /// matching shape. Extra entries are ignored.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..store.len() {
            let id = ParamId(i);
            let name = store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if t.dims() != store.get(id).dims() {
                return Err(Error::Checkpoint(format!(
                    "entry {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = (*t).clone();
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("w", Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn layout_header_is_stable() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::row(&[1.0])).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_store(&s, "{}".into()).write_to(&mut buf).unwrap();
        let mut expected = b"SLNGCKPT".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"{}");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"b");
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn restore_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(2, 2)).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(3, 2)).unwrap();
        let ck = Checkpoint::from_store(&a, String::new());
        assert!(ck.restore_into(&mut b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6..1e6f64, 1..40), meta in ".{0,20}") {
            let mut s = ParamStore::new();
            s.insert("layer.w", Tensor::row(&values)).unwrap();
            s.insert("layer.b", Tensor::column(&values)).unwrap();
            let mut buf = Vec::new();
            Checkpoint::from_store(&s, meta.clone()).write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&back.metadata, &meta);
            let mut restored = s.clone();
            restored.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
            back.restore_into(&mut restored).unwrap();
            prop_assert_eq!(restored, s);
        }
    }
}

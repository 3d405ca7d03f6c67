//! Flat binary checkpoint format.
//!
//! ```text
//! "VCFK" | version: u32 | count: u32 |
//!   repeated count times:
//!     name_len: u16 | name: utf-8 | rank: u8 | extents: u64 × rank | payload: f64 × numel
//! ```
//!
//! All integers and floats are little-endian. Entries are written in the
//! order given, and [`ParamStore`] writes them sorted by name.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VCFK";
pub const VERSION: u32 = 1;

pub fn write_entries<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let [rank] = read_array::<1, _>(r)?;
        if rank as usize > Tensor::MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl ParamStore {
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.sorted().map(|(id, name)| (name, self.value(id))).collect();
        write_entries(w, &entries)
    }

    /// Reads a checkpoint into a fresh store, preserving file order.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in read_entries(r)? {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Overwrites values of existing parameters from a checkpoint. Every
    /// parameter in `self` must be present with a matching shape.
    pub fn load_into<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let loaded = ParamStore::load(r)?;
        let names: Vec<String> = self.sorted().map(|(_, n)| n.to_string()).collect();
        for name in names {
            let t = loaded
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing entry {name}")))?;
            self.set(&name, t.clone())?;
        }
        Ok(())
    }
}

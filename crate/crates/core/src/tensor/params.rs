//! Named parameter registry with bit-exact binary serialization.

use super::{Result, Tensor, TensorError};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};

const MAGIC: &[u8; 8] = b"RWEMO.P1";

/// Index of a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Trainable parameters receive gradients; buffers (batch-norm running
    /// statistics) do not, but serialize alongside them.
    pub trainable: bool,
}

/// Ordered collection of named parameters. Registration order is the
/// canonical order used by optimizers and serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn get_index(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_index_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total number of scalar values across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of trainable scalar values.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Serialize as name -> shape -> row-major values; round-trips bit-exactly.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(p.trainable)])?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: String| TensorError::InvalidArgument {
            op: "params::read_from",
            reason,
        };
        let io_err = |e: io::Error| bad(format!("read failed: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(bad("bad magic; not a parameter file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name).map_err(|e| bad(format!("bad name: {e}")))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(io_err)?;
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let rank = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut u64buf = [0u8; 8];
            for _ in 0..rank {
                r.read_exact(&mut u64buf).map_err(io_err)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u64buf).map_err(io_err)?;
                data.push(f64::from_le_bytes(u64buf));
            }
            set.register(&name, Tensor::from_vec(&shape, data)?, flag[0] != 0);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let mut set = ParamSet::new();
        set.register(
            "a.w",
            Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0])
                .unwrap(),
            true,
        );
        set.register("a.running_mean", Tensor::zeros(&[3]), false);
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = ParamSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (p, q) in set.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            assert_eq!(p.value.shape(), q.value.shape());
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // write the round-tripped set again: identical bytes
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_garbage() {
        let junk = b"not a parameter file at all";
        assert!(ParamSet::read_from(&mut junk.as_slice()).is_err());
    }
}

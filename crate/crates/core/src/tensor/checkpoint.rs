//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PTSCCKPT"
//! version  u32      1
//! count    u32      number of arrays
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes),
//!     rank u32, extents (rank × u64),
//!     values (prod(extents) × f64)
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PTSCCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )
    }
}

/// Flat, ordered list of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &e in &a.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in &a.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            arrays.push(NamedArray {
                name,
                shape,
                values,
            });
        }
        Ok(Self { arrays })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            arrays: vec![NamedArray {
                name: "w".into(),
                shape: vec![2],
                values: vec![1.0, -0.5],
            }],
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'w');
        assert_eq!(b.len(), 8 + 4 + 4 + 4 + 1 + 4 + 8 + 16);
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut corrupt = b.clone();
        corrupt[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            entries in proptest::collection::vec(
                ("[a-z.0-9]{0,12}", proptest::collection::vec(0usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let arrays = entries
                .into_iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let values = (0..n).map(|i| f64::from_bits(seed.wrapping_add(i as u64 * 0x9E37_79B9))).collect();
                    NamedArray { name, shape, values }
                })
                .collect();
            let ck = Checkpoint { arrays };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(ck.to_bytes(), back.to_bytes());
        }
    }
}

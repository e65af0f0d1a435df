//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TSMNTNSR` |
//! | 1     | version (`1`) |
//! | 4     | dimension count `n` (u32) |
//! | 8·n   | dimensions (u64 each) |
//! | 8·∏d  | row-major f64 data |

use std::path::Path;

use nalgebra::DMatrix;

use crate::artifact::{read_file, write_file};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"TSMNTNSR";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    /// Row-major (last index fastest).
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self::from_matrices(std::slice::from_ref(m)).reshape_2d()
    }

    fn reshape_2d(mut self) -> Self {
        self.dims.remove(0);
        self
    }

    /// Stacks equally shaped matrices into `[n, rows, cols]`.
    pub fn from_matrices(ms: &[DMatrix<f64>]) -> Self {
        let (r, c) = ms.first().map_or((0, 0), |m| m.shape());
        let mut data = Vec::with_capacity(ms.len() * r * c);
        for m in ms {
            assert_eq!(m.shape(), (r, c), "stacked matrices must share a shape");
            for i in 0..r {
                data.extend(m.row(i).iter());
            }
        }
        Self { dims: vec![ms.len(), r, c], data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(Error::invalid(format!("expected a 2-d tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn to_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        match self.dims[..] {
            [_, r, c] => Ok(self.data.chunks_exact(r * c).map(|s| DMatrix::from_row_slice(r, c, s)).collect()),
            _ => Err(Error::invalid(format!("expected a 3-d tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * (self.dims.len() + self.data.len()));
        self.encode(&mut out);
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed. `file` only labels errors.
    pub fn decode(bytes: &[u8], file: &Path) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0, file };
        if r.take(8, "magic")? != TENSOR_MAGIC {
            return Err(Error::format(file, "magic", "not a tensor container"));
        }
        let version = r.take(1, "version")?[0];
        if version != TENSOR_VERSION {
            return Err(Error::format(file, "version", format!("unsupported version {version}, expected {TENSOR_VERSION}")));
        }
        let ndim = u32::from_le_bytes(r.take(4, "ndim")?.try_into().expect("4 bytes")) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().expect("8 bytes"));
            dims.push(usize::try_from(d).map_err(|_| Error::format(file, "dims", "dimension overflows usize"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(file, "dims", "element count overflows"))?;
        let raw = r.take(8 * n, "data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((Self { dims, data }, r.pos))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let (t, used) = Self::decode(&bytes, path)?;
        if used != bytes.len() {
            return Err(Error::format(path, "data", format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.file, field, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut want = b"TSMNTNSR".to_vec();
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(t.to_bytes(), want);
    }

    #[test]
    fn matrices_round_trip_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Tensor::from_matrices(&[m.clone(), m.scale(2.0)]);
        assert_eq!(t.dims, vec![2, 2, 3]);
        assert_eq!(&t.data[..3], &[1.0, 2.0, 3.0]);
        let (back, used) = Tensor::decode(&t.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(used, t.to_bytes().len());
        assert_eq!(back.to_matrices().unwrap(), vec![m.clone(), m.scale(2.0)]);
        assert_eq!(Tensor::from_matrix(&m).to_matrix().unwrap(), m);
    }

    #[test]
    fn corrupt_headers_name_the_field() {
        let t = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let mut bytes = t.to_bytes();
        bytes[8] = 9;
        match Tensor::decode(&bytes, Path::new("f.tsr")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
        let bytes = t.to_bytes();
        match Tensor::decode(&bytes[..bytes.len() - 1], Path::new("f.tsr")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "data"),
            other => panic!("{other:?}"),
        }
        match Tensor::decode(b"NOTATENSOR___", Path::new("f.tsr")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }
}

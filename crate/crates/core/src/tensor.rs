//! Dense row-major `f32` tensors and their on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "FTTN" | u8 version = 1 | u8 rank | rank x u32 dims | prod(dims) x f32
//! ```

use crate::error::{contract, Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"FTTN";
pub const CONTAINER_VERSION: u8 = 1;

/// An n-dimensional array of `f32` values in row-major order.
///
/// The shape is fixed at construction; only the values may change.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(contract(format!(
                "tensor shape must be a non-empty list of positive integers, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(contract(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid tensor shape {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("from_vec needs a non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the values. The shape cannot change through this.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(contract(format!(
                "item() needs a one-element tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same values under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sample `index` of a batched tensor `[N, ...]` as a tensor of shape `[...]`.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || index >= self.shape[0] {
            return Err(contract(format!(
                "cannot take sample {index} of shape {:?}",
                self.shape
            )));
        }
        let per = self.numel() / self.shape[0];
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[index * per..(index + 1) * per].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| contract("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(contract(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Appends the container encoding of this tensor to `out`.
    pub fn write_container(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_container(&mut out);
        out
    }

    /// Parses one container starting at `*offset`, advancing the offset past it.
    /// Offsets in errors are absolute positions within `bytes`.
    pub fn read_container(bytes: &[u8], offset: &mut usize) -> Result<Tensor> {
        let mut cursor = Cursor { bytes, pos: *offset };
        let start = cursor.pos;
        let magic = cursor.take(4, "tensor magic")?;
        if magic != CONTAINER_MAGIC {
            return Err(Error::Format {
                offset: start,
                message: format!("bad tensor magic {magic:?}"),
            });
        }
        let version = cursor.u8("tensor version")?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format {
                offset: start + 4,
                message: format!("unsupported tensor version {version}"),
            });
        }
        let rank = cursor.u8("tensor rank")? as usize;
        if rank == 0 {
            return Err(Error::Format {
                offset: start + 5,
                message: "tensor rank must be positive".into(),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = cursor.pos;
            let d = cursor.u32("tensor dim")? as usize;
            if d == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: "zero-sized tensor dimension".into(),
                });
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: start + 6,
                message: "tensor size overflows".into(),
            })?;
        let raw = cursor.take(numel.saturating_mul(4), "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *offset = cursor.pos;
        Tensor::new(shape, data)
    }
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

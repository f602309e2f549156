//! Dense row-major tensors in double precision, plus the `F2TD` binary
//! container used to persist weights and fitted models.
//!
//! Tensors are immutable once handed out; construction rejects non-finite
//! scalars, and every op re-checks finiteness in debug builds.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense tensor: a shape and a contiguous row-major `f64` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the shape/length invariant and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "Tensor::new",
                format!("non-finite scalar at flat index {pos}"),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs: skips the O(n) finiteness scan in
    /// release builds but keeps it as a debug assertion.
    pub(crate) fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: bad shape");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: produced a non-finite scalar"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_op("Tensor::scalar", vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for builders and tests. Ops never mutate recorded
    /// tensors; exclusive access keeps the sharing contract intact.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a rank-0 / one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Flat index for a rank-3 tensor laid out [d0, d1, d2].
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx3(i, j, k)]
    }

    /// Flat index for a rank-2 tensor laid out [d0, d1].
    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_op(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Magic bytes of the tensor container format.
pub const F2TD_MAGIC: &[u8; 4] = b"F2TD";

/// Write a tensor in the `F2TD` format: magic `"F2TD"`, `u32` rank, one `u64`
/// per extent, then the row-major `f64` payload. All fields little-endian.
pub fn write_f2td(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(F2TD_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor in the `F2TD` format. Validates magic, rank, and payload
/// finiteness.
pub fn read_f2td(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != F2TD_MAGIC {
        return Err(Error::Format(format!("expected F2TD magic, got {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(4.25);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn f2td_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, -4.5, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_f2td(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], F2TD_MAGIC);
        let back = read_f2td(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f2td_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_f2td(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[0] = b'X';
        assert!(read_f2td(&mut buf.as_slice()).is_err());
    }
}

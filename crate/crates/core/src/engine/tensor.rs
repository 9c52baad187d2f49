use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
    I64,
    Bool,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::Bool => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
            DType::Bool => "bool",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "i64" => Ok(DType::I64),
            "bool" => Ok(DType::Bool),
            other => Err(EngineError::UnknownDType(other.to_string())),
        }
    }
}

/// Element-wise reduction used by Partial placements and collectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    #[default]
    Sum,
    Max,
}

/// Row-major element buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

/// Applies `$body` to the inner vector of every variant, rewrapping the result.
macro_rules! map_data {
    ($data:expr, $v:ident => $body:expr) => {
        match $data {
            $crate::engine::Data::F32($v) => $crate::engine::Data::F32($body),
            $crate::engine::Data::F64($v) => $crate::engine::Data::F64($body),
            $crate::engine::Data::I64($v) => $crate::engine::Data::I64($body),
            $crate::engine::Data::Bool($v) => $crate::engine::Data::Bool($body),
        }
    };
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I64(v) => v.len(),
            Data::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
            Data::I64(_) => DType::I64,
            Data::Bool(_) => DType::Bool,
        }
    }

    pub fn zeros(dtype: DType, n: usize) -> Data {
        match dtype {
            DType::F32 => Data::F32(vec![0.0; n]),
            DType::F64 => Data::F64(vec![0.0; n]),
            DType::I64 => Data::I64(vec![0; n]),
            DType::Bool => Data::Bool(vec![false; n]),
        }
    }

    /// Little-endian bytes of every element; the canonical form for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Data::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::Bool(v) => v.iter().map(|&b| b as u8).collect(),
        }
    }
}

/// A dense row-major tensor local to one device.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of `shape`.
pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Data) -> Result<Self, EngineError> {
        if numel(&shape) != data.len() {
            return Err(EngineError::BufferLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: &[usize], values: Vec<f64>) -> Result<Self, EngineError> {
        Self::new(shape.to_vec(), Data::F64(values))
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Self, EngineError> {
        Self::new(shape.to_vec(), Data::F32(values))
    }

    pub fn from_i64(shape: &[usize], values: Vec<i64>) -> Result<Self, EngineError> {
        Self::new(shape.to_vec(), Data::I64(values))
    }

    pub fn from_bool(shape: &[usize], values: Vec<bool>) -> Result<Self, EngineError> {
        Self::new(shape.to_vec(), Data::Bool(values))
    }

    pub fn scalar_f64(v: f64) -> Self {
        Self {
            shape: vec![],
            data: Data::F64(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Data::zeros(dtype, numel(shape)),
        }
    }

    pub fn full(shape: &[usize], dtype: DType, value: f64) -> Result<Self, EngineError> {
        let n = numel(shape);
        let data = match dtype {
            DType::F32 => Data::F32(vec![value as f32; n]),
            DType::F64 => Data::F64(vec![value; n]),
            DType::I64 => Data::I64(vec![value as i64; n]),
            DType::Bool => return Err(EngineError::Unsupported { op: "full", dtype }),
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Data {
        &mut self.data
    }

    pub fn into_data(self) -> Data {
        self.data
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Data::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Lossy conversion of every element to f64, for reporting.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            Data::I64(v) => v.iter().map(|&x| x as f64).collect(),
            Data::Bool(v) => v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64, EngineError> {
        if self.numel() != 1 {
            return Err(EngineError::NotScalar(self.shape.clone()));
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, EngineError> {
        if numel(shape) != self.numel() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elements at the given flat indices, as a tensor of `shape`.
    pub fn gather_flat(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor, EngineError> {
        if numel(shape) != indices.len() {
            return Err(EngineError::BufferLength {
                shape: shape.to_vec(),
                len: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return Err(EngineError::IndexOutOfRange {
                index: bad,
                len: self.numel(),
            });
        }
        let data = map_data!(&self.data, v => indices.iter().map(|&i| v[i]).collect());
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Writes `src` element `k` to flat index `indices[k]`.
    pub fn scatter_flat(&mut self, indices: &[usize], src: &Tensor) -> Result<(), EngineError> {
        if indices.len() != src.numel() {
            return Err(EngineError::BufferLength {
                shape: src.shape.clone(),
                len: indices.len(),
            });
        }
        let len = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(EngineError::IndexOutOfRange { index: bad, len });
        }
        match (&mut self.data, &src.data) {
            (Data::F32(d), Data::F32(s)) => indices.iter().zip(s).for_each(|(&i, &x)| d[i] = x),
            (Data::F64(d), Data::F64(s)) => indices.iter().zip(s).for_each(|(&i, &x)| d[i] = x),
            (Data::I64(d), Data::I64(s)) => indices.iter().zip(s).for_each(|(&i, &x)| d[i] = x),
            (Data::Bool(d), Data::Bool(s)) => indices.iter().zip(s).for_each(|(&i, &x)| d[i] = x),
            (d, s) => {
                return Err(EngineError::DTypeMismatch {
                    op: "scatter",
                    lhs: d.dtype(),
                    rhs: s.dtype(),
                })
            }
        }
        Ok(())
    }

    /// Flat indices of the sub-tensor taking `positions` along `dim`.
    fn along_indices(&self, dim: usize, positions: &[usize]) -> Result<Vec<usize>, EngineError> {
        let ext = *self.shape.get(dim).ok_or(EngineError::IndexOutOfRange {
            index: dim,
            len: self.shape.len(),
        })?;
        if let Some(&bad) = positions.iter().find(|&&p| p >= ext) {
            return Err(EngineError::IndexOutOfRange { index: bad, len: ext });
        }
        let outer = numel(&self.shape[..dim]);
        let inner = numel(&self.shape[dim + 1..]);
        let mut out = Vec::with_capacity(outer * positions.len() * inner);
        for o in 0..outer {
            for &p in positions {
                let base = (o * ext + p) * inner;
                out.extend(base..base + inner);
            }
        }
        Ok(out)
    }

    /// The slices at `positions` along `dim`, in that order.
    pub fn select_along(&self, dim: usize, positions: &[usize]) -> Result<Tensor, EngineError> {
        let idx = self.along_indices(dim, positions)?;
        let mut shape = self.shape.clone();
        shape[dim] = positions.len();
        self.gather_flat(&idx, &shape)
    }

    /// Inverse of `select_along`: writes `src`'s slices to `positions` along `dim`.
    pub fn place_along(&mut self, dim: usize, positions: &[usize], src: &Tensor) -> Result<(), EngineError> {
        let idx = self.along_indices(dim, positions)?;
        self.scatter_flat(&idx, src)
    }

    /// Bitwise equality of shape, dtype and every element's bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Data::F32(a), Data::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::F64(a), Data::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::I64(a), Data::I64(b)) => a == b,
            (Data::Bool(a), Data::Bool(b)) => a == b,
            _ => false,
        }
    }

    /// Largest absolute element-wise difference, as f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = match &self.data {
            Data::F32(v) => join(v),
            Data::F64(v) => join(v),
            Data::I64(v) => join(v),
            Data::Bool(v) => join(v),
        };
        write!(f, "shape=[{}] data=[{}]", join(&self.shape), body)
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        assert_eq!(row_major_strides(&[4, 4]), vec![4, 1]);
        assert_eq!(row_major_strides(&[2, 3, 5]), vec![15, 5, 1]);
        assert_eq!(row_major_strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn buffer_length_checked() {
        assert!(Tensor::from_f64(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn gather_scatter_inverse() {
        let t = Tensor::from_i64(&[6], vec![10, 11, 12, 13, 14, 15]).unwrap();
        let g = t.gather_flat(&[5, 0, 2], &[3]).unwrap();
        assert_eq!(g.data(), &Data::I64(vec![15, 10, 12]));
        let mut z = Tensor::zeros(&[6], DType::I64);
        z.scatter_flat(&[5, 0, 2], &g).unwrap();
        assert_eq!(z.data(), &Data::I64(vec![10, 0, 12, 0, 0, 15]));
        assert!(t.gather_flat(&[6], &[1]).is_err());
    }

    #[test]
    fn select_and_place_along_dim() {
        let t = Tensor::from_i64(&[2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        let s = t.select_along(1, &[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &Data::I64(vec![2, 0, 5, 3]));
        let mut z = Tensor::zeros(&[2, 3], DType::I64);
        z.place_along(1, &[2, 0], &s).unwrap();
        assert_eq!(z.data(), &Data::I64(vec![0, 0, 2, 3, 0, 5]));
        assert!(t.select_along(0, &[2]).is_err());
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::from_f64(&[1], vec![0.0]).unwrap();
        let b = Tensor::from_f64(&[1], vec![-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }
}

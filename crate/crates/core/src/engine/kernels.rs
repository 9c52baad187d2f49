//! Dense local kernels. All loops run in a fixed ascending order so repeated
//! evaluation is bit-identical.

use super::tensor::{numel, Data, DType, ReduceOp, Tensor};
use super::EngineError;

/// Element arithmetic. Integers wrap, so integer results do not depend on
/// summation order.
pub(crate) trait Scalar: Copy + PartialOrd {
    fn zero() -> Self;
    fn plus(self, o: Self) -> Self;
    fn minus(self, o: Self) -> Self;
    fn times(self, o: Self) -> Self;
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn zero() -> Self {
                0.0
            }
            fn plus(self, o: Self) -> Self {
                self + o
            }
            fn minus(self, o: Self) -> Self {
                self - o
            }
            fn times(self, o: Self) -> Self {
                self * o
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for i64 {
    fn zero() -> Self {
        0
    }
    fn plus(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
    fn minus(self, o: Self) -> Self {
        self.wrapping_sub(o)
    }
    fn times(self, o: Self) -> Self {
        self.wrapping_mul(o)
    }
}

fn relu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn max_scalar<T: Scalar>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

/// Element-wise zip over two numeric buffers of the same dtype.
macro_rules! zip_numeric {
    ($op:literal, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match (&$a.data(), &$b.data()) {
            (Data::F32(xs), Data::F32(ys)) => Data::F32(xs.iter().zip(ys.iter()).map(|(&$x, &$y)| $body).collect()),
            (Data::F64(xs), Data::F64(ys)) => Data::F64(xs.iter().zip(ys.iter()).map(|(&$x, &$y)| $body).collect()),
            (Data::I64(xs), Data::I64(ys)) => Data::I64(xs.iter().zip(ys.iter()).map(|(&$x, &$y)| $body).collect()),
            (l, r) if l.dtype() != r.dtype() => {
                return Err(EngineError::DTypeMismatch { op: $op, lhs: l.dtype(), rhs: r.dtype() })
            }
            (l, _) => return Err(EngineError::Unsupported { op: $op, dtype: l.dtype() }),
        }
    };
}

/// Element-wise map over a numeric buffer.
macro_rules! map_numeric {
    ($op:literal, $a:expr, |$x:ident| $body:expr) => {
        match $a.data() {
            Data::F32(xs) => Data::F32(xs.iter().map(|&$x| $body).collect()),
            Data::F64(xs) => Data::F64(xs.iter().map(|&$x| $body).collect()),
            Data::I64(xs) => Data::I64(xs.iter().map(|&$x| $body).collect()),
            other => return Err(EngineError::Unsupported { op: $op, dtype: other.dtype() }),
        }
    };
}

fn scale_float(op: &'static str, t: &Tensor, factor: f64, divide: bool) -> Result<Tensor, EngineError> {
    let data = match t.data() {
        Data::F32(xs) => {
            let f = factor as f32;
            Data::F32(xs.iter().map(|&x| if divide { x / f } else { x * f }).collect())
        }
        Data::F64(xs) => Data::F64(xs.iter().map(|&x| if divide { x / factor } else { x * factor }).collect()),
        other => return Err(EngineError::Unsupported { op, dtype: other.dtype() }),
    };
    Tensor::new(t.shape().to_vec(), data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), EngineError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(EngineError::NotMatrix {
            op,
            shape: other.to_vec(),
        }),
    }
}

fn mm_typed<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc.plus(a[i * k + p].times(b[p * n + j]));
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Matrix product of `[m,k]` and `[k,n]`.
pub fn mm(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let (m, k) = matrix_dims("mm", a)?;
    let (k2, n) = matrix_dims("mm", b)?;
    if k != k2 {
        return Err(EngineError::ShapeMismatch {
            op: "mm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = match (a.data(), b.data()) {
        (Data::F32(x), Data::F32(y)) => Data::F32(mm_typed(x, y, m, k, n)),
        (Data::F64(x), Data::F64(y)) => Data::F64(mm_typed(x, y, m, k, n)),
        (Data::I64(x), Data::I64(y)) => Data::I64(mm_typed(x, y, m, k, n)),
        (l, r) if l.dtype() != r.dtype() => {
            return Err(EngineError::DTypeMismatch {
                op: "mm",
                lhs: l.dtype(),
                rhs: r.dtype(),
            })
        }
        (l, _) => return Err(EngineError::Unsupported { op: "mm", dtype: l.dtype() }),
    };
    Tensor::new(vec![m, n], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    same_shape("add", a, b)?;
    Tensor::new(a.shape().to_vec(), zip_numeric!("add", a, b, |x, y| x.plus(y)))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    same_shape("sub", a, b)?;
    Tensor::new(a.shape().to_vec(), zip_numeric!("sub", a, b, |x, y| x.minus(y)))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    same_shape("mul", a, b)?;
    Tensor::new(a.shape().to_vec(), zip_numeric!("mul", a, b, |x, y| x.times(y)))
}

pub fn relu(x: &Tensor) -> Result<Tensor, EngineError> {
    Tensor::new(x.shape().to_vec(), map_numeric!("relu", x, |v| relu_scalar(v)))
}

/// `g` where `x > 0`, zero elsewhere.
pub fn relu_grad(g: &Tensor, x: &Tensor) -> Result<Tensor, EngineError> {
    same_shape("relu_grad", g, x)?;
    let data = zip_numeric!("relu_grad", g, x, |gv, xv| if xv > Scalar::zero() { gv } else { Scalar::zero() });
    Tensor::new(g.shape().to_vec(), data)
}

pub fn transpose(x: &Tensor) -> Result<Tensor, EngineError> {
    let (r, c) = matrix_dims("transpose", x)?;
    let mut indices = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            indices.push(i * c + j);
        }
    }
    x.gather_flat(&indices, &[c, r])
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor, EngineError> {
    x.reshape(shape)
}

/// Collapses every dim into one.
pub fn flatten(x: &Tensor) -> Result<Tensor, EngineError> {
    x.reshape(&[x.numel()])
}

fn sum_typed<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc.plus(x))
}

/// Sum of all elements, as a 0-d tensor.
pub fn sum(x: &Tensor) -> Result<Tensor, EngineError> {
    let data = match x.data() {
        Data::F32(v) => Data::F32(vec![sum_typed(v)]),
        Data::F64(v) => Data::F64(vec![sum_typed(v)]),
        Data::I64(v) => Data::I64(vec![sum_typed(v)]),
        other => return Err(EngineError::Unsupported { op: "sum", dtype: other.dtype() }),
    };
    Tensor::new(vec![], data)
}

/// `sum(x) / denom`; `denom` is the global element count. Integer tensors
/// skip the division.
pub fn mean(x: &Tensor, denom: usize) -> Result<Tensor, EngineError> {
    if x.dtype() == DType::I64 {
        return sum(x);
    }
    scale_float("mean", &sum(x)?, denom as f64, true)
}

/// `scale` as an integer factor, if it is one.
fn integral(op: &'static str, scale: f64) -> Result<i64, EngineError> {
    if scale.fract() == 0.0 && scale.abs() < 9.0e15 {
        Ok(scale as i64)
    } else {
        Err(EngineError::Unsupported { op, dtype: DType::I64 })
    }
}

fn single_i64(g: &Tensor) -> Result<i64, EngineError> {
    match g.data() {
        Data::I64(v) if v.len() == 1 => Ok(v[0]),
        Data::I64(_) => Err(EngineError::NotScalar(g.shape().to_vec())),
        other => Err(EngineError::DTypeMismatch {
            op: "mse_grad",
            lhs: DType::I64,
            rhs: other.dtype(),
        }),
    }
}

/// `Σ (x − y)² / denom`; integer tensors skip the division.
pub fn mse_loss(x: &Tensor, y: &Tensor, denom: usize) -> Result<Tensor, EngineError> {
    same_shape("mse_loss", x, y)?;
    let d = denom as f64;
    let data = match (x.data(), y.data()) {
        (Data::F32(a), Data::F32(b)) => {
            let s = a.iter().zip(b).fold(0.0f32, |acc, (&p, &q)| acc + (p - q) * (p - q));
            Data::F32(vec![s / d as f32])
        }
        (Data::F64(a), Data::F64(b)) => {
            let s = a.iter().zip(b).fold(0.0f64, |acc, (&p, &q)| acc + (p - q) * (p - q));
            Data::F64(vec![s / d])
        }
        (Data::I64(a), Data::I64(b)) => Data::I64(vec![a.iter().zip(b).fold(0i64, |acc, (&p, &q)| {
            let e = p.minus(q);
            acc.plus(e.times(e))
        })]),
        (l, r) if l.dtype() != r.dtype() => {
            return Err(EngineError::DTypeMismatch { op: "mse_loss", lhs: l.dtype(), rhs: r.dtype() })
        }
        (l, _) => return Err(EngineError::Unsupported { op: "mse_loss", dtype: l.dtype() }),
    };
    Tensor::new(vec![], data)
}

/// `(x − y) · (2·g / denom)` with `g` a one-element upstream gradient;
/// `(x − y) · 2g` for integers.
pub fn mse_grad(x: &Tensor, y: &Tensor, g: &Tensor, denom: usize) -> Result<Tensor, EngineError> {
    same_shape("mse_grad", x, y)?;
    if x.dtype() == DType::I64 {
        let f = single_i64(g)?.times(2);
        let d = sub(x, y)?;
        let Data::I64(v) = d.data() else { unreachable!("integer difference") };
        return Tensor::new(x.shape().to_vec(), Data::I64(v.iter().map(|&e| e.times(f)).collect()));
    }
    let factor = 2.0 * g.item()? / denom as f64;
    scale_float("mse_grad", &sub(x, y)?, factor, false)
}

/// A tensor of `shape` filled with `g · factor`, `g` one element.
pub fn expand_scalar(g: &Tensor, shape: &[usize], factor: f64) -> Result<Tensor, EngineError> {
    let v = g.item()?;
    let n = numel(shape);
    let data = match g.dtype() {
        DType::F32 => Data::F32(vec![(v as f32) * (factor as f32); n]),
        DType::F64 => Data::F64(vec![v * factor; n]),
        DType::I64 => Data::I64(vec![single_i64(g)?.times(integral("expand", factor)?); n]),
        other => return Err(EngineError::Unsupported { op: "expand", dtype: other }),
    };
    Tensor::new(shape.to_vec(), data)
}

/// `x · scale` where `mask` holds, zero elsewhere.
pub fn dropout_apply(x: &Tensor, mask: &Tensor, scale: f64) -> Result<Tensor, EngineError> {
    same_shape("dropout_apply", x, mask)?;
    let keep = match mask.data() {
        Data::Bool(m) => m,
        other => {
            return Err(EngineError::DTypeMismatch {
                op: "dropout_apply",
                lhs: DType::Bool,
                rhs: other.dtype(),
            })
        }
    };
    let data = match x.data() {
        Data::F32(v) => Data::F32(v.iter().zip(keep).map(|(&a, &k)| if k { a * scale as f32 } else { 0.0 }).collect()),
        Data::F64(v) => Data::F64(v.iter().zip(keep).map(|(&a, &k)| if k { a * scale } else { 0.0 }).collect()),
        Data::I64(v) => {
            let f = integral("dropout_apply", scale)?;
            Data::I64(v.iter().zip(keep).map(|(&a, &k)| if k { a.times(f) } else { 0 }).collect())
        }
        other => return Err(EngineError::Unsupported { op: "dropout_apply", dtype: other.dtype() }),
    };
    Tensor::new(x.shape().to_vec(), data)
}

/// `w − lr · g`. Integer tensors take an integral `lr`, or `lr = 2^-k`
/// applied as an arithmetic shift of `g`.
pub fn sgd_update(w: &Tensor, g: &Tensor, lr: f64) -> Result<Tensor, EngineError> {
    same_shape("sgd", w, g)?;
    let data = match (w.data(), g.data()) {
        (Data::I64(a), Data::I64(b)) => {
            let step: Box<dyn Fn(i64) -> i64> = if lr >= 1.0 {
                let f = integral("sgd", lr)?;
                Box::new(move |q: i64| q.times(f))
            } else {
                let k = (1.0 / lr).log2();
                if lr <= 0.0 || k.fract() != 0.0 || k >= 63.0 {
                    return Err(EngineError::Unsupported { op: "sgd", dtype: DType::I64 });
                }
                let k = k as u32;
                Box::new(move |q: i64| q >> k)
            };
            Data::I64(a.iter().zip(b).map(|(&p, &q)| p.minus(step(q))).collect())
        }
        (Data::F32(a), Data::F32(b)) => Data::F32(a.iter().zip(b).map(|(&p, &q)| p - q * lr as f32).collect()),
        (Data::F64(a), Data::F64(b)) => Data::F64(a.iter().zip(b).map(|(&p, &q)| p - q * lr).collect()),
        (l, r) => return Err(EngineError::DTypeMismatch { op: "sgd", lhs: l.dtype(), rhs: r.dtype() }),
    };
    Tensor::new(w.shape().to_vec(), data)
}

/// Bitwise equality of two same-shape tensors.
pub fn equal(a: &Tensor, b: &Tensor) -> Result<bool, EngineError> {
    same_shape("equal", a, b)?;
    if a.dtype() != b.dtype() {
        return Err(EngineError::DTypeMismatch { op: "equal", lhs: a.dtype(), rhs: b.dtype() });
    }
    Ok(a.bit_eq(b))
}

/// `acc ← acc ⊕ x`.
pub fn reduce_into(acc: &mut Tensor, x: &Tensor, op: ReduceOp) -> Result<(), EngineError> {
    same_shape("reduce", acc, x)?;
    let out = match op {
        ReduceOp::Sum => zip_numeric!("reduce", acc, x, |p, q| p.plus(q)),
        ReduceOp::Max => zip_numeric!("reduce", acc, x, |p, q| max_scalar(p, q)),
    };
    *acc.data_mut() = out;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn mm_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(mm(&a, &id).unwrap().bit_eq(&a));
    }

    #[test]
    fn mm_matches_triple_loop() {
        // Small integers in f64: products and sums are exact.
        let a: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let out = mm(&t(&[5, 4], &a), &t(&[4, 3], &b)).unwrap();
        let mut expected = [0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                for p in 0..4 {
                    expected[i * 3 + j] += a[i * 4 + p] * b[p * 3 + j];
                }
            }
        }
        assert_eq!(out.as_f64().unwrap(), &expected[..]);
    }

    #[test]
    fn mm_shape_errors() {
        assert!(mm(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).is_err());
        assert!(mm(&t(&[6], &[0.0; 6]), &t(&[6], &[0.0; 6])).is_err());
    }

    #[test]
    fn add_zeros_identity() {
        let a = t(&[3], &[1.5, -2.0, 3.25]);
        let z = Tensor::zeros(&[3], DType::F64);
        assert!(add(&a, &z).unwrap().bit_eq(&a));
        assert!(add(&a, &t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let a = t(&[1], &[1.0]);
        let b = Tensor::from_f32(&[1], vec![1.0]).unwrap();
        assert!(matches!(add(&a, &b), Err(EngineError::DTypeMismatch { .. })));
    }

    #[test]
    fn relu_and_grad() {
        let x = t(&[4], &[-1.0, 0.0, 2.0, -3.0]);
        assert_eq!(relu(&x).unwrap().as_f64().unwrap(), &[0.0, 0.0, 2.0, 0.0]);
        let g = t(&[4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(relu_grad(&g, &x).unwrap().as_f64().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn transpose_2d() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = transpose(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.as_f64().unwrap(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reductions() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum(&x).unwrap().item().unwrap(), 10.0);
        assert_eq!(mean(&x, 4).unwrap().item().unwrap(), 2.5);
        let y = t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mse_loss(&x, &y, 4).unwrap().item().unwrap(), 7.5);
        let g = Tensor::scalar_f64(1.0);
        // 2(x − y)/n
        assert_eq!(mse_grad(&x, &y, &g, 4).unwrap().as_f64().unwrap(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn equal_is_bitwise() {
        let a = t(&[2], &[1.0, 2.0]);
        assert!(equal(&a, &a).unwrap());
        let b = t(&[2], &[1.0, 2.0 + f64::EPSILON * 2.0]);
        assert!(!equal(&a, &b).unwrap());
        assert!(equal(&a, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn dropout_apply_masks_and_scales() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let m = Tensor::from_bool(&[3], vec![true, false, true]).unwrap();
        assert_eq!(dropout_apply(&x, &m, 2.0).unwrap().as_f64().unwrap(), &[2.0, 0.0, 6.0]);
    }

    #[test]
    fn reduce_into_sum_and_max() {
        let mut acc = Tensor::from_i64(&[2], vec![1, 5]).unwrap();
        reduce_into(&mut acc, &Tensor::from_i64(&[2], vec![3, 2]).unwrap(), ReduceOp::Sum).unwrap();
        assert_eq!(acc.data(), &Data::I64(vec![4, 7]));
        reduce_into(&mut acc, &Tensor::from_i64(&[2], vec![9, 0]).unwrap(), ReduceOp::Max).unwrap();
        assert_eq!(acc.data(), &Data::I64(vec![9, 7]));
    }
}

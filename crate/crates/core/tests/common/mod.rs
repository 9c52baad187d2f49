//! Builders and oracles shared by the integration tests.
#![allow(dead_code)]

use dtsim::dtensor::{DTensor, DTensorMeta};
use dtsim::engine::{DType, Data, Tensor};
use dtsim::mesh::DeviceMesh;
use dtsim::placement::{Placement, ShardSpec};
use dtsim::rng::{random_tensor, Distribution, RngState};

pub fn mesh(shape: &[usize]) -> DeviceMesh {
    let names: Vec<String> = (0..shape.len()).map(|i| format!("d{i}")).collect();
    let dims: Vec<(&str, usize)> = names.iter().map(|n| n.as_str()).zip(shape.iter().copied()).collect();
    DeviceMesh::from_shape("m", &dims).unwrap()
}

pub fn values(dtype: DType) -> Distribution {
    match dtype {
        DType::I64 => Distribution::Randint { lo: -1000, hi: 1000 },
        d => Distribution::standard_normal(d),
    }
}

/// The distinct contributions of a Partial tensor: one per coordinate of
/// its Partial mesh dims, in row-major order of those coordinates.
pub fn partial_terms(mesh: &DeviceMesh, placements: &[Placement], shape: &[usize], dtype: DType, seed: u64) -> Vec<Tensor> {
    let partial: Vec<usize> = (0..mesh.ndim()).filter(|&d| placements[d].is_partial()).collect();
    let count: usize = partial.iter().map(|&d| mesh.dim_size(d)).product();
    let mut state = RngState::new(seed);
    (0..count).map(|_| random_tensor(shape, &values(dtype), &mut state, 1).unwrap()).collect()
}

fn partial_key(mesh: &DeviceMesh, placements: &[Placement], coord: &[usize]) -> usize {
    let mut key = 0;
    for d in 0..mesh.ndim() {
        if placements[d].is_partial() {
            key = key * mesh.dim_size(d) + coord[d];
        }
    }
    key
}

/// A tensor that is Partial on some mesh dims and Replicate on the rest,
/// with independent random values per Partial coordinate.
pub fn partial_dtensor(mesh: &DeviceMesh, placements: &[Placement], shape: &[usize], dtype: DType, seed: u64) -> (DTensor, Vec<Tensor>) {
    let terms = partial_terms(mesh, placements, shape, dtype, seed);
    let locals = mesh.coords().map(|c| terms[partial_key(mesh, placements, &c)].clone()).collect();
    let meta = DTensorMeta::new(shape.to_vec(), ShardSpec::new(mesh.clone(), placements.to_vec()), dtype).unwrap();
    (DTensor::from_locals(meta, locals).unwrap(), terms)
}

/// Sum of `terms` in order, with wrapping integer arithmetic, and the sum of
/// absolute values as an error scale.
pub fn sum_terms(terms: &[Tensor]) -> (Tensor, Vec<f64>) {
    let shape = terms[0].shape().to_vec();
    match terms[0].data() {
        Data::I64(_) => {
            let mut acc = vec![0i64; terms[0].numel()];
            for t in terms {
                let Data::I64(v) = t.data() else { unreachable!() };
                acc.iter_mut().zip(v).for_each(|(a, x)| *a = a.wrapping_add(*x));
            }
            (Tensor::from_i64(&shape, acc).unwrap(), vec![0.0; terms[0].numel()])
        }
        _ => {
            let mut acc = vec![0.0; terms[0].numel()];
            let mut scale = vec![0.0; terms[0].numel()];
            for t in terms {
                for (i, x) in t.to_f64_vec().into_iter().enumerate() {
                    acc[i] += x;
                    scale[i] += x.abs();
                }
            }
            (Tensor::from_f64(&shape, acc).unwrap(), scale)
        }
    }
}

/// Integers bitwise; floats within `tol` of the per-element `scale`.
pub fn close(a: &Tensor, b: &Tensor, scale: &[f64], tol: f64) -> bool {
    if a.dtype() != b.dtype() || a.shape() != b.shape() {
        return false;
    }
    if a.dtype() == DType::I64 {
        return a.bit_eq(b);
    }
    a.to_f64_vec().iter().zip(b.to_f64_vec()).zip(scale).all(|((x, y), s)| (x - y).abs() <= tol * s.max(f64::MIN_POSITIVE))
}

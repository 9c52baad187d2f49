//! Gradient reduction for Partial gradients: per tensor, bucketed per mesh
//! dim, or fused over the flattened set of Partial dims.

use serde::{Deserialize, Serialize};

use super::Ledger;
use crate::dtensor::DTensor;
use crate::engine::{DType, Data, ReduceOp, Tensor};
use crate::placement::Placement;
use crate::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketInfo {
    /// Mesh dims reduced by this bucket, joined by `_`.
    pub dims: String,
    /// Indices into the gradient list, in packing order.
    pub members: Vec<usize>,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReduceReport {
    pub buckets: Vec<BucketInfo>,
    /// Gradients left alone because no mesh dim is Partial.
    pub skipped: Vec<usize>,
    pub collectives: usize,
}

/// Ledger label of a bucket; equal membership gives equal labels.
pub fn bucket_label(members: &[usize]) -> String {
    let ids: Vec<String> = members.iter().map(|m| m.to_string()).collect();
    format!("bucket:{}", ids.join("+"))
}

fn partial_op(g: &DTensor, dim: usize) -> Option<ReduceOp> {
    match g.placements()[dim] {
        Placement::Partial(op) => Some(op),
        _ => None,
    }
}

fn check_same_mesh(grads: &[DTensor]) -> Result<(), Error> {
    if let Some(first) = grads.first() {
        if let Some(other) = grads.iter().find(|g| g.mesh() != first.mesh()) {
            return Err(Error::MeshMismatch {
                expected: first.mesh().name().to_string(),
                actual: other.mesh().name().to_string(),
            });
        }
    }
    Ok(())
}

fn flatten_concat(parts: &[&Tensor], dtype: DType) -> Tensor {
    let n: usize = parts.iter().map(|t| t.numel()).sum();
    macro_rules! cat {
        ($variant:ident) => {{
            let mut v = Vec::with_capacity(n);
            for p in parts {
                if let Data::$variant(x) = p.data() {
                    v.extend_from_slice(x);
                }
            }
            Data::$variant(v)
        }};
    }
    let data = match dtype {
        DType::F32 => cat!(F32),
        DType::F64 => cat!(F64),
        DType::I64 => cat!(I64),
        DType::Bool => cat!(Bool),
    };
    Tensor::new(vec![n], data).expect("length matches")
}

fn split_flat(buf: &Tensor, shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut start = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let idx: Vec<usize> = (start..start + n).collect();
        out.push(buf.gather_flat(&idx, shape).expect("in range"));
        start += n;
    }
    out
}

/// Greedy packing in the given order; a member larger than the capacity gets
/// a bucket of its own.
fn pack_buckets(order: &[usize], sizes: &[usize], capacity: usize) -> Vec<Vec<usize>> {
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for &g in order {
        let s = sizes[g];
        if !cur.is_empty() && used + s > capacity {
            buckets.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(g);
        used += s;
    }
    if !cur.is_empty() {
        buckets.push(cur);
    }
    buckets
}

/// Packs `members`, all-reduces the packed buffer over `dims` and unpacks,
/// flipping those dims to Replicate.
fn reduce_bucket(grads: &mut [DTensor], members: &[usize], dims: &[usize], op: ReduceOp, ledger: &mut Ledger) -> Result<(), Error> {
    let mesh = grads[members[0]].mesh().clone();
    let dtype = grads[members[0]].dtype();
    let mut bufs: Vec<Tensor> = (0..mesh.size())
        .map(|dev| {
            let parts: Vec<&Tensor> = members.iter().map(|&g| grads[g].local(dev)).collect();
            flatten_concat(&parts, dtype)
        })
        .collect();
    ledger.all_reduce(&mesh, dims, &mut bufs, op, &bucket_label(members))?;
    for dev in 0..mesh.size() {
        let shapes: Vec<Vec<usize>> = members.iter().map(|&g| grads[g].local(dev).shape().to_vec()).collect();
        for (&g, t) in members.iter().zip(split_flat(&bufs[dev], &shapes)) {
            grads[g].locals_mut()[dev] = t;
        }
    }
    for &g in members {
        let mut pl = grads[g].placements().to_vec();
        for &d in dims {
            pl[d] = Placement::Replicate;
        }
        grads[g] = grads[g].relabel(pl)?;
    }
    Ok(())
}

/// Reference reduction: one AllReduce per gradient per Partial dim.
pub fn per_tensor_grad_reduce(grads: &mut [DTensor], ledger: &mut Ledger) -> Result<ReduceReport, Error> {
    check_same_mesh(grads)?;
    let mut report = ReduceReport::default();
    for g in 0..grads.len() {
        let partial = grads[g].meta.spec.partial_dims();
        if partial.is_empty() {
            report.skipped.push(g);
            continue;
        }
        for d in partial {
            let op = partial_op(&grads[g], d).expect("partial");
            reduce_bucket(grads, &[g], &[d], op, ledger)?;
            report.collectives += 1;
        }
    }
    Ok(report)
}

/// For each mesh dim in order: collect gradients Partial on it in reverse
/// creation order, pack them into buckets of `bucket_bytes`, all-reduce each
/// bucket along that dim and flip the dim to Replicate.
pub fn bucketed_grad_reduce(grads: &mut [DTensor], bucket_bytes: usize, ledger: &mut Ledger) -> Result<ReduceReport, Error> {
    check_same_mesh(grads)?;
    let mut report = ReduceReport::default();
    report.skipped = (0..grads.len()).filter(|&g| grads[g].meta.spec.partial_dims().is_empty()).collect();
    let Some(first) = grads.first() else { return Ok(report) };
    let mesh = first.mesh().clone();
    let sizes: Vec<usize> = grads.iter().map(DTensor::max_local_bytes).collect();
    for d in 0..mesh.ndim() {
        let mut keys: Vec<(ReduceOp, DType)> = Vec::new();
        for g in (0..grads.len()).rev() {
            if let Some(op) = partial_op(&grads[g], d) {
                if !keys.contains(&(op, grads[g].dtype())) {
                    keys.push((op, grads[g].dtype()));
                }
            }
        }
        for (op, dtype) in keys {
            let order: Vec<usize> = (0..grads.len())
                .rev()
                .filter(|&g| partial_op(&grads[g], d) == Some(op) && grads[g].dtype() == dtype)
                .collect();
            for members in pack_buckets(&order, &sizes, bucket_bytes) {
                reduce_bucket(grads, &members, &[d], op, ledger)?;
                report.collectives += 1;
                report.buckets.push(BucketInfo {
                    dims: mesh.dims()[d].name.clone(),
                    bytes: members.iter().map(|&g| sizes[g]).sum(),
                    members,
                });
            }
        }
    }
    Ok(report)
}

/// Groups gradients by their full set of Partial dims, flattens that set into
/// one mesh dim and issues a single bucketed AllReduce over it.
pub fn fused_nd_grad_reduce(grads: &mut [DTensor], bucket_bytes: usize, ledger: &mut Ledger) -> Result<ReduceReport, Error> {
    check_same_mesh(grads)?;
    let mut report = ReduceReport::default();
    let Some(first) = grads.first() else { return Ok(report) };
    let mesh = first.mesh().clone();
    let sizes: Vec<usize> = grads.iter().map(DTensor::max_local_bytes).collect();
    type Key = (Vec<usize>, ReduceOp, DType);
    let mut keys: Vec<Key> = Vec::new();
    let mut key_of: Vec<Option<Key>> = vec![None; grads.len()];
    for g in (0..grads.len()).rev() {
        let dims = grads[g].meta.spec.partial_dims();
        if dims.is_empty() {
            continue;
        }
        let ops: Vec<ReduceOp> = dims.iter().map(|&d| partial_op(&grads[g], d).expect("partial")).collect();
        if ops.iter().any(|&o| o != ops[0]) {
            return Err(Error::MixedPartialOps(g));
        }
        let key = (dims, ops[0], grads[g].dtype());
        if !keys.contains(&key) {
            keys.push(key.clone());
        }
        key_of[g] = Some(key);
    }
    report.skipped = (0..grads.len()).filter(|&g| key_of[g].is_none()).collect();
    for key in keys {
        let (dims, op, _) = &key;
        let names: Vec<&str> = dims.iter().map(|&d| mesh.dims()[d].name.as_str()).collect();
        let flat = mesh.flatten_dims(&names)?;
        let order: Vec<usize> = (0..grads.len()).rev().filter(|&g| key_of[g].as_ref() == Some(&key)).collect();
        for members in pack_buckets(&order, &sizes, bucket_bytes) {
            reduce_bucket(grads, &members, dims, *op, ledger)?;
            report.collectives += 1;
            report.buckets.push(BucketInfo {
                dims: flat.dims()[dims[0]].name.clone(),
                bytes: members.iter().map(|&g| sizes[g]).sum(),
                members,
            });
        }
    }
    Ok(report)
}

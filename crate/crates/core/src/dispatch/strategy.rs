//! Per-op sharding strategies and the search that picks input placements.

use crate::dtensor::DTensorMeta;
use crate::engine::{numel, Op};
use crate::mesh::DeviceMesh;
use crate::placement::{dim_index, Placement, ShardSpec};

/// One admissible (inputs → output) combination on a single mesh dim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub inputs: Vec<Placement>,
    pub output: Placement,
}

fn e(inputs: &[Placement], output: Placement) -> Entry {
    Entry {
        inputs: inputs.to_vec(),
        output,
    }
}

/// Chosen placements for every operand plus the output metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PropResult {
    pub inputs: Vec<Vec<Placement>>,
    pub output: DTensorMeta,
    /// Estimated redistribution bytes of the choice.
    pub cost: f64,
}

const R: Placement = Placement::Replicate;
const P: Placement = Placement::P;

/// Shard placements an operand of `ndim` dims may keep: `S(d)` for every dim
/// plus any interleaved placement already present on an input.
fn shardlikes(metas: &[&DTensorMeta], ndim: usize) -> Vec<Placement> {
    let mut out: Vec<Placement> = (0..ndim).map(Placement::Shard).collect();
    for m in metas {
        for p in m.placements() {
            if matches!(p, Placement::InterleavedShard { .. }) && !out.contains(p) {
                out.push(*p);
            }
        }
    }
    out
}

/// Expands `(X, X, …) → X` for replicate and every shard-like placement.
fn same_everywhere(n: usize, xs: &[Placement]) -> Vec<Entry> {
    let mut out = vec![e(&vec![R; n], R)];
    for &x in xs {
        out.push(e(&vec![x; n], x));
    }
    out
}

/// Strategy entries of `op` on mesh dim `mesh_dim`, in registration order.
pub fn dim_entries(op: &Op, metas: &[&DTensorMeta], mesh_dim: usize) -> Vec<Entry> {
    let nd = metas[0].global_shape.len();
    let xs = shardlikes(metas, nd);
    match op {
        Op::Mm => vec![
            e(&[R, R], R),
            e(&[Placement::Shard(0), R], Placement::Shard(0)),
            e(&[R, Placement::Shard(1)], Placement::Shard(1)),
            e(&[Placement::Shard(1), Placement::Shard(0)], P),
            e(&[P, R], P),
            e(&[R, P], P),
        ],
        Op::Add => {
            let mut v = same_everywhere(2, &xs);
            v.push(e(&[P, P], P));
            v
        }
        Op::Mul => {
            let mut v = same_everywhere(2, &xs);
            v.push(e(&[P, R], P));
            v.push(e(&[R, P], P));
            v
        }
        Op::Relu | Op::Bernoulli { .. } => same_everywhere(1, &xs),
        Op::ReluGrad | Op::DropoutApply { .. } => {
            let mut v = same_everywhere(2, &xs);
            v.push(e(&[P, R], P));
            v
        }
        Op::SgdUpdate { .. } => same_everywhere(2, &xs),
        Op::Transpose => vec![
            e(&[R], R),
            e(&[Placement::Shard(0)], Placement::Shard(1)),
            e(&[Placement::Shard(1)], Placement::Shard(0)),
            e(&[P], P),
        ],
        Op::Sum | Op::Mean => {
            let mut v = vec![e(&[R], R)];
            for &x in &xs {
                v.push(e(&[x], P));
            }
            v.push(e(&[P], P));
            v
        }
        Op::MseLoss => {
            let mut v = vec![e(&[R, R], R)];
            for &x in &xs {
                v.push(e(&[x, x], P));
            }
            v
        }
        Op::MseGrad => {
            let mut v = vec![e(&[R, R, R], R)];
            for &x in &xs {
                v.push(e(&[x, x, R], x));
            }
            v
        }
        Op::ExpandSum(_) | Op::ExpandMean(_) => vec![e(&[R], R), e(&[P], P)],
        Op::Reshape(new_shape) => {
            let mut v = vec![e(&[R], R), e(&[P], P)];
            let p = metas[0].mesh().dim_size(mesh_dim);
            for &x in &xs {
                if let Some(y) = reshape_image(&metas[0].global_shape, new_shape, x, p) {
                    v.push(e(&[x], y));
                }
            }
            v
        }
    }
}

/// Global flat indices owned by shard `k` of `p` under `pl`, in local order.
fn owned_sequence(shape: &[usize], pl: Placement, p: usize, k: usize) -> Option<Vec<usize>> {
    let mesh = DeviceMesh::from_shape("probe", &[("x", p)]).ok()?;
    let spec = ShardSpec::new(mesh, vec![pl]);
    spec.validate(shape).ok()?;
    Some(spec.view(shape, &[k]).ok()?.global_indices())
}

/// Output placement whose shards hold exactly the elements of `pl`'s shards,
/// in the same local order, after reshaping `from` to `to`.
pub fn reshape_image(from: &[usize], to: &[usize], pl: Placement, p: usize) -> Option<Placement> {
    let src: Vec<Vec<usize>> = (0..p).map(|k| owned_sequence(from, pl, p, k)).collect::<Option<_>>()?;
    let mut candidates: Vec<Placement> = (0..to.len()).map(Placement::Shard).collect();
    for (d, &ext) in to.iter().enumerate() {
        for m in 2..=ext {
            if ext % m == 0 {
                candidates.push(Placement::InterleavedShard { dim: d, m });
            }
        }
    }
    candidates.into_iter().find(|&c| (0..p).all(|k| owned_sequence(to, c, p, k).as_ref() == Some(&src[k])))
}

/// Largest local element count over devices.
fn max_local_numel(shape: &[usize], placements: &[Placement], mesh: &DeviceMesh) -> usize {
    let mut dims = shape.to_vec();
    for (i, pl) in placements.iter().enumerate() {
        if let Some(d) = pl.shard_dim() {
            dims[d] = dim_index(pl, dims[d], mesh.dim_size(i), 0).len();
        }
    }
    numel(&dims)
}

/// Bytes moved per device by the two-phase redistribution, or `None` when
/// the transition is not supported.
pub fn redistribution_cost(meta: &DTensorMeta, dst: &[Placement]) -> Option<f64> {
    let mesh = meta.mesh();
    let shape = &meta.global_shape;
    let elem = meta.dtype.size_bytes() as f64;
    let mut cur = meta.placements().to_vec();
    for (s, d) in cur.iter().zip(dst) {
        if s != d && (d.is_partial() || (s.is_partial() && matches!(d, Placement::InterleavedShard { .. }))) {
            return None;
        }
    }
    let mut cost = 0.0;
    for i in 0..cur.len() {
        let (s, d) = (cur[i], dst[i]);
        if s == d {
            continue;
        }
        let frac = (mesh.dim_size(i) - 1) as f64 / mesh.dim_size(i) as f64;
        if s.is_shard() {
            cur[i] = R;
            cost += max_local_numel(shape, &cur, mesh) as f64 * elem * frac;
        } else if s.is_partial() && d.is_replicate() {
            cost += 2.0 * max_local_numel(shape, &cur, mesh) as f64 * elem * frac;
            cur[i] = R;
        }
    }
    for i in 0..cur.len() {
        let (s, d) = (cur[i], dst[i]);
        if s == d || !d.is_shard() {
            continue;
        }
        let frac = (mesh.dim_size(i) - 1) as f64 / mesh.dim_size(i) as f64;
        if s.is_partial() {
            cost += max_local_numel(shape, &cur, mesh) as f64 * elem * frac;
        }
        cur[i] = d;
    }
    Some(cost)
}

/// Whether a reshape with these placements keeps every device's elements in
/// order.
fn reshape_consistent(from: &DTensorMeta, to_shape: &[usize], out: &[Placement]) -> bool {
    let out_spec = ShardSpec::new(from.mesh().clone(), out.to_vec());
    if out_spec.validate(to_shape).is_err() {
        return false;
    }
    from.mesh().coords().all(|c| match (from.view(&c), out_spec.view(to_shape, &c)) {
        (Ok(a), Ok(b)) => a.global_indices() == b.global_indices(),
        _ => false,
    })
}

/// Cartesian product over mesh dims of the per-dim entries; keeps valid
/// combinations and returns the cheapest, earliest-registered one.
pub fn propagate(op: &Op, metas: &[&DTensorMeta]) -> Option<PropResult> {
    let mesh = metas[0].mesh().clone();
    let shapes: Vec<&[usize]> = metas.iter().map(|m| m.global_shape.as_slice()).collect();
    let out_shape = op.out_shape(&shapes).ok()?;
    let per_dim: Vec<Vec<Entry>> = (0..mesh.ndim()).map(|i| dim_entries(op, metas, i)).collect();
    let mut best: Option<PropResult> = None;
    let total: usize = per_dim.iter().map(Vec::len).product();
    for combo in 0..total {
        let picks = crate::mesh::digits(combo, per_dim.iter().map(Vec::len));
        let chosen: Vec<Vec<Placement>> = (0..metas.len())
            .map(|k| (0..mesh.ndim()).map(|i| per_dim[i][picks[i]].inputs[k]).collect())
            .collect();
        let out: Vec<Placement> = (0..mesh.ndim()).map(|i| per_dim[i][picks[i]].output).collect();
        let Ok(out_meta) = DTensorMeta::new(out_shape.clone(), ShardSpec::new(mesh.clone(), out.clone()), op.out_dtype(metas[0].dtype)) else {
            continue;
        };
        let mut cost = 0.0;
        let mut ok = true;
        for (k, meta) in metas.iter().enumerate() {
            if ShardSpec::new(mesh.clone(), chosen[k].clone()).validate(&meta.global_shape).is_err() {
                ok = false;
                break;
            }
            match redistribution_cost(meta, &chosen[k]) {
                Some(c) => cost += c,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        if let Op::Reshape(to) = op {
            let Ok(src) = metas[0].with_placements(chosen[0].clone()) else { continue };
            if !reshape_consistent(&src, to, &out) {
                continue;
            }
        }
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(PropResult {
                inputs: chosen,
                output: out_meta,
                cost,
            });
        }
    }
    best
}

/// The entry matching the current placements exactly on every mesh dim.
pub fn lookup_exact(op: &Op, metas: &[&DTensorMeta]) -> Option<Vec<Placement>> {
    let mesh = metas[0].mesh();
    let mut out = Vec::with_capacity(mesh.ndim());
    for i in 0..mesh.ndim() {
        let current: Vec<Placement> = metas.iter().map(|m| m.placements()[i]).collect();
        let entry = dim_entries(op, metas, i).into_iter().find(|e| e.inputs == current)?;
        out.push(entry.output);
    }
    Some(out)
}

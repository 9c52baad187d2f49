//! Placement kinds and the index math relating a local shard to its global
//! tensor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{kernels, row_major_strides, DType, EngineError, ReduceOp, Tensor};
use crate::mesh::DeviceMesh;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("cannot parse placement `{0}`")]
    Parse(String),
    #[error("expected {expected} placements (one per mesh dim), got {actual}")]
    PlacementCount { expected: usize, actual: usize },
    #[error("placement dim {dim} out of range for a {ndim}-d tensor")]
    DimOutOfRange { dim: usize, ndim: usize },
    #[error("tensor dim {0} combines an interleaved shard with another shard")]
    DoubleShard(usize),
    #[error("interleaved size must be at least 1")]
    ZeroInterleave,
    #[error("IS({dim},{m}) over {p} devices does not divide extent {extent}")]
    Interleave { dim: usize, m: usize, p: usize, extent: usize },
    #[error("Partial cannot be combined with InterleavedShard")]
    PartialInterleave,
    #[error("expected {expected} local tensors, got {actual}")]
    LocalCount { expected: usize, actual: usize },
    #[error("local at {coord:?} has shape {actual:?}, expected {expected:?}")]
    LocalShape {
        coord: Vec<usize>,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("local at {coord:?} has dtype {actual}, expected {expected}")]
    LocalDType { coord: Vec<usize>, expected: DType, actual: DType },
    #[error("replica at {coord:?} differs from its peers")]
    ReplicaMismatch { coord: Vec<usize> },
    #[error("local index {index} out of range for {len} elements")]
    LocalIndex { index: usize, len: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// How a tensor is laid out along one mesh dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Shard(usize),
    Replicate,
    Partial(ReduceOp),
    InterleavedShard { dim: usize, m: usize },
}

impl Placement {
    pub const P: Placement = Placement::Partial(ReduceOp::Sum);

    /// Tensor dim split by this placement, if any.
    pub fn shard_dim(&self) -> Option<usize> {
        match self {
            Placement::Shard(d) | Placement::InterleavedShard { dim: d, .. } => Some(*d),
            _ => None,
        }
    }

    pub fn is_shard(&self) -> bool {
        self.shard_dim().is_some()
    }

    pub fn is_partial(&self) -> bool {
        matches!(self, Placement::Partial(_))
    }

    pub fn is_replicate(&self) -> bool {
        matches!(self, Placement::Replicate)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Shard(d) => write!(f, "S({d})"),
            Placement::Replicate => f.write_str("R"),
            Placement::Partial(ReduceOp::Sum) => f.write_str("P"),
            Placement::Partial(ReduceOp::Max) => f.write_str("P(max)"),
            Placement::InterleavedShard { dim, m } => write!(f, "IS({dim},{m})"),
        }
    }
}

fn parse_args(s: &str, prefix: &str) -> Option<Vec<usize>> {
    let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
    inner.split(',').map(|a| a.trim().parse().ok()).collect()
}

impl FromStr for Placement {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || PlacementError::Parse(s.to_string());
        match s {
            "R" => return Ok(Placement::Replicate),
            "P" | "P(sum)" => return Ok(Placement::P),
            "P(max)" => return Ok(Placement::Partial(ReduceOp::Max)),
            _ => {}
        }
        if s.starts_with("IS") {
            return match parse_args(s, "IS").as_deref() {
                Some(&[dim, m]) => Ok(Placement::InterleavedShard { dim, m }),
                _ => Err(bad()),
            };
        }
        match parse_args(s, "S").as_deref() {
            Some(&[d]) => Ok(Placement::Shard(d)),
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-joined placement list such as `S(0),R` or `IS(0,2),P`.
pub fn parse_placements(s: &str) -> Result<Vec<Placement>, PlacementError> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(s[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    if s.trim().is_empty() {
        return Err(PlacementError::Parse(s.to_string()));
    }
    out.push(s[start..].parse()?);
    Ok(out)
}

pub fn format_placements(ps: &[Placement]) -> String {
    ps.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

/// Per-tensor-dim index set owned by one shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DimIndex {
    Range { start: usize, len: usize },
    Indices(Vec<usize>),
}

impl DimIndex {
    pub fn len(&self) -> usize {
        match self {
            DimIndex::Range { len, .. } => *len,
            DimIndex::Indices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global coordinate of local coordinate `c`.
    pub fn at(&self, c: usize) -> usize {
        match self {
            DimIndex::Range { start, .. } => start + c,
            DimIndex::Indices(v) => v[c],
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            DimIndex::Range { start, len } => (*start..start + len).collect(),
            DimIndex::Indices(v) => v.clone(),
        }
    }

    /// `self` indexes positions of `outer`; returns the global coordinates.
    pub fn compose_onto(self, outer: &DimIndex) -> DimIndex {
        match (outer, &self) {
            (DimIndex::Range { start: o, .. }, DimIndex::Range { start, len }) => DimIndex::Range { start: o + start, len: *len },
            _ => DimIndex::Indices((0..self.len()).map(|c| outer.at(self.at(c))).collect()),
        }
    }
}

/// Index set of shard `k` of `p` along a dim of length `extent`.
pub fn dim_index(placement: &Placement, extent: usize, p: usize, k: usize) -> DimIndex {
    match *placement {
        Placement::Shard(_) => {
            let block = extent.div_ceil(p);
            let start = (k * block).min(extent);
            let end = (start + block).min(extent);
            DimIndex::Range {
                start,
                len: end - start,
            }
        }
        Placement::InterleavedShard { m, .. } => {
            let group = extent / m;
            let block = group / p;
            let mut v = Vec::with_capacity(m * block);
            for g in 0..m {
                let base = g * group + k * block;
                v.extend(base..base + block);
            }
            DimIndex::Indices(v)
        }
        _ => DimIndex::Range { start: 0, len: extent },
    }
}

/// Placements of a tensor over every dim of a mesh.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub mesh: DeviceMesh,
    pub placements: Vec<Placement>,
}

impl ShardSpec {
    pub fn new(mesh: DeviceMesh, placements: Vec<Placement>) -> Self {
        Self { mesh, placements }
    }

    pub fn replicate(mesh: DeviceMesh) -> Self {
        let n = mesh.ndim();
        Self::new(mesh, vec![Placement::Replicate; n])
    }

    pub fn partial_dims(&self) -> Vec<usize> {
        (0..self.placements.len()).filter(|&i| self.placements[i].is_partial()).collect()
    }

    pub fn is_replicate(&self) -> bool {
        self.placements.iter().all(Placement::is_replicate)
    }

    pub fn validate(&self, global_shape: &[usize]) -> Result<(), PlacementError> {
        let n = self.mesh.ndim();
        if self.placements.len() != n {
            return Err(PlacementError::PlacementCount {
                expected: n,
                actual: self.placements.len(),
            });
        }
        let mut sharded: Vec<Option<bool>> = vec![None; global_shape.len()];
        let mut has_partial = false;
        let mut has_interleave = false;
        for (i, pl) in self.placements.iter().enumerate() {
            has_partial |= pl.is_partial();
            if let Some(d) = pl.shard_dim() {
                if d >= global_shape.len() {
                    return Err(PlacementError::DimOutOfRange {
                        dim: d,
                        ndim: global_shape.len(),
                    });
                }
                let interleaved = matches!(pl, Placement::InterleavedShard { .. });
                match sharded[d] {
                    Some(prev) if prev || interleaved => return Err(PlacementError::DoubleShard(d)),
                    _ => sharded[d] = Some(interleaved),
                }
            }
            if let Placement::InterleavedShard { dim, m } = *pl {
                has_interleave = true;
                if m == 0 {
                    return Err(PlacementError::ZeroInterleave);
                }
                let p = self.mesh.dim_size(i);
                let extent = global_shape[dim];
                if !extent.is_multiple_of(m) || !(extent / m).is_multiple_of(p) {
                    return Err(PlacementError::Interleave { dim, m, p, extent });
                }
            }
        }
        if has_partial && has_interleave {
            return Err(PlacementError::PartialInterleave);
        }
        Ok(())
    }

    /// Shard view of the device at `coord`.
    pub fn view(&self, global_shape: &[usize], coord: &[usize]) -> Result<ShardView, PlacementError> {
        local_shape_and_offset(self, global_shape, coord)
    }
}

impl fmt::Display for ShardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_placements(&self.placements))
    }
}

/// Global/local geometry of one shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardView {
    pub global_shape: Vec<usize>,
    pub global_stride: Vec<usize>,
    pub local_shape: Vec<usize>,
    pub dims: Vec<DimIndex>,
}

impl ShardView {
    /// Unsharded view of the whole tensor.
    pub fn full(global_shape: &[usize]) -> Self {
        Self {
            global_shape: global_shape.to_vec(),
            global_stride: row_major_strides(global_shape),
            local_shape: global_shape.to_vec(),
            dims: global_shape.iter().map(|&len| DimIndex::Range { start: 0, len }).collect(),
        }
    }

    pub fn ndim(&self) -> usize {
        self.global_shape.len()
    }

    pub fn numel(&self) -> usize {
        self.local_shape.iter().product()
    }

    /// Start coordinate per dim (first owned index for interleaved dims).
    pub fn local_offset(&self) -> Vec<usize> {
        self.dims
            .iter()
            .map(|d| match d {
                DimIndex::Range { start, .. } => *start,
                DimIndex::Indices(v) => v.first().copied().unwrap_or(0),
            })
            .collect()
    }

    pub fn is_contiguous(&self) -> bool {
        self.dims.iter().all(|d| matches!(d, DimIndex::Range { .. }))
    }

    /// Peels `i` into local coordinates from the last dim to the first and
    /// accumulates the matching global coordinates against the global stride.
    pub fn local_to_global(&self, i: usize) -> Result<usize, PlacementError> {
        let len = self.numel();
        if i >= len {
            return Err(PlacementError::LocalIndex { index: i, len });
        }
        Ok(self.local_to_global_unchecked(i))
    }

    pub(crate) fn local_to_global_unchecked(&self, mut i: usize) -> usize {
        let mut j = 0;
        for d in (0..self.ndim()).rev() {
            let c = i % self.local_shape[d];
            i /= self.local_shape[d];
            j += self.dims[d].at(c) * self.global_stride[d];
        }
        j
    }

    /// Global flat index of every local element, in local order.
    pub fn global_indices(&self) -> Vec<usize> {
        let mut out = vec![0usize];
        for d in 0..self.ndim() {
            let idx = self.dims[d].to_vec();
            let stride = self.global_stride[d];
            let mut next = Vec::with_capacity(out.len() * idx.len());
            for &base in &out {
                next.extend(idx.iter().map(|&g| base + g * stride));
            }
            out = next;
        }
        out
    }
}

pub fn local_shape_and_offset(spec: &ShardSpec, global_shape: &[usize], coord: &[usize]) -> Result<ShardView, PlacementError> {
    spec.validate(global_shape)?;
    let mut view = ShardView::full(global_shape);
    for (i, pl) in spec.placements.iter().enumerate() {
        if let Some(d) = pl.shard_dim() {
            let idx = dim_index(pl, view.local_shape[d], spec.mesh.dim_size(i), coord[i]).compose_onto(&view.dims[d]);
            view.local_shape[d] = idx.len();
            view.dims[d] = idx;
        }
    }
    Ok(view)
}

/// Exact per-device slices of `global`. Partial dims put the whole value on
/// coordinate 0 and zeros elsewhere.
pub fn shard_tensor(global: &Tensor, spec: &ShardSpec) -> Result<Vec<Tensor>, PlacementError> {
    let shape = global.shape();
    spec.validate(shape)?;
    let partial = spec.partial_dims();
    spec.mesh
        .coords()
        .map(|coord| {
            let view = spec.view(shape, &coord)?;
            if partial.iter().any(|&d| coord[d] != 0) {
                return Ok(Tensor::zeros(&view.local_shape, global.dtype()));
            }
            Ok(global.gather_flat(&view.global_indices(), &view.local_shape)?)
        })
        .collect()
}

/// Reassembles the global tensor from one local per device (indexed in
/// row-major mesh order).
pub fn merge_local_tensors(spec: &ShardSpec, global_shape: &[usize], locals: &[Tensor]) -> Result<Tensor, PlacementError> {
    spec.validate(global_shape)?;
    let mesh = &spec.mesh;
    if locals.len() != mesh.size() {
        return Err(PlacementError::LocalCount {
            expected: mesh.size(),
            actual: locals.len(),
        });
    }
    let dtype = locals[0].dtype();
    let mut views = Vec::with_capacity(locals.len());
    for (idx, local) in locals.iter().enumerate() {
        let coord = mesh.coord_of_index(idx);
        let view = spec.view(global_shape, &coord)?;
        if local.shape() != view.local_shape.as_slice() {
            return Err(PlacementError::LocalShape {
                coord,
                expected: view.local_shape,
                actual: local.shape().to_vec(),
            });
        }
        if local.dtype() != dtype {
            return Err(PlacementError::LocalDType {
                coord,
                expected: dtype,
                actual: local.dtype(),
            });
        }
        views.push(view);
    }

    let partial = spec.partial_dims();
    let mut reduced: Vec<Option<Tensor>> = locals.iter().cloned().map(Some).collect();
    let ops: Vec<ReduceOp> = partial
        .iter()
        .map(|&d| match spec.placements[d] {
            Placement::Partial(op) => op,
            _ => unreachable!(),
        })
        .collect();
    if !partial.is_empty() {
        if ops.iter().all(|&op| op == ops[0]) {
            // One pass over each group in ascending mesh-coordinate order.
            for group in mesh.groups(&partial) {
                let mut acc = reduced[group[0]].take().expect("unvisited");
                for &m in &group[1..] {
                    kernels::reduce_into(&mut acc, reduced[m].as_ref().expect("unvisited"), ops[0])?;
                    reduced[m] = None;
                }
                reduced[group[0]] = Some(acc);
            }
        } else {
            for (&d, &op) in partial.iter().zip(&ops) {
                for group in mesh.groups(&[d]) {
                    let Some(mut acc) = reduced[group[0]].take() else { continue };
                    for &m in &group[1..] {
                        if let Some(t) = reduced[m].take() {
                            kernels::reduce_into(&mut acc, &t, op)?;
                        }
                    }
                    reduced[group[0]] = Some(acc);
                }
            }
        }
    }

    let mut out = Tensor::zeros(global_shape, dtype);
    let shard_dims: Vec<usize> = (0..mesh.ndim()).filter(|&i| spec.placements[i].is_shard()).collect();
    let mut written: Vec<(Vec<usize>, usize)> = Vec::new();
    for (idx, value) in reduced.iter().enumerate() {
        let Some(value) = value else { continue };
        let coord = mesh.coord_of_index(idx);
        let key: Vec<usize> = shard_dims.iter().map(|&d| coord[d]).collect();
        if let Some((_, rep)) = written.iter().find(|(k, _)| *k == key) {
            if !reduced[*rep].as_ref().expect("written").bit_eq(value) {
                return Err(PlacementError::ReplicaMismatch { coord });
            }
            continue;
        }
        out.scatter_flat(&views[idx].global_indices(), value)?;
        written.push((key, idx));
    }
    Ok(out)
}

//! Distributed tensors: global metadata plus one local tensor per device.

use crate::comm::Ledger;
use crate::engine::{row_major_strides, DType, Tensor};
use crate::mesh::DeviceMesh;
use crate::placement::{dim_index, format_placements, merge_local_tensors, shard_tensor, Placement, PlacementError, ShardSpec, ShardView};
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct DTensorMeta {
    pub global_shape: Vec<usize>,
    pub spec: ShardSpec,
    pub dtype: DType,
    pub requires_grad: bool,
}

impl DTensorMeta {
    pub fn new(global_shape: Vec<usize>, spec: ShardSpec, dtype: DType) -> Result<Self, Error> {
        spec.validate(&global_shape)?;
        Ok(Self {
            global_shape,
            spec,
            dtype,
            requires_grad: false,
        })
    }

    pub fn global_stride(&self) -> Vec<usize> {
        row_major_strides(&self.global_shape)
    }

    pub fn placements(&self) -> &[Placement] {
        &self.spec.placements
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.spec.mesh
    }

    pub fn numel(&self) -> usize {
        self.global_shape.iter().product()
    }

    pub fn view(&self, coord: &[usize]) -> Result<ShardView, PlacementError> {
        self.spec.view(&self.global_shape, coord)
    }

    /// Same tensor geometry under other placements.
    pub fn with_placements(&self, placements: Vec<Placement>) -> Result<Self, Error> {
        let spec = ShardSpec::new(self.spec.mesh.clone(), placements);
        spec.validate(&self.global_shape)?;
        Ok(Self {
            spec,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct DTensor {
    pub meta: DTensorMeta,
    locals: Vec<Tensor>,
    pub grad: Option<Box<DTensor>>,
}

impl DTensor {
    /// Wraps per-device locals (row-major mesh order) after checking their
    /// shapes against the metadata.
    pub fn from_locals(meta: DTensorMeta, locals: Vec<Tensor>) -> Result<Self, Error> {
        let mesh = meta.mesh();
        if locals.len() != mesh.size() {
            return Err(PlacementError::LocalCount {
                expected: mesh.size(),
                actual: locals.len(),
            }
            .into());
        }
        for (idx, local) in locals.iter().enumerate() {
            let coord = mesh.coord_of_index(idx);
            let view = meta.view(&coord)?;
            if local.shape() != view.local_shape.as_slice() {
                return Err(PlacementError::LocalShape {
                    coord,
                    expected: view.local_shape,
                    actual: local.shape().to_vec(),
                }
                .into());
            }
            if local.dtype() != meta.dtype {
                return Err(PlacementError::LocalDType {
                    coord,
                    expected: meta.dtype,
                    actual: local.dtype(),
                }
                .into());
            }
        }
        Ok(Self {
            meta,
            locals,
            grad: None,
        })
    }

    pub fn distribute(global: &Tensor, spec: ShardSpec) -> Result<Self, Error> {
        let locals = shard_tensor(global, &spec)?;
        let meta = DTensorMeta::new(global.shape().to_vec(), spec, global.dtype())?;
        Ok(Self {
            meta,
            locals,
            grad: None,
        })
    }

    pub fn to_global(&self) -> Result<Tensor, Error> {
        Ok(merge_local_tensors(&self.meta.spec, &self.meta.global_shape, &self.locals)?)
    }

    pub fn placements(&self) -> &[Placement] {
        self.meta.placements()
    }

    pub fn mesh(&self) -> &DeviceMesh {
        self.meta.mesh()
    }

    pub fn shape(&self) -> &[usize] {
        &self.meta.global_shape
    }

    pub fn dtype(&self) -> DType {
        self.meta.dtype
    }

    pub fn locals(&self) -> &[Tensor] {
        &self.locals
    }

    pub fn locals_mut(&mut self) -> &mut [Tensor] {
        &mut self.locals
    }

    pub fn into_locals(self) -> Vec<Tensor> {
        self.locals
    }

    pub fn local(&self, index: usize) -> &Tensor {
        &self.locals[index]
    }

    /// Largest local buffer in bytes.
    pub fn max_local_bytes(&self) -> usize {
        self.locals.iter().map(Tensor::size_bytes).max().unwrap_or(0)
    }

    /// Replaces the placement labels without moving data. The locals must
    /// already have the shapes the new placements imply.
    pub fn relabel(&self, placements: Vec<Placement>) -> Result<DTensor, Error> {
        let meta = self.meta.with_placements(placements)?;
        let mut out = DTensor::from_locals(meta, self.locals.clone())?;
        out.meta.requires_grad = self.meta.requires_grad;
        Ok(out)
    }

    /// Errors if any replicated mesh dim holds differing copies.
    pub fn check_replicas(&self) -> Result<(), Error> {
        let mesh = self.mesh();
        for (d, pl) in self.placements().iter().enumerate() {
            if !pl.is_replicate() {
                continue;
            }
            for group in mesh.groups(&[d]) {
                let first = &self.locals[group[0]];
                for &m in &group[1..] {
                    if !self.locals[m].bit_eq(first) {
                        return Err(PlacementError::ReplicaMismatch {
                            coord: mesh.coord_of_index(m),
                        }
                        .into());
                    }
                }
            }
        }
        Ok(())
    }

    /// One line per device: `coord=(…) shape=[…] data=[…]`.
    pub fn dump(&self) -> String {
        let mesh = self.mesh();
        let mut out = String::new();
        for (idx, local) in self.locals.iter().enumerate() {
            let coord: Vec<String> = mesh.coord_of_index(idx).iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("coord=({}) {}\n", coord.join(","), local));
        }
        out
    }

    pub fn redistribute(&self, dst: &[Placement], ledger: &mut Ledger) -> Result<DTensor, Error> {
        self.redistribute_labeled(dst, ledger, "redistribute")
    }

    /// Moves to `dst` in two passes: right to left, every mesh dim that must
    /// stop being sharded or partial is gathered or reduced; then left to
    /// right, every dim that must become sharded is sliced or
    /// reduce-scattered.
    pub fn redistribute_labeled(&self, dst: &[Placement], ledger: &mut Ledger, label: &str) -> Result<DTensor, Error> {
        let mesh = self.mesh().clone();
        let target = ShardSpec::new(mesh.clone(), dst.to_vec());
        target.validate(self.shape())?;
        let src = self.placements().to_vec();
        for (i, (s, d)) in src.iter().zip(dst).enumerate() {
            let ok = match (s, d) {
                _ if s == d => true,
                (_, Placement::Partial(_)) => false,
                (Placement::Partial(_), Placement::InterleavedShard { .. }) => false,
                _ => true,
            };
            if !ok {
                return Err(Error::UnsupportedTransition {
                    src: s.to_string(),
                    dst: d.to_string(),
                    mesh_dim: i,
                });
            }
        }
        if src == dst {
            return Ok(self.clone());
        }

        let shape = self.shape().to_vec();
        let mut cur = src.clone();
        let mut locals = self.locals.clone();

        // A shard nested inside a mesh dim that changes on the same tensor
        // dim has to come off first and be re-sliced afterwards.
        let mut undo: Vec<bool> = (0..mesh.ndim()).map(|i| cur[i] != dst[i]).collect();
        for i in 0..mesh.ndim() {
            if !undo[i] {
                continue;
            }
            for b in [cur[i].shard_dim(), dst[i].shard_dim()].into_iter().flatten() {
                for j in i + 1..mesh.ndim() {
                    if cur[j].shard_dim() == Some(b) {
                        undo[j] = true;
                    }
                }
            }
        }

        for i in (0..mesh.ndim()).rev() {
            if !undo[i] {
                continue;
            }
            match cur[i] {
                s @ (Placement::Shard(b) | Placement::InterleavedShard { dim: b, .. }) => {
                    let groups = ledger.all_gather(&mesh, i, &locals, label)?;
                    for (members, parts) in groups {
                        let extent: usize = parts.iter().map(|t| t.shape()[b]).sum();
                        let mut full_shape = parts[0].shape().to_vec();
                        full_shape[b] = extent;
                        let mut full = Tensor::zeros(&full_shape, self.dtype());
                        for (k, part) in parts.iter().enumerate() {
                            let pos = dim_index(&s, extent, mesh.dim_size(i), k).to_vec();
                            full.place_along(b, &pos, part)?;
                        }
                        for m in members {
                            locals[m] = full.clone();
                        }
                    }
                    cur[i] = Placement::Replicate;
                }
                Placement::Partial(op) if dst[i].is_replicate() => {
                    ledger.all_reduce(&mesh, &[i], &mut locals, op, label)?;
                    cur[i] = Placement::Replicate;
                }
                _ => {}
            }
        }

        for i in 0..mesh.ndim() {
            let (s, d) = (cur[i], dst[i]);
            if s == d {
                continue;
            }
            let Some(b) = d.shard_dim() else { continue };
            let p = mesh.dim_size(i);
            match s {
                Placement::Replicate => {
                    for (idx, local) in locals.iter_mut().enumerate() {
                        let k = mesh.coord_of_index(idx)[i];
                        let pos = dim_index(&d, local.shape()[b], p, k).to_vec();
                        *local = local.select_along(b, &pos)?;
                    }
                }
                Placement::Partial(op) => {
                    let chunks = locals
                        .iter()
                        .map(|local| (0..p).map(|k| local.select_along(b, &dim_index(&d, local.shape()[b], p, k).to_vec())).collect::<Result<Vec<_>, _>>())
                        .collect::<Result<Vec<_>, _>>()?;
                    locals = ledger.reduce_scatter(&mesh, i, &chunks, op, label)?;
                }
                _ => unreachable!("phase one removed every other shard"),
            }
            cur[i] = d;
        }

        debug_assert_eq!(cur, dst);
        let mut meta = DTensorMeta::new(shape, target, self.dtype())?;
        meta.requires_grad = self.meta.requires_grad;
        DTensor::from_locals(meta, locals)
    }
}

impl std::fmt::Display for DTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DTensor(shape={:?}, placements=[{}], mesh={})",
            self.shape(),
            format_placements(self.placements()),
            self.mesh()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::Collective;

    fn mesh1(p: usize) -> DeviceMesh {
        DeviceMesh::from_shape("m", &[("x", p)]).unwrap()
    }

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn distribute_shard_and_replicate() {
        let g = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::new(mesh1(2), vec![Placement::Shard(0)])).unwrap();
        assert_eq!(d.local(0).as_f64().unwrap(), &[1.0, 2.0]);
        assert_eq!(d.local(1).as_f64().unwrap(), &[3.0, 4.0]);
        let r = DTensor::distribute(&g, ShardSpec::replicate(mesh1(2))).unwrap();
        assert!(r.locals().iter().all(|l| l.bit_eq(&g)));
        r.check_replicas().unwrap();
    }

    #[test]
    fn shard_to_replicate_gathers() {
        let g = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::new(mesh1(2), vec![Placement::Shard(0)])).unwrap();
        let mut l = Ledger::default();
        let r = d.redistribute(&[Placement::Replicate], &mut l).unwrap();
        assert!(r.locals().iter().all(|x| x.bit_eq(&g)));
        assert_eq!(l.count(Collective::AllGather), 1);
        assert_eq!(l.entries[0].bytes_per_device, 16);
    }

    #[test]
    fn partial_to_replicate_sums() {
        let meta = DTensorMeta::new(vec![1], ShardSpec::new(mesh1(2), vec![Placement::P]), DType::F64).unwrap();
        let d = DTensor::from_locals(meta, vec![t(&[1], vec![1.0]), t(&[1], vec![2.0])]).unwrap();
        let mut l = Ledger::default();
        let r = d.redistribute(&[Placement::Replicate], &mut l).unwrap();
        assert!(r.locals().iter().all(|x| x.as_f64().unwrap() == [3.0]));
    }

    #[test]
    fn shard_to_other_shard_preserves_global() {
        let g = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::new(mesh1(2), vec![Placement::Shard(0)])).unwrap();
        let mut l = Ledger::default();
        let e = d.redistribute(&[Placement::Shard(1)], &mut l).unwrap();
        assert!(e.to_global().unwrap().bit_eq(&g));
        assert_eq!(e.local(1).as_f64().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_costs_nothing() {
        let g = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::new(mesh1(2), vec![Placement::Shard(0)])).unwrap();
        let mut l = Ledger::default();
        d.redistribute(&[Placement::Shard(0)], &mut l).unwrap();
        assert!(l.is_empty());
    }

    #[test]
    fn into_partial_rejected() {
        let g = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::replicate(mesh1(2))).unwrap();
        let r = d.redistribute(&[Placement::P], &mut Ledger::default());
        assert!(matches!(r, Err(Error::UnsupportedTransition { .. })));
    }

    #[test]
    fn dump_format() {
        let g = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let d = DTensor::distribute(&g, ShardSpec::new(mesh1(2), vec![Placement::Shard(0)])).unwrap();
        assert_eq!(d.dump(), "coord=(0) shape=[2] data=[1,2]\ncoord=(1) shape=[2] data=[3,4]\n");
    }

    #[test]
    fn nested_shards_round_trip() {
        let mesh = DeviceMesh::from_shape("m", &[("a", 2), ("b", 3)]).unwrap();
        let g = t(&[7, 5], (0..35).map(f64::from).collect());
        let all = [Placement::Replicate, Placement::Shard(0), Placement::Shard(1)];
        let with_partial = [Placement::Replicate, Placement::Shard(0), Placement::Shard(1), Placement::P];
        for s0 in with_partial {
            for s1 in with_partial {
                let src = DTensor::distribute(&g, ShardSpec::new(mesh.clone(), vec![s0, s1])).unwrap();
                for d0 in all {
                    for d1 in all {
                        let mut ledger = Ledger::default();
                        let out = src.redistribute(&[d0, d1], &mut ledger).unwrap();
                        let want = DTensor::distribute(&g, ShardSpec::new(mesh.clone(), vec![d0, d1])).unwrap();
                        assert!(out.locals().iter().zip(want.locals()).all(|(a, b)| a.bit_eq(b)), "{s0},{s1} -> {d0},{d1}");
                    }
                }
            }
        }
    }
}

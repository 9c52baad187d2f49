//! Bitwise sweep of distributed random generation against single-device
//! generation over ops, ranks, sizes, shardings and mesh sizes.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{DType, Tensor};
use crate::mesh::DeviceMesh;
use crate::placement::{merge_local_tensors, Placement, ShardSpec, ShardView};
use crate::rng::{fill_random, random_locals, Distribution, RngState, DEFAULT_THETA};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepOp {
    Uniform,
    Normal,
    Randint,
    DropoutMask,
}

impl SweepOp {
    pub const ALL: [SweepOp; 4] = [SweepOp::Uniform, SweepOp::Normal, SweepOp::Randint, SweepOp::DropoutMask];

    pub fn dist(self) -> Distribution {
        match self {
            SweepOp::Uniform => Distribution::uniform01(DType::F64),
            SweepOp::Normal => Distribution::standard_normal(DType::F64),
            SweepOp::Randint => Distribution::Randint { lo: -1000, hi: 1000 },
            SweepOp::DropoutMask => Distribution::Bernoulli { p: 0.9 },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepOp::Uniform => "uniform",
            SweepOp::Normal => "normal",
            SweepOp::Randint => "randint",
            SweepOp::DropoutMask => "dropout-mask",
        }
    }
}

impl fmt::Display for SweepOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepOp::ALL.into_iter().find(|o| o.as_str() == s).ok_or_else(|| format!("unknown sweep op `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ops: Vec<SweepOp>,
    pub ndims: Vec<usize>,
    /// Element counts.
    pub sizes: Vec<usize>,
    /// Total device counts.
    pub mesh_sizes: Vec<usize>,
    /// Simulated thread counts per device.
    pub threads: Vec<usize>,
    pub seed: u64,
    pub offset: u64,
    /// Global virtual thread count.
    pub theta: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ops: SweepOp::ALL.to_vec(),
            ndims: (1..=5).collect(),
            sizes: vec![1 << 16, 1 << 20],
            mesh_sizes: vec![1, 2, 4, 8],
            threads: vec![1],
            seed: 2024,
            offset: 0,
            theta: DEFAULT_THETA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub op: SweepOp,
    pub shape: Vec<usize>,
    /// Tensor dim sharded by each mesh dim.
    pub shard_dims: Vec<usize>,
    pub mesh: Vec<usize>,
    pub threads: usize,
    /// Merged locals equal the single-device tensor and the state advanced
    /// by the same amount.
    pub matched: bool,
}

/// A shape of `ndim` power-of-two extents holding `size` elements; larger
/// extents come first.
pub fn sweep_shape(ndim: usize, size: usize) -> Vec<usize> {
    let bits = size.trailing_zeros() as usize;
    assert!(size.is_power_of_two() && ndim >= 1, "sweep sizes are powers of two");
    (0..ndim).map(|d| 1usize << (bits / ndim + usize::from(d < bits % ndim))).collect()
}

/// Two-dim mesh of `m` devices for double sharding: `m = a·b`, `a ≥ b`,
/// as square as possible.
pub fn double_mesh(m: usize) -> (usize, usize) {
    let mut b = (m as f64).sqrt() as usize;
    while b > 1 && !m.is_multiple_of(b) {
        b -= 1;
    }
    (m / b.max(1), b.max(1))
}

/// Every `(shard dims, mesh shape)` of the sweep for rank `ndim`.
pub fn shardings(ndim: usize, mesh_sizes: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for &m in mesh_sizes {
        for d in 0..ndim {
            out.push((vec![d], vec![m]));
        }
        let (a, b) = double_mesh(m);
        for d0 in 0..ndim {
            for d1 in 0..ndim {
                out.push((vec![d0, d1], vec![a, b]));
            }
        }
    }
    out
}

fn mesh_for(shape: &[usize]) -> Result<DeviceMesh, Error> {
    let dims: Vec<(String, usize)> = shape.iter().enumerate().map(|(i, &s)| (format!("d{i}"), s)).collect();
    let named: Vec<(&str, usize)> = dims.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    Ok(DeviceMesh::from_shape("sweep", &named)?)
}

/// Distributed generation of `shape` under `spec`, merged back to one tensor.
pub fn distributed_sample(spec: &ShardSpec, shape: &[usize], dist: &Distribution, state: &mut RngState, threads: usize) -> Result<Tensor, Error> {
    let locals = random_locals(spec, shape, dist, state, threads)?;
    Ok(merge_local_tensors(spec, shape, &locals)?)
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepCell>, Error> {
    let mut base = RngState::with_theta(cfg.seed, cfg.theta)?;
    base.offset = cfg.offset;
    let mut keys = Vec::new();
    for &op in &cfg.ops {
        for &ndim in &cfg.ndims {
            for &size in &cfg.sizes {
                keys.push((op, sweep_shape(ndim, size)));
            }
        }
    }
    let refs: HashMap<(SweepOp, Vec<usize>), Tensor> = keys
        .par_iter()
        .map(|(op, shape)| Ok(((*op, shape.clone()), fill_random(&ShardView::full(shape), &base, &op.dist(), 1)?)))
        .collect::<Result<_, Error>>()?;
    let mut jobs = Vec::new();
    for (op, shape) in &keys {
        for (shard_dims, mesh) in shardings(shape.len(), &cfg.mesh_sizes) {
            for &threads in &cfg.threads {
                jobs.push((*op, shape.clone(), shard_dims.clone(), mesh.clone(), threads));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(op, shape, shard_dims, mesh, threads)| {
            let spec = ShardSpec::new(mesh_for(&mesh)?, shard_dims.iter().map(|&d| Placement::Shard(d)).collect());
            let mut state = base;
            let merged = distributed_sample(&spec, &shape, &op.dist(), &mut state, threads)?;
            let mut want = base;
            want.advance(shape.iter().product());
            let matched = merged.bit_eq(&refs[&(op, shape.clone())]) && state == want;
            Ok(SweepCell {
                op,
                shape,
                shard_dims,
                mesh,
                threads,
                matched,
            })
        })
        .collect()
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("op,dims,size,shape,shard_dims,mesh,threads,result\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.op,
            c.shape.len(),
            c.shape.iter().product::<usize>(),
            join(&c.shape, "x"),
            join(&c.shard_dims, "+"),
            join(&c.mesh, "x"),
            c.threads,
            if c.matched { "match" } else { "mismatch" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_meshes() {
        assert_eq!(sweep_shape(1, 1 << 16), [65536]);
        assert_eq!(sweep_shape(5, 1 << 16), [16, 8, 8, 8, 8]);
        assert_eq!(sweep_shape(3, 1 << 20), [128, 128, 64]);
        assert_eq!(double_mesh(1), (1, 1));
        assert_eq!(double_mesh(2), (2, 1));
        assert_eq!(double_mesh(8), (4, 2));
        assert_eq!(shardings(3, &[4]).len(), 3 + 9);
    }

    #[test]
    fn small_sweep_matches() {
        let cfg = SweepConfig {
            ndims: vec![1, 3],
            sizes: vec![64],
            mesh_sizes: vec![1, 4],
            threads: vec![1, 3],
            ..SweepConfig::default()
        };
        let cells = run_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 4 * 2 * (1 + 1 + 3 + 9) * 2);
        assert!(cells.iter().all(|c| c.matched));
        assert!(sweep_csv(&cells).lines().nth(1).unwrap().starts_with("uniform,1,64,64,0,1,1,match"));
    }
}

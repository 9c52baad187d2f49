//! Simulated collectives with per-device byte accounting.

pub mod cost;
pub mod reduce;

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{kernels, EngineError, ReduceOp, Tensor};
use crate::mesh::DeviceMesh;

pub use cost::{cost_model_eval, CostParams, CostReport};
pub use reduce::{bucketed_grad_reduce, fused_nd_grad_reduce, per_tensor_grad_reduce, ReduceReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommError {
    #[error("{collective}: buffer at device {device} has {actual} elements, expected {expected}")]
    SizeMismatch {
        collective: Collective,
        device: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{collective}: device {device} provided {actual} chunks for a group of {expected}")]
    ChunkCount {
        collective: Collective,
        device: usize,
        expected: usize,
        actual: usize,
    },
    #[error("expected one buffer per device ({expected}), got {actual}")]
    DeviceCount { expected: usize, actual: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Collective::AllReduce => "AllReduce",
            Collective::AllGather => "AllGather",
            Collective::ReduceScatter => "ReduceScatter",
        })
    }
}

/// Sizes of `p` ceil-block chunks of `n` elements.
pub fn chunk_lengths(n: usize, p: usize) -> Vec<usize> {
    let block = n.div_ceil(p.max(1));
    (0..p)
        .map(|k| {
            let start = (k * block).min(n);
            (start + block).min(n) - start
        })
        .collect()
}

/// Bytes each device sends in a ring AllGather where device `r` starts with
/// chunk `r`: at step `s` it forwards chunk `(r − s) mod P`.
pub fn ring_all_gather_bytes(chunks: &[u64]) -> Vec<u64> {
    let p = chunks.len();
    (0..p)
        .map(|r| (0..p.saturating_sub(1)).map(|s| chunks[(r + p - s) % p]).sum())
        .collect()
}

/// Ring ReduceScatter ending with chunk `r` on device `r`: at step `s`
/// device `r` sends its running sum of chunk `(r − s − 1) mod P`.
pub fn ring_reduce_scatter_bytes(chunks: &[u64]) -> Vec<u64> {
    let p = chunks.len();
    (0..p)
        .map(|r| (0..p.saturating_sub(1)).map(|s| chunks[(r + 2 * p - s - 1) % p]).sum())
        .collect()
}

/// Ring AllReduce: a reduce-scatter pass sending chunk `(r − s) mod P`, then
/// an all-gather pass sending chunk `(r + 1 − s) mod P`.
pub fn ring_all_reduce_bytes(chunks: &[u64]) -> Vec<u64> {
    let p = chunks.len();
    (0..p)
        .map(|r| {
            let scatter: u64 = (0..p.saturating_sub(1)).map(|s| chunks[(r + p - s) % p]).sum();
            let gather: u64 = (0..p.saturating_sub(1)).map(|s| chunks[(r + 1 + p - s) % p]).sum();
            scatter + gather
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub collective: Collective,
    pub mesh: String,
    /// Participating mesh dims joined by `_`.
    pub mesh_dims: String,
    /// Payload bytes per group.
    pub s: u64,
    /// Payload elements per group.
    pub elems: u64,
    pub p: usize,
    /// Largest per-device send volume over all groups.
    pub bytes_per_device: u64,
    pub rounds: u32,
    pub groups: usize,
    pub t_model: f64,
    pub label: String,
}

/// Record of every collective issued during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    /// Transfer time per byte.
    pub b: f64,
    pub entries: Vec<LedgerEntry>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new(1.0)
    }
}

fn dims_label(mesh: &DeviceMesh, dims: &[usize]) -> String {
    let mut d = dims.to_vec();
    d.sort_unstable();
    d.iter().map(|&i| mesh.dims()[i].name.as_str()).collect::<Vec<_>>().join("_")
}

impl Ledger {
    pub fn new(b: f64) -> Self {
        Self { b, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, c: Collective) -> usize {
        self.entries.iter().filter(|e| e.collective == c).count()
    }

    pub fn total_bytes_per_device(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes_per_device).sum()
    }

    pub fn total_time(&self) -> f64 {
        self.entries.iter().map(|e| e.t_model).sum()
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, collective: Collective, mesh: &DeviceMesh, dims: &[usize], s: (u64, u64), p: usize, bytes: u64, groups: usize, label: &str) {
        self.entries.push(LedgerEntry {
            collective,
            mesh: mesh.name().to_string(),
            mesh_dims: dims_label(mesh, dims),
            s: s.0,
            elems: s.1,
            p,
            bytes_per_device: bytes,
            rounds: 1,
            groups,
            t_model: bytes as f64 * self.b,
            label: label.to_string(),
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("collective,mesh_dims,S,P,bytes_per_device,rounds,T_model,label\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.collective, e.mesh_dims, e.s, e.p, e.bytes_per_device, e.rounds, e.t_model, e.label
            );
        }
        out
    }

    /// Reduces `bufs` (one per device of `mesh`) over every group spanning
    /// `dims`, in ascending group order, and gives each member the result.
    pub fn all_reduce(&mut self, mesh: &DeviceMesh, dims: &[usize], bufs: &mut [Tensor], op: ReduceOp, label: &str) -> Result<(), CommError> {
        if bufs.len() != mesh.size() {
            return Err(CommError::DeviceCount {
                expected: mesh.size(),
                actual: bufs.len(),
            });
        }
        let groups = mesh.groups(dims);
        let p = groups[0].len();
        let (mut s_max, mut bytes_max) = ((0u64, 0u64), 0u64);
        for group in &groups {
            let first = &bufs[group[0]];
            for &m in &group[1..] {
                if bufs[m].numel() != first.numel() || bufs[m].dtype() != first.dtype() {
                    return Err(CommError::SizeMismatch {
                        collective: Collective::AllReduce,
                        device: m,
                        expected: first.numel(),
                        actual: bufs[m].numel(),
                    });
                }
            }
            let elem = first.dtype().size_bytes() as u64;
            let chunks: Vec<u64> = chunk_lengths(first.numel(), p).iter().map(|&c| c as u64 * elem).collect();
            s_max = s_max.max((first.size_bytes() as u64, first.numel() as u64));
            bytes_max = bytes_max.max(ring_all_reduce_bytes(&chunks).into_iter().max().unwrap_or(0));
            let mut acc = first.clone();
            for &m in &group[1..] {
                kernels::reduce_into(&mut acc, &bufs[m], op)?;
            }
            for &m in group {
                bufs[m] = acc.clone();
            }
        }
        self.record(Collective::AllReduce, mesh, dims, s_max, p, bytes_max, groups.len(), label);
        Ok(())
    }

    /// Every group along `dim` exchanges its parts; returns each group's
    /// members and their parts in member order.
    pub fn all_gather(&mut self, mesh: &DeviceMesh, dim: usize, parts: &[Tensor], label: &str) -> Result<Vec<(Vec<usize>, Vec<Tensor>)>, CommError> {
        if parts.len() != mesh.size() {
            return Err(CommError::DeviceCount {
                expected: mesh.size(),
                actual: parts.len(),
            });
        }
        let groups = mesh.groups(&[dim]);
        let p = groups[0].len();
        let (mut s_max, mut bytes_max) = ((0u64, 0u64), 0u64);
        let mut out = Vec::with_capacity(groups.len());
        for group in groups.iter() {
            let chunks: Vec<u64> = group.iter().map(|&m| parts[m].size_bytes() as u64).collect();
            let elems = group.iter().map(|&m| parts[m].numel() as u64).sum();
            s_max = s_max.max((chunks.iter().sum(), elems));
            bytes_max = bytes_max.max(ring_all_gather_bytes(&chunks).into_iter().max().unwrap_or(0));
            out.push((group.clone(), group.iter().map(|&m| parts[m].clone()).collect()));
        }
        self.record(Collective::AllGather, mesh, &[dim], s_max, p, bytes_max, groups.len(), label);
        Ok(out)
    }

    /// Each device supplies one chunk per group member; member `k` receives
    /// the reduction of every member's chunk `k` in ascending member order.
    pub fn reduce_scatter(&mut self, mesh: &DeviceMesh, dim: usize, chunks: &[Vec<Tensor>], op: ReduceOp, label: &str) -> Result<Vec<Tensor>, CommError> {
        if chunks.len() != mesh.size() {
            return Err(CommError::DeviceCount {
                expected: mesh.size(),
                actual: chunks.len(),
            });
        }
        let groups = mesh.groups(&[dim]);
        let p = groups[0].len();
        let (mut s_max, mut bytes_max) = ((0u64, 0u64), 0u64);
        let mut out: Vec<Option<Tensor>> = vec![None; mesh.size()];
        for group in &groups {
            for &m in group {
                if chunks[m].len() != p {
                    return Err(CommError::ChunkCount {
                        collective: Collective::ReduceScatter,
                        device: m,
                        expected: p,
                        actual: chunks[m].len(),
                    });
                }
            }
            let lead = &chunks[group[0]];
            let sizes: Vec<u64> = lead.iter().map(|c| c.size_bytes() as u64).collect();
            let elems = lead.iter().map(|c| c.numel() as u64).sum();
            s_max = s_max.max((sizes.iter().sum(), elems));
            bytes_max = bytes_max.max(ring_reduce_scatter_bytes(&sizes).into_iter().max().unwrap_or(0));
            for (k, &dst) in group.iter().enumerate() {
                let mut acc = chunks[group[0]][k].clone();
                for &m in &group[1..] {
                    if chunks[m][k].numel() != acc.numel() {
                        return Err(CommError::SizeMismatch {
                            collective: Collective::ReduceScatter,
                            device: m,
                            expected: acc.numel(),
                            actual: chunks[m][k].numel(),
                        });
                    }
                    kernels::reduce_into(&mut acc, &chunks[m][k], op)?;
                }
                out[dst] = Some(acc);
            }
        }
        self.record(Collective::ReduceScatter, mesh, &[dim], s_max, p, bytes_max, groups.len(), label);
        Ok(out.into_iter().map(|t| t.expect("every device is in one group")).collect())
    }
}

/// Outcome of comparing a ledger against the ring closed forms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelCheck {
    pub checked: usize,
    /// Entries whose payload does not split evenly and so has no exact form.
    pub uneven: usize,
    /// Collective count per bucket label.
    pub rounds: Vec<(String, u32)>,
    pub violations: Vec<String>,
}

impl ModelCheck {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Closed-form per-device bytes: `2S(P−1)/P` for AllReduce, `S(P−1)/P` for
/// the other two. `None` when `P` does not divide `S`.
pub fn ring_closed_form(c: Collective, s: u64, p: usize) -> Option<u64> {
    let p = p as u64;
    if !s.is_multiple_of(p) {
        return None;
    }
    let one = s / p * (p - 1);
    Some(match c {
        Collective::AllReduce => 2 * one,
        _ => one,
    })
}

/// Checks every evenly split entry against the closed forms and, when
/// `expected_rounds` is given, that each bucket label was reduced that many
/// times.
pub fn ledger_vs_model_check(ledger: &Ledger, expected_rounds: Option<u32>) -> ModelCheck {
    let mut out = ModelCheck::default();
    for (i, e) in ledger.entries.iter().enumerate() {
        let elem_aligned = e.elems % (e.p as u64) == 0;
        match ring_closed_form(e.collective, e.s, e.p).filter(|_| elem_aligned) {
            Some(expected) => {
                out.checked += 1;
                if expected != e.bytes_per_device {
                    out.violations.push(format!("entry {i} ({}): {} bytes, closed form {expected}", e.collective, e.bytes_per_device));
                }
                if (e.t_model - e.bytes_per_device as f64 * ledger.b).abs() > 0.0 {
                    out.violations.push(format!("entry {i}: modeled time {} != bytes·B", e.t_model));
                }
            }
            None => out.uneven += 1,
        }
        if e.label.starts_with("bucket:") {
            match out.rounds.iter_mut().find(|(l, _)| *l == e.label) {
                Some((_, n)) => *n += e.rounds,
                None => out.rounds.push((e.label.clone(), e.rounds)),
            }
        }
    }
    if let Some(n) = expected_rounds {
        for (label, r) in &out.rounds {
            if *r != n {
                out.violations.push(format!("{label}: {r} rounds, expected {n}"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_bufs(vals: &[f64]) -> Vec<Tensor> {
        vals.iter().map(|&v| Tensor::from_f64(&[1], vec![v]).unwrap()).collect()
    }

    #[test]
    fn all_reduce_sums_every_member() {
        let mesh = DeviceMesh::from_shape("m", &[("x", 4)]).unwrap();
        let mut bufs = scalar_bufs(&[1.0, 2.0, 3.0, 4.0]);
        let mut l = Ledger::default();
        l.all_reduce(&mesh, &[0], &mut bufs, ReduceOp::Sum, "t").unwrap();
        assert!(bufs.iter().all(|b| b.as_f64().unwrap() == [10.0]));
        assert_eq!(l.count(Collective::AllReduce), 1);
    }

    #[test]
    fn ledger_matches_ring_closed_form() {
        // 1024 bytes over 4 devices: 2·1024·3/4.
        let mesh = DeviceMesh::from_shape("m", &[("x", 4)]).unwrap();
        let mut bufs: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[128], crate::engine::DType::F64)).collect();
        let mut l = Ledger::new(0.5);
        l.all_reduce(&mesh, &[0], &mut bufs, ReduceOp::Sum, "t").unwrap();
        assert_eq!(l.entries[0].bytes_per_device, 1536);
        assert_eq!(l.entries[0].s, 1024);
        assert_eq!(l.entries[0].t_model, 768.0);
    }

    #[test]
    fn ring_schedules_send_each_foreign_chunk_once() {
        let chunks = [3u64, 5, 7, 11];
        let total: u64 = chunks.iter().sum();
        let ag = ring_all_gather_bytes(&chunks);
        let rs = ring_reduce_scatter_bytes(&chunks);
        for r in 0..4 {
            assert_eq!(ag[r], total - chunks[(r + 1) % 4]);
            assert_eq!(rs[r], total - chunks[r]);
        }
        assert_eq!(ring_all_reduce_bytes(&[8]), vec![0]);
    }

    #[test]
    fn all_gather_returns_group_parts() {
        let mesh = DeviceMesh::from_shape("m", &[("a", 2), ("b", 2)]).unwrap();
        let parts = scalar_bufs(&[0.0, 1.0, 2.0, 3.0]);
        let mut l = Ledger::default();
        let groups = l.all_gather(&mesh, 0, &parts, "g").unwrap();
        assert_eq!(groups[0].0, vec![0, 2]);
        assert_eq!(groups[1].1[1].as_f64().unwrap(), &[3.0]);
        assert_eq!(l.entries[0].bytes_per_device, 8);
        assert_eq!(l.entries[0].mesh_dims, "a");
    }

    #[test]
    fn reduce_scatter_distributes_chunks() {
        let mesh = DeviceMesh::from_shape("m", &[("x", 2)]).unwrap();
        let chunks = vec![scalar_bufs(&[1.0, 2.0]), scalar_bufs(&[10.0, 20.0])];
        let mut l = Ledger::default();
        let out = l.reduce_scatter(&mesh, 0, &chunks, ReduceOp::Sum, "rs").unwrap();
        assert_eq!(out[0].as_f64().unwrap(), &[11.0]);
        assert_eq!(out[1].as_f64().unwrap(), &[22.0]);
    }

    #[test]
    fn size_mismatch_rejected() {
        let mesh = DeviceMesh::from_shape("m", &[("x", 2)]).unwrap();
        let mut bufs = vec![Tensor::from_f64(&[1], vec![1.0]).unwrap(), Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap()];
        let r = Ledger::default().all_reduce(&mesh, &[0], &mut bufs, ReduceOp::Sum, "x");
        assert!(matches!(r, Err(CommError::SizeMismatch { .. })));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mesh = DeviceMesh::from_shape("m", &[("DP", 2)]).unwrap();
        let mut bufs = scalar_bufs(&[1.0, 2.0]);
        let mut l = Ledger::default();
        l.all_reduce(&mesh, &[0], &mut bufs, ReduceOp::Sum, "grad").unwrap();
        let csv = l.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "collective,mesh_dims,S,P,bytes_per_device,rounds,T_model,label");
        assert_eq!(lines[1], "AllReduce,DP,8,2,8,1,8,grad");
    }
}

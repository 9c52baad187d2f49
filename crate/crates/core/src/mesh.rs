//! N-dimensional device meshes.
//!
//! A [`DeviceMesh`] lays out a set of simulated device ranks on a row-major
//! grid. Each mesh dimension hosts one kind of parallelism (DP, TP, SP, ...).
//! Sub-mesh fibers and flattened views are new immutable meshes over the same
//! rank set.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

#[derive(Error, Clone, Debug, PartialEq, Eq)]
pub enum MeshError {
    #[error("mesh must have at least one dimension")]
    NoDims,
    #[error("mesh dimension '{0}' must have size >= 1")]
    ZeroSize(String),
    #[error("mesh dimension name '{0}' appears more than once")]
    DuplicateDim(String),
    #[error("mesh has {actual} rank(s) but its dimensions imply {expected}")]
    RankCountMismatch { expected: usize, actual: usize },
    #[error("rank {0} appears more than once in the mesh")]
    DuplicateRank(usize),
    #[error("unknown mesh dimension '{0}'")]
    UnknownDim(String),
    #[error("rank {0} is not part of the mesh")]
    UnknownRank(usize),
    #[error("flatten requires at least one dimension name")]
    EmptyFlatten,
    #[error("coordinate {coord:?} is invalid for mesh shape {shape:?}")]
    BadCoord { coord: Vec<usize>, shape: Vec<usize> },
}

/// One named axis of a mesh.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MeshDim {
    pub name: String,
    pub size: usize,
}

/// An immutable N-dimensional grid of device ranks.
#[derive(Clone, Debug)]
pub struct DeviceMesh {
    name: String,
    dims: Vec<MeshDim>,
    ranks: Arc<[usize]>,
    id: u64,
}

impl PartialEq for DeviceMesh {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.dims == other.dims && self.ranks == other.ranks
    }
}

impl Eq for DeviceMesh {}

impl DeviceMesh {
    /// Builds a mesh with a row-major rank layout.
    pub fn new<S: Into<String>>(
        name: S,
        dims: Vec<(String, usize)>,
        ranks: Vec<usize>,
    ) -> Result<Self, MeshError> {
        if dims.is_empty() {
            return Err(MeshError::NoDims);
        }
        let mut seen = HashSet::new();
        for (dim, size) in &dims {
            if *size == 0 {
                return Err(MeshError::ZeroSize(dim.clone()));
            }
            if !seen.insert(dim.clone()) {
                return Err(MeshError::DuplicateDim(dim.clone()));
            }
        }
        let expected: usize = dims.iter().map(|(_, s)| *s).product();
        if expected != ranks.len() {
            return Err(MeshError::RankCountMismatch {
                expected,
                actual: ranks.len(),
            });
        }
        let mut seen_ranks = HashSet::new();
        for &r in &ranks {
            if !seen_ranks.insert(r) {
                return Err(MeshError::DuplicateRank(r));
            }
        }
        let name = name.into();
        let dims: Vec<MeshDim> = dims
            .into_iter()
            .map(|(name, size)| MeshDim { name, size })
            .collect();
        let mut hasher = DefaultHasher::new();
        name.hash(&mut hasher);
        dims.hash(&mut hasher);
        ranks.hash(&mut hasher);
        Ok(Self {
            name,
            dims,
            ranks: ranks.into(),
            id: hasher.finish(),
        })
    }

    /// Mesh over ranks `0..∏sizes`.
    pub fn from_shape<S: Into<String>>(name: S, dims: &[(&str, usize)]) -> Result<Self, MeshError> {
        let n = dims.iter().map(|(_, s)| *s).product();
        Self::new(
            name,
            dims.iter().map(|(d, s)| (d.to_string(), *s)).collect(),
            (0..n).collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Stable identifier used in cache keys.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dims(&self) -> &[MeshDim] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.size).collect()
    }

    pub fn dim_size(&self, dim: usize) -> usize {
        self.dims[dim].size
    }

    /// Number of devices.
    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn dim_index(&self, name: &str) -> Result<usize, MeshError> {
        self.dims
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| MeshError::UnknownDim(name.to_string()))
    }

    /// Mixed-radix digits of a linear device index.
    pub fn coord_of_index(&self, mut index: usize) -> Vec<usize> {
        let mut coord = vec![0; self.ndim()];
        for d in (0..self.ndim()).rev() {
            coord[d] = index % self.dims[d].size;
            index /= self.dims[d].size;
        }
        coord
    }

    pub fn index_of_coord(&self, coord: &[usize]) -> Result<usize, MeshError> {
        if coord.len() != self.ndim() || coord.iter().zip(&self.dims).any(|(c, d)| *c >= d.size) {
            return Err(MeshError::BadCoord {
                coord: coord.to_vec(),
                shape: self.shape(),
            });
        }
        Ok(coord
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (c, d)| acc * d.size + c))
    }

    pub fn coord_of_rank(&self, rank: usize) -> Result<Vec<usize>, MeshError> {
        let index = self
            .ranks
            .iter()
            .position(|&r| r == rank)
            .ok_or(MeshError::UnknownRank(rank))?;
        Ok(self.coord_of_index(index))
    }

    pub fn rank_at(&self, coord: &[usize]) -> Result<usize, MeshError> {
        Ok(self.ranks[self.index_of_coord(coord)?])
    }

    /// All coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.size()).map(move |i| self.coord_of_index(i))
    }

    /// Groups of linear device indices that differ only along `mesh_dims`.
    ///
    /// Members of a group are ordered row-major over the selected dims (in
    /// mesh order); groups are ordered row-major over the remaining dims.
    pub fn groups(&self, mesh_dims: &[usize]) -> Vec<Vec<usize>> {
        let mut selected: Vec<usize> = mesh_dims.to_vec();
        selected.sort_unstable();
        selected.dedup();
        let rest: Vec<usize> = (0..self.ndim()).filter(|d| !selected.contains(d)).collect();
        let rest_count: usize = rest.iter().map(|&d| self.dims[d].size).product();
        let group_size: usize = selected.iter().map(|&d| self.dims[d].size).product();
        let mut out = Vec::with_capacity(rest_count);
        for g in 0..rest_count {
            let rest_coord = digits(g, rest.iter().map(|&d| self.dims[d].size));
            let mut members = Vec::with_capacity(group_size);
            for m in 0..group_size {
                let sel_coord = digits(m, selected.iter().map(|&d| self.dims[d].size));
                let mut coord = vec![0; self.ndim()];
                for (k, &d) in rest.iter().enumerate() {
                    coord[d] = rest_coord[k];
                }
                for (k, &d) in selected.iter().enumerate() {
                    coord[d] = sel_coord[k];
                }
                members.push(self.index_of_coord(&coord).expect("coordinate in range"));
            }
            out.push(members);
        }
        out
    }

    /// The 1-D fiber mesh along `dim_name` that contains `caller_rank`.
    pub fn submesh(&self, dim_name: &str, caller_rank: usize) -> Result<DeviceMesh, MeshError> {
        let dim = self.dim_index(dim_name)?;
        let caller = self.coord_of_rank(caller_rank)?;
        let caller_index = self.index_of_coord(&caller)?;
        let fiber = self
            .groups(&[dim])
            .into_iter()
            .find(|g| g.contains(&caller_index))
            .expect("every device lies on one fiber");
        DeviceMesh::new(
            format!("{}.{}", self.name, dim_name),
            vec![(dim_name.to_string(), self.dims[dim].size)],
            fiber.into_iter().map(|i| self.ranks[i]).collect(),
        )
    }

    /// Every fiber mesh along `dim_name`, ordered row-major over the other dims.
    pub fn submeshes(&self, dim_name: &str) -> Result<Vec<DeviceMesh>, MeshError> {
        let dim = self.dim_index(dim_name)?;
        self.groups(&[dim])
            .into_iter()
            .map(|g| {
                DeviceMesh::new(
                    format!("{}.{}", self.name, dim_name),
                    vec![(dim_name.to_string(), self.dims[dim].size)],
                    g.into_iter().map(|i| self.ranks[i]).collect(),
                )
            })
            .collect()
    }

    /// Merges the named dims into one dim of size ∏ sizes, placed where the
    /// first of them sits. Merged coordinates decompose row-major over the
    /// named dims in mesh order; other dims keep their order.
    pub fn flatten_dims(&self, dim_names: &[&str]) -> Result<DeviceMesh, MeshError> {
        if dim_names.is_empty() {
            return Err(MeshError::EmptyFlatten);
        }
        let mut merged = dim_names
            .iter()
            .map(|n| self.dim_index(n))
            .collect::<Result<Vec<_>, _>>()?;
        merged.sort_unstable();
        merged.dedup();
        let first = merged[0];
        let merged_name = merged
            .iter()
            .map(|&d| self.dims[d].name.as_str())
            .collect::<Vec<_>>()
            .join("_");
        let merged_size: usize = merged.iter().map(|&d| self.dims[d].size).product();

        // New layout: each entry names either the merged dim or an old dim.
        let mut layout: Vec<Option<usize>> = Vec::new();
        for d in 0..self.ndim() {
            if d == first {
                layout.push(None);
            } else if !merged.contains(&d) {
                layout.push(Some(d));
            }
        }
        let new_sizes: Vec<usize> = layout
            .iter()
            .map(|slot| match slot {
                None => merged_size,
                Some(d) => self.dims[*d].size,
            })
            .collect();
        let total: usize = new_sizes.iter().product();
        let mut ranks = Vec::with_capacity(total);
        for i in 0..total {
            let new_coord = digits(i, new_sizes.iter().copied());
            let mut old = vec![0; self.ndim()];
            for (slot, &c) in layout.iter().zip(&new_coord) {
                match slot {
                    Some(d) => old[*d] = c,
                    None => {
                        let sub = digits(c, merged.iter().map(|&d| self.dims[d].size));
                        for (k, &d) in merged.iter().enumerate() {
                            old[d] = sub[k];
                        }
                    }
                }
            }
            ranks.push(self.rank_at(&old)?);
        }
        let dims = layout
            .iter()
            .zip(&new_sizes)
            .map(|(slot, &size)| match slot {
                None => (merged_name.clone(), size),
                Some(d) => (self.dims[*d].name.clone(), size),
            })
            .collect();
        let name = if merged.len() == 1 {
            self.name.clone()
        } else {
            format!("{}.flat({})", self.name, merged_name)
        };
        DeviceMesh::new(name, dims, ranks)
    }
}

impl fmt::Display for DeviceMesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self
            .dims
            .iter()
            .map(|d| format!("{}={}", d.name, d.size))
            .collect();
        write!(f, "{}[{}]", self.name, dims.join(","))
    }
}

/// Mixed-radix digits of `index` for the given radices (most significant first).
pub(crate) fn digits(mut index: usize, radices: impl DoubleEndedIterator<Item = usize> + ExactSizeIterator) -> Vec<usize> {
    let radices: Vec<usize> = radices.collect();
    let mut out = vec![0; radices.len()];
    for k in (0..radices.len()).rev() {
        out[k] = index % radices[k];
        index /= radices[k];
    }
    out
}

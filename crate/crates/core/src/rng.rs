//! Counter-based distributed random generation: every element's value is a
//! pure function of (seed, virtual thread, virtual offset) derived from its
//! global flat index, so any sharding reproduces the single-device tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{numel, DType, Data, EngineError, Tensor};
use crate::placement::{PlacementError, ShardSpec, ShardView};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RngError {
    #[error("invalid distribution parameter: {0}")]
    InvalidParam(String),
    #[error("thread count must be at least 1")]
    ZeroThreads,
    #[error("random values cannot be generated into a Partial placement")]
    PartialTarget,
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox-4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Block for seed `alpha` at virtual thread `tau` and virtual offset `beta`.
#[inline]
pub fn backend_block(alpha: u64, tau: u64, beta: u64) -> [u32; 4] {
    philox4x32_10(
        [tau as u32, (tau >> 32) as u32, beta as u32, (beta >> 32) as u32],
        [alpha as u32, (alpha >> 32) as u32],
    )
}

pub const DEFAULT_THETA: u64 = 65536;

/// Generator state shared by every device of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub offset: u64,
    pub theta: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            offset: 0,
            theta: DEFAULT_THETA,
        }
    }

    pub fn with_theta(seed: u64, theta: u64) -> Result<Self, RngError> {
        if theta == 0 {
            return Err(RngError::InvalidParam("theta must be at least 1".into()));
        }
        Ok(Self {
            seed,
            offset: 0,
            theta,
        })
    }

    /// Virtual (thread, offset) of global flat index `j`.
    #[inline]
    pub fn virtual_coords(&self, j: u64) -> (u64, u64) {
        (j % self.theta, j / self.theta + self.offset)
    }

    /// Offset increment of one op over `n` global elements.
    pub fn advance_for(&self, n: usize) -> u64 {
        (n as u64).div_ceil(self.theta)
    }

    pub fn advance(&mut self, n: usize) {
        self.offset += self.advance_for(n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    /// `lo + (hi − lo)·u` with `u` uniform on [0, 1).
    Uniform { lo: f64, hi: f64, dtype: DType },
    Normal { mean: f64, std: f64, dtype: DType },
    /// Integers in [lo, hi).
    Randint { lo: i64, hi: i64 },
    Bernoulli { p: f64 },
}

impl Distribution {
    pub fn uniform01(dtype: DType) -> Self {
        Distribution::Uniform { lo: 0.0, hi: 1.0, dtype }
    }

    pub fn standard_normal(dtype: DType) -> Self {
        Distribution::Normal {
            mean: 0.0,
            std: 1.0,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Distribution::Uniform { dtype, .. } | Distribution::Normal { dtype, .. } => *dtype,
            Distribution::Randint { .. } => DType::I64,
            Distribution::Bernoulli { .. } => DType::Bool,
        }
    }

    pub fn validate(&self) -> Result<(), RngError> {
        let bad = |m: String| Err(RngError::InvalidParam(m));
        match *self {
            Distribution::Uniform { lo, hi, dtype } => {
                if !(lo < hi) {
                    return bad(format!("uniform needs lo < hi, got [{lo}, {hi})"));
                }
                if !matches!(dtype, DType::F32 | DType::F64) {
                    return bad(format!("uniform needs a float dtype, got {dtype}"));
                }
            }
            Distribution::Normal { std, dtype, .. } => {
                if !(std >= 0.0) {
                    return bad(format!("normal needs std >= 0, got {std}"));
                }
                if !matches!(dtype, DType::F32 | DType::F64) {
                    return bad(format!("normal needs a float dtype, got {dtype}"));
                }
            }
            Distribution::Randint { lo, hi } => {
                if lo >= hi {
                    return bad(format!("randint needs lo < hi, got [{lo}, {hi})"));
                }
            }
            Distribution::Bernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("bernoulli needs p in [0, 1], got {p}"));
                }
            }
        }
        Ok(())
    }
}

const TWO_POW_32: f64 = 4294967296.0;

#[inline]
pub fn uniform_f32(block: [u32; 4]) -> f32 {
    (block[0] >> 8) as f32 * (1.0 / 16777216.0)
}

#[inline]
pub fn uniform_f64(block: [u32; 4]) -> f64 {
    let bits = ((block[0] as u64) << 32 | block[1] as u64) >> 11;
    bits as f64 * (1.0 / 9007199254740992.0)
}

/// Box–Muller on words 0 and 1; the second variate is discarded.
#[inline]
pub fn normal_f64(block: [u32; 4]) -> f64 {
    let u1 = (block[0] as f64 + 1.0) / TWO_POW_32;
    let u2 = block[1] as f64 / TWO_POW_32;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[inline]
pub fn randint(block: [u32; 4], lo: i64, hi: i64) -> i64 {
    let bits = (block[0] as u64) << 32 | block[1] as u64;
    let span = hi.wrapping_sub(lo) as u64;
    lo.wrapping_add((bits % span) as i64)
}

#[inline]
pub fn bernoulli(block: [u32; 4], p: f64) -> bool {
    uniform_f64(block) < p
}

fn generate<T: Default + Clone>(view: &ShardView, state: &RngState, threads: usize, f: impl Fn([u32; 4]) -> T) -> Vec<T> {
    let n = view.numel();
    let global = view.global_indices();
    let mut out = vec![T::default(); n];
    for tid in 0..threads.min(n) {
        let mut i = tid;
        while i < n {
            let (tau, beta) = state.virtual_coords(global[i] as u64);
            out[i] = f(backend_block(state.seed, tau, beta));
            i += threads;
        }
    }
    out
}

/// Local tensor for `view`; `threads` simulated threads stride over the local
/// elements. Does not advance the state.
pub fn fill_random(view: &ShardView, state: &RngState, dist: &Distribution, threads: usize) -> Result<Tensor, RngError> {
    if threads == 0 {
        return Err(RngError::ZeroThreads);
    }
    dist.validate()?;
    let data = match *dist {
        Distribution::Uniform { lo, hi, dtype: DType::F32 } => {
            let (lo, span) = (lo as f32, (hi - lo) as f32);
            Data::F32(generate(view, state, threads, |b| lo + span * uniform_f32(b)))
        }
        Distribution::Uniform { lo, hi, .. } => Data::F64(generate(view, state, threads, |b| lo + (hi - lo) * uniform_f64(b))),
        Distribution::Normal { mean, std, dtype: DType::F32 } => {
            Data::F32(generate(view, state, threads, |b| (mean + std * normal_f64(b)) as f32))
        }
        Distribution::Normal { mean, std, .. } => Data::F64(generate(view, state, threads, |b| mean + std * normal_f64(b))),
        Distribution::Randint { lo, hi } => Data::I64(generate(view, state, threads, |b| randint(b, lo, hi))),
        Distribution::Bernoulli { p } => Data::Bool(generate(view, state, threads, |b| bernoulli(b, p))),
    };
    Ok(Tensor::new(view.local_shape.clone(), data)?)
}

/// Single-device generation of the whole tensor; advances the state.
pub fn random_tensor(shape: &[usize], dist: &Distribution, state: &mut RngState, threads: usize) -> Result<Tensor, RngError> {
    let t = fill_random(&ShardView::full(shape), state, dist, threads)?;
    state.advance(numel(shape));
    Ok(t)
}

/// One local per device of `spec`, generated from each device's own view;
/// advances the state once for the whole op.
pub fn random_locals(
    spec: &ShardSpec,
    shape: &[usize],
    dist: &Distribution,
    state: &mut RngState,
    threads: usize,
) -> Result<Vec<Tensor>, RngError> {
    spec.validate(shape)?;
    if spec.placements.iter().any(|p| p.is_partial()) {
        return Err(RngError::PartialTarget);
    }
    let snapshot = *state;
    let coords: Vec<Vec<usize>> = spec.mesh.coords().collect();
    let locals = coords
        .par_iter()
        .map(|c| fill_random(&spec.view(shape, c)?, &snapshot, dist, threads))
        .collect::<Result<Vec<_>, _>>()?;
    state.advance(numel(shape));
    Ok(locals)
}

/// Keep probability and output scale of dropout with drop rate `p`.
pub fn dropout_params(p: f64) -> Result<(f64, f64), RngError> {
    if !(0.0..1.0).contains(&p) {
        return Err(RngError::InvalidParam(format!("dropout needs p in [0, 1), got {p}")));
    }
    Ok((1.0 - p, 1.0 / (1.0 - p)))
}

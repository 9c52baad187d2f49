//! Training drivers: a single-device reference run and the distributed run
//! of the same model, data and seed under a plan.

use serde::{Deserialize, Serialize};

use crate::comm::Ledger;
use crate::dispatch::{record_static_plan, Counters, Dispatcher, Mode, TraceEvent};
use crate::engine::{Backend, DType, Eager, Op, Tape, Tensor, Var};
use crate::mesh::DeviceMesh;
use crate::plan::model::ParamSpec;
use crate::report::RngCheck;
use crate::plan::{lower, AllocStats, DistExec, GradReduce, Model, ModelExec, Plan};
use crate::rng::{random_tensor, Distribution, RngState};
use crate::Error;

/// Seed offset of the data stream relative to the model seed.
const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `[in, hidden…, out]`.
    pub dims: Vec<usize>,
    pub batch: usize,
    pub dropout: f64,
    pub dtype: DType,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub offset: u64,
    pub theta: u64,
}

impl TrainConfig {
    /// Two-layer f64 MLP with dropout.
    pub fn mlp_f64() -> Self {
        Self {
            dims: vec![8, 16, 8],
            batch: 8,
            dropout: 0.1,
            dtype: DType::F64,
            lr: 0.05,
            steps: 50,
            seed: 2024,
            offset: 0,
            theta: crate::rng::DEFAULT_THETA,
        }
    }

    /// The same MLP on wrapping 64-bit integers, where every reduction order
    /// gives the same bits.
    pub fn mlp_exact() -> Self {
        Self {
            dtype: DType::I64,
            dropout: 0.5,
            lr: 0.0625,
            ..Self::mlp_f64()
        }
    }

    fn init(&self, fan_in: usize) -> Distribution {
        match self.dtype {
            DType::I64 => Distribution::Randint { lo: -2, hi: 3 },
            dtype => Distribution::Normal {
                mean: 0.0,
                std: 1.0 / (fan_in as f64).sqrt(),
                dtype,
            },
        }
    }

    fn data_dist(&self) -> Distribution {
        match self.dtype {
            DType::I64 => Distribution::Randint { lo: -2, hi: 3 },
            dtype => Distribution::standard_normal(dtype),
        }
    }

    pub fn model(&self) -> Model {
        Model::mlp(&self.dims, self.dropout, self.dtype, |i, _| self.init(i))
    }

    /// State for parameter init and every random op of the run.
    pub fn rng(&self) -> Result<RngState, Error> {
        let mut s = RngState::with_theta(self.seed, self.theta)?;
        s.offset = self.offset;
        Ok(s)
    }

    /// Host batches `(x, y)` for every step.
    pub fn batches(&self) -> Result<Vec<(Tensor, Tensor)>, Error> {
        let mut s = RngState::with_theta(self.seed.wrapping_add(DATA_STREAM), self.theta)?;
        let dist = self.data_dist();
        let (i, o) = (self.dims[0], self.dims[self.dims.len() - 1]);
        (0..self.steps)
            .map(|_| Ok((random_tensor(&[self.batch, i], &dist, &mut s, 1)?, random_tensor(&[self.batch, o], &dist, &mut s, 1)?)))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunResult {
    pub losses: Vec<f64>,
    /// `(param path, global value)` in parameter order.
    pub weights: Vec<(String, Tensor)>,
    pub counters: Counters,
    pub ledger: Ledger,
    pub alloc: AllocStats,
    /// Final generator state.
    pub rng: Option<RngState>,
    /// Lowered plan, one record per line.
    pub ir: String,
}

/// Single-device execution with the run's generator.
pub struct LocalExec {
    pub rng: RngState,
    pub params: Vec<(ParamSpec, Tensor)>,
}

impl LocalExec {
    pub fn new(model: &Model, mut rng: RngState) -> Result<Self, Error> {
        let params = model
            .params()
            .into_iter()
            .map(|p| {
                let t = random_tensor(&p.shape, &p.init, &mut rng, 1)?;
                Ok((p, t))
            })
            .collect::<Result<_, Error>>()?;
        Ok(Self { rng, params })
    }

    pub fn step(&mut self, model: &Model, x: &Tensor, y: &Tensor, lr: f64) -> Result<f64, Error> {
        let mut tape = Tape::new();
        let fwd = model.forward(self, &mut tape, x, y)?;
        let loss = tape.value(fwd.loss)?.item()?;
        tape.backward(self, fwd.loss)?;
        for (i, (_, leaf)) in fwd.params.iter().enumerate() {
            let w = &self.params[i].1;
            let g = match tape.take_grad(*leaf) {
                Some(g) => g,
                None => Tensor::zeros(w.shape(), w.dtype()),
            };
            self.params[i].1 = Eager.apply("sgd", &Op::SgdUpdate { lr }, &[w, &g])?;
        }
        Ok(loss)
    }
}

impl Backend for LocalExec {
    type Value = Tensor;
    type Error = Error;

    fn apply(&mut self, site: &str, op: &Op, inputs: &[&Tensor]) -> Result<Tensor, Error> {
        match op {
            Op::Bernoulli { p } => Ok(random_tensor(inputs[0].shape(), &Distribution::Bernoulli { p: *p }, &mut self.rng, 1)?),
            _ => Ok(Eager.apply(site, op, inputs)?),
        }
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn seed_grad(&mut self, loss: &Tensor) -> Result<Tensor, Error> {
        Ok(Eager.seed_grad(loss)?)
    }
}

impl ModelExec for LocalExec {
    fn data(&mut self, tape: &mut Tape<Tensor>, _module: &str, t: &Tensor) -> Result<Var, Error> {
        Ok(tape.leaf(t.clone(), false))
    }

    fn param(&mut self, tape: &mut Tape<Tensor>, p: &ParamSpec) -> Result<(Var, Var), Error> {
        let t = self.params.iter().find(|(q, _)| q.path == p.path).map(|(_, t)| t.clone()).expect("param registered at init");
        let v = tape.leaf(t, true);
        Ok((v, v))
    }
}

pub fn train_local(cfg: &TrainConfig) -> Result<RunResult, Error> {
    let model = cfg.model();
    let mut exec = LocalExec::new(&model, cfg.rng()?)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for (x, y) in cfg.batches()? {
        losses.push(exec.step(&model, &x, &y, cfg.lr)?);
    }
    Ok(RunResult {
        losses,
        weights: exec.params.iter().map(|(p, t)| (p.path.clone(), t.clone())).collect(),
        rng: Some(exec.rng),
        ..RunResult::default()
    })
}

#[derive(Clone, Debug)]
pub struct DistConfig {
    pub mesh: DeviceMesh,
    pub plan: Plan,
    pub mode: Mode,
    pub reduce: GradReduce,
    pub bucket_bytes: usize,
    pub deferred: bool,
    pub cache: bool,
    /// Unmatched plan patterns are errors rather than warnings.
    pub strict: bool,
}

impl DistConfig {
    pub fn new(mesh: DeviceMesh, plan: Plan) -> Self {
        Self {
            mesh,
            plan,
            mode: Mode::Dynamic,
            reduce: GradReduce::Bucketed,
            bucket_bytes: 1 << 16,
            deferred: true,
            cache: true,
            strict: true,
        }
    }
}

/// A distributed run plus, in record mode, one trace per step.
pub struct DistRun {
    pub result: RunResult,
    pub traces: Vec<Vec<TraceEvent>>,
}

pub fn train_dist(cfg: &TrainConfig, dist: &DistConfig) -> Result<DistRun, Error> {
    let model = cfg.model();
    let ir = lower(&dist.plan, &model.tensor_paths(cfg.batch), &dist.mesh, dist.strict)?;
    let mut dispatcher = Dispatcher::new(dist.mode);
    dispatcher.set_cache_enabled(dist.cache);
    let mut exec = DistExec::parallelize(&model, ir, dist.mesh.clone(), dispatcher, cfg.rng()?, dist.deferred)?;
    exec.reduce = dist.reduce;
    exec.bucket_bytes = dist.bucket_bytes;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut traces = Vec::new();
    for (x, y) in cfg.batches()? {
        losses.push(exec.step(&model, &x, &y, cfg.lr)?);
        if dist.mode == Mode::Record {
            traces.push(exec.dispatcher.take_trace());
        }
    }
    Ok(DistRun {
        result: RunResult {
            losses,
            weights: exec.weights()?,
            counters: exec.dispatcher.counters(),
            ledger: exec.env.ledger.clone(),
            alloc: exec.alloc.clone(),
            rng: Some(exec.env.rng),
            ir: exec.ir.dump(),
        },
        traces,
    })
}

/// Output of recording a dynamic run and replaying it statically.
pub struct Replay {
    pub recorded: RunResult,
    /// Directives derived from the trace, one per line.
    pub directives: Vec<String>,
    /// The full plan given to the static run.
    pub plan: Plan,
    pub replayed: RunResult,
}

/// Records `dist` dynamically, derives a static plan from the trace, and
/// runs the same training under it in static mode.
pub fn record_and_replay(cfg: &TrainConfig, dist: &DistConfig) -> Result<Replay, Error> {
    let rec = train_dist(cfg, &DistConfig { mode: Mode::Record, ..dist.clone() })?;
    let directives = record_static_plan(&rec.traces)?;
    let mut plan = dist.plan.clone();
    plan.extend(&Plan::parse(&directives.join("\n"))?);
    let replayed = train_dist(
        cfg,
        &DistConfig {
            mode: Mode::StaticEager,
            plan: plan.clone(),
            ..dist.clone()
        },
    )?
    .result;
    Ok(Replay {
        recorded: rec.result,
        directives,
        plan,
        replayed,
    })
}

/// Distributed parameter initialization compared bitwise, parameter by
/// parameter, with single-device initialization from the same state.
pub fn init_check(cfg: &TrainConfig, dist: &DistConfig) -> Result<RngCheck, Error> {
    let model = cfg.model();
    let local = LocalExec::new(&model, cfg.rng()?)?;
    let ir = lower(&dist.plan, &model.tensor_paths(cfg.batch), &dist.mesh, dist.strict)?;
    let exec = DistExec::parallelize(&model, ir, dist.mesh.clone(), Dispatcher::new(dist.mode), cfg.rng()?, dist.deferred)?;
    let weights = exec.weights()?;
    let matched = local.params.iter().zip(&weights).filter(|((_, a), (_, b))| a.bit_eq(b)).count();
    Ok(RngCheck {
        name: "init".into(),
        cells: local.params.len() + 1,
        matched: matched + usize::from(local.rng == exec.env.rng),
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every weight bitwise equal, in order.
pub fn weights_bit_eq(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((pa, ta), (pb, tb))| pa == pb && ta.bit_eq(tb))
}

/// Plans for the stock MLP.
pub mod plans {
    /// Column-parallel `fc1`, row-parallel `fc2` over mesh dim `tp`.
    pub fn megatron(tp: &str) -> String {
        format!("shard fc1.weight S(1) @{tp}\nshard fc2.weight S(0) @{tp}\nshard fc1.<in> R @{tp}\n")
    }

    /// Batch sharded over mesh dim `dp`.
    pub fn data_parallel(dp: &str) -> String {
        format!("factory input.<out> S(0) @{dp}\nfactory target.<out> S(0) @{dp}\n")
    }

    /// Weights stored sharded over `dp`, gathered for compute.
    pub fn zero3(dp: &str) -> String {
        format!("{}shard fc\\d+.weight S(0) @{dp} init\nshard fc\\d+.weight R @{dp} run\n", data_parallel(dp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(mut cfg: TrainConfig) -> TrainConfig {
        cfg.steps = 3;
        cfg
    }

    #[test]
    fn single_device_mesh_matches_local() {
        let cfg = short(TrainConfig::mlp_f64());
        let local = train_local(&cfg).unwrap();
        let mesh = DeviceMesh::from_shape("TP", &[("TP", 1)]).unwrap();
        let dist = train_dist(&cfg, &DistConfig::new(mesh, Plan::new())).unwrap().result;
        assert_eq!(local.losses, dist.losses);
        assert!(weights_bit_eq(&local.weights, &dist.weights));
        assert_eq!(local.rng, dist.rng);
    }

    #[test]
    fn batches_are_reproducible() {
        let cfg = short(TrainConfig::mlp_exact());
        let (a, b) = (cfg.batches().unwrap(), cfg.batches().unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| p.0.bit_eq(&q.0) && p.1.bit_eq(&q.1)));
        assert_eq!(a[0].0.shape(), &[8, 8]);
    }
}

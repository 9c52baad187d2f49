//! Runs a model on a mesh with a lowered plan: parameters become distributed
//! tensors, IR records fire as hooks, and Partial gradients are reduced
//! before the update.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::{bucketed_grad_reduce, fused_nd_grad_reduce, per_tensor_grad_reduce};
use crate::dispatch::{Call, Dispatcher, Env};
use crate::dtensor::DTensor;
use crate::engine::{Backend, Op, Tape, Tensor, Var};
use crate::mesh::DeviceMesh;
use crate::placement::{format_placements, Placement, ShardSpec};
use crate::rng::{random_locals, random_tensor, RngState};
use crate::Error;

use super::ir::{apply_scoped, restrict, scope, Scope};
use super::model::{Model, ModelExec, ParamSpec, SiteNamer};
use super::{Action, HookPoint, PlanError, PlanIr};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradReduce {
    PerTensor,
    #[default]
    Bucketed,
    Fused,
}

impl FromStr for GradReduce {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_tensor" => Ok(GradReduce::PerTensor),
            "bucketed" => Ok(GradReduce::Bucketed),
            "fused" => Ok(GradReduce::Fused),
            _ => Err(format!("unknown grad reduce `{s}`")),
        }
    }
}

/// Parameter materialization accounting.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    /// Buffers of a parameter's full global size that were generated.
    pub global_allocs: usize,
    /// Largest per-device buffer generated, in elements.
    pub max_local_elems: usize,
}

pub struct DistExec {
    pub mesh: DeviceMesh,
    pub ir: PlanIr,
    pub dispatcher: Dispatcher,
    pub env: Env,
    /// Parameters in their stored placements.
    pub params: Vec<(ParamSpec, DTensor)>,
    pub reduce: GradReduce,
    pub bucket_bytes: usize,
    pub alloc: AllocStats,
    namer: SiteNamer,
    /// Backward hook id → `(module, tensor, operand)` of its actions.
    grad_hooks: Vec<(String, String, usize)>,
}

/// Initial placements of `p` from the init record.
pub fn init_placements(ir: &PlanIr, mesh: &DeviceMesh, p: &ParamSpec) -> Result<Vec<Placement>, Error> {
    let mut pl = vec![Placement::Replicate; mesh.ndim()];
    for a in ir.actions_for(&p.module, HookPoint::Init, &p.name, p.index) {
        if let Action::Shard { placements, mesh: m } = a {
            let sc = scope(&p.path, placements, m.as_deref(), mesh)?;
            pl = apply_scoped(&pl, placements, sc);
        }
    }
    Ok(pl)
}

impl DistExec {
    /// Replaces every parameter of `model` by a distributed tensor in its
    /// initial placement. With `deferred`, each device generates only its
    /// own shard; otherwise the global tensor is generated and split.
    pub fn parallelize(model: &Model, ir: PlanIr, mesh: DeviceMesh, dispatcher: Dispatcher, rng: RngState, deferred: bool) -> Result<Self, Error> {
        let mut exec = Self {
            mesh: mesh.clone(),
            ir,
            dispatcher,
            env: Env::new(rng),
            params: Vec::new(),
            reduce: GradReduce::default(),
            bucket_bytes: 1 << 16,
            alloc: AllocStats::default(),
            namer: SiteNamer::default(),
            grad_hooks: Vec::new(),
        };
        for p in model.params() {
            let spec = ShardSpec::new(mesh.clone(), init_placements(&exec.ir, &mesh, &p)?);
            let threads = exec.env.threads;
            let t = if deferred {
                let locals = random_locals(&spec, &p.shape, &p.init, &mut exec.env.rng, threads)?;
                let most = locals.iter().map(Tensor::numel).max().unwrap_or(0);
                exec.alloc.max_local_elems = exec.alloc.max_local_elems.max(most);
                let meta = crate::dtensor::DTensorMeta::new(p.shape.clone(), spec, p.init.dtype())?;
                DTensor::from_locals(meta, locals)?
            } else {
                let global = random_tensor(&p.shape, &p.init, &mut exec.env.rng, threads)?;
                exec.alloc.global_allocs += 1;
                exec.alloc.max_local_elems = exec.alloc.max_local_elems.max(global.numel());
                DTensor::distribute(&global, spec)?
            };
            exec.params.push((p, t));
        }
        Ok(exec)
    }

    pub fn param(&self, path: &str) -> Option<&DTensor> {
        self.params.iter().find(|(p, _)| p.path == path).map(|(_, t)| t)
    }

    /// Global values of every parameter, in parameter order.
    pub fn weights(&self) -> Result<Vec<(String, Tensor)>, Error> {
        self.params.iter().map(|(p, t)| Ok((p.path.clone(), t.to_global()?))).collect()
    }

    fn run_actions(&mut self, label: &str, actions: &[Action], mut v: DTensor) -> Result<DTensor, Error> {
        for a in actions {
            let sc = scope(label, a.placements(), a.mesh(), &self.mesh)?;
            let target = apply_scoped(v.placements(), a.placements(), sc);
            match a {
                Action::Shard { .. } => {}
                Action::Annotate { .. } => {
                    if target != v.placements() {
                        v = v.relabel(target)?;
                    }
                }
                Action::Redist { src, .. } => {
                    if let Some(src) = src {
                        let cur = restrict(v.placements(), sc);
                        if &cur != src {
                            return Err(PlanError::SourceMismatch {
                                path: label.to_string(),
                                expected: format_placements(src),
                                actual: format_placements(&cur),
                            }
                            .into());
                        }
                    }
                    if target != v.placements() {
                        v = v.redistribute_labeled(&target, &mut self.env.ledger, label)?;
                    }
                }
                Action::Factory { .. } => {
                    if target != v.placements() {
                        v = v.redistribute_labeled(&target, &mut self.env.ledger, label)?;
                    }
                }
            }
        }
        Ok(v)
    }

    fn actions(&self, path: &str, hook: HookPoint, tensor: &str, operand: usize) -> Vec<Action> {
        self.ir.actions_for(path, hook, tensor, operand).cloned().collect()
    }

    /// One SGD step on `(x, y)`; returns the loss.
    pub fn step(&mut self, model: &Model, x: &Tensor, y: &Tensor, lr: f64) -> Result<f64, Error> {
        self.namer.reset();
        self.grad_hooks.clear();
        let mut tape: Tape<DTensor> = Tape::new();
        let fwd = model.forward(self, &mut tape, x, y)?;
        let loss = tape.value(fwd.loss)?.to_global()?.item()?;
        tape.backward(self, fwd.loss)?;

        let mut grads = Vec::with_capacity(fwd.params.len());
        for (i, (path, leaf)) in fwd.params.iter().enumerate() {
            let spec = self.params[i].0.clone();
            let g = match tape.take_grad(*leaf) {
                Some(g) => g,
                None => {
                    let w = &self.params[i].1;
                    DTensor::from_locals(w.meta.clone(), w.locals().iter().map(|t| Tensor::zeros(t.shape(), t.dtype())).collect())?
                }
            };
            let acts = self.actions(&spec.module, HookPoint::BackwardPost, &format!("{}.grad", spec.name), spec.index);
            let g = self.run_actions(&format!("{path}.grad"), &acts, g)?;
            self.dispatcher.record_grad(path, &g);
            grads.push(g);
        }
        match self.reduce {
            GradReduce::PerTensor => per_tensor_grad_reduce(&mut grads, &mut self.env.ledger)?,
            GradReduce::Bucketed => bucketed_grad_reduce(&mut grads, self.bucket_bytes, &mut self.env.ledger)?,
            GradReduce::Fused => fused_nd_grad_reduce(&mut grads, self.bucket_bytes, &mut self.env.ledger)?,
        };
        for (i, g) in grads.into_iter().enumerate() {
            let (spec, w) = self.params[i].clone();
            let site = format!("{}.sgd", spec.path);
            let mut nw = self.apply(&site, &Op::SgdUpdate { lr }, &[&w, &g])?;
            if nw.placements() != w.placements() {
                nw = nw.redistribute_labeled(w.placements(), &mut self.env.ledger, &format!("{}.store", spec.path))?;
            }
            self.params[i].1 = nw;
        }
        Ok(loss)
    }
}

impl Backend for DistExec {
    type Value = DTensor;
    type Error = Error;

    fn apply(&mut self, site: &str, op: &Op, inputs: &[&DTensor]) -> Result<DTensor, Error> {
        let site = self.namer.name(site);
        let mut moved: Vec<Option<DTensor>> = vec![None; inputs.len()];
        for (k, slot) in moved.iter_mut().enumerate() {
            let acts = self.actions(&site, HookPoint::ForwardPre, "<in>", k);
            if !acts.is_empty() {
                let label = format!("{site}.{}", crate::dispatch::operand_name(k));
                *slot = Some(self.run_actions(&label, &acts, inputs[k].clone())?);
            }
        }
        let ready: Vec<&DTensor> = inputs.iter().zip(&moved).map(|(t, m)| m.as_ref().unwrap_or(t)).collect();
        let post = self.actions(&site, HookPoint::ForwardPost, "<out>", 0);
        let annotation = post.iter().find_map(|a| match a {
            Action::Annotate { placements, mesh } => match scope(&site, placements, mesh.as_deref(), &self.mesh) {
                Ok(Scope::Full) => Some(placements.clone()),
                _ => None,
            },
            _ => None,
        });
        let mut call = Call::new(&site, op, ready);
        if let Some(a) = annotation {
            call = call.with_annotation(a);
        }
        let out = self.dispatcher.dispatch(&mut self.env, call)?;
        if post.is_empty() {
            return Ok(out);
        }
        self.run_actions(&format!("{site}.<out>"), &post, out)
    }

    fn shape(&self, v: &DTensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn seed_grad(&mut self, loss: &DTensor) -> Result<DTensor, Error> {
        let ones = Tensor::full(loss.shape(), loss.dtype(), 1.0)?;
        DTensor::distribute(&ones, ShardSpec::replicate(self.mesh.clone()))
    }

    fn backward_hook(&mut self, hook: usize, grad: DTensor) -> Result<DTensor, Error> {
        let (module, tensor, operand) = self.grad_hooks[hook].clone();
        let acts = self.actions(&module, HookPoint::BackwardPost, &tensor, operand);
        self.run_actions(&format!("{module}.{tensor}"), &acts, grad)
    }
}

impl ModelExec for DistExec {
    fn data(&mut self, tape: &mut Tape<DTensor>, module: &str, t: &Tensor) -> Result<Var, Error> {
        let acts = self.actions(module, HookPoint::ForwardPost, "<out>", 0);
        let mut pl = vec![Placement::Replicate; self.mesh.ndim()];
        let mut rest = Vec::new();
        let mut placed = false;
        for a in acts {
            match &a {
                Action::Factory { placements, mesh } if !placed => {
                    pl = apply_scoped(&pl, placements, scope(module, placements, mesh.as_deref(), &self.mesh)?);
                    placed = true;
                }
                _ => rest.push(a),
            }
        }
        let v = DTensor::distribute(t, ShardSpec::new(self.mesh.clone(), pl))?;
        let v = self.run_actions(&format!("{module}.<out>"), &rest, v)?;
        Ok(tape.leaf(v, false))
    }

    fn param(&mut self, tape: &mut Tape<DTensor>, p: &ParamSpec) -> Result<(Var, Var), Error> {
        let stored = self
            .params
            .iter()
            .find(|(q, _)| q.path == p.path)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| PlanError::UnknownPath(p.path.clone()))?;
        let acts = self.actions(&p.module, HookPoint::ForwardPre, &p.name, p.index);
        let leaf = tape.leaf(stored.clone(), true);
        if acts.is_empty() {
            return Ok((leaf, leaf));
        }
        let used = self.run_actions(&p.path, &acts, stored)?;
        Ok((leaf, tape.identity(used, leaf, None)?))
    }

    fn module_hook(&mut self, tape: &mut Tape<DTensor>, module: &str, point: HookPoint, operand: usize, v: Var) -> Result<Var, Error> {
        let tensor = if point == HookPoint::ForwardPost { "<out>" } else { "<in>" };
        let acts = self.actions(module, point, tensor, operand);
        if acts.is_empty() {
            return Ok(v);
        }
        let label = if point == HookPoint::ForwardPost {
            format!("{module}.<out>")
        } else {
            format!("{module}.{}", crate::dispatch::operand_name(operand))
        };
        let new = self.run_actions(&label, &acts, tape.value(v)?.clone())?;
        let grad_tensor = format!("{tensor}.grad");
        let hook = if self.ir.actions_for(module, HookPoint::BackwardPost, &grad_tensor, operand).next().is_some() {
            self.grad_hooks.push((module.to_string(), grad_tensor, operand));
            Some(self.grad_hooks.len() - 1)
        } else {
            None
        };
        Ok(tape.identity(new, v, hook)?)
    }
}

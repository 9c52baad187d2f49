//! Operator dispatch: bypass rules, the propagation cache, sharding
//! propagation, per-device execution and the static replay mode.

pub mod cache;
pub mod rules;
pub mod strategy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::Ledger;
use crate::dtensor::{DTensor, DTensorMeta};
use crate::engine::{kernels, DType, Op, Tensor};
use crate::placement::{format_placements, Placement, ShardSpec};
use crate::rng::{random_locals, Distribution, RngState};
use crate::Error;
pub use cache::{PropCache, Signature};
pub use rules::{default_rules, match_rule, DispatchRule, RuleAction};
pub use strategy::{propagate, PropResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DispatchError {
    #[error("no valid sharding strategy for {op} with inputs {placements}")]
    NoStrategy { op: String, placements: String },
    #[error("static mode has no metadata for {operand} of {op}")]
    StaticMetadataMissing { op: String, operand: String },
    #[error("output given to {op} has shape {given:?}, expected {expected:?}")]
    OutShape { op: String, given: Vec<usize>, expected: Vec<usize> },
    #[error("{op} needs equal operand shapes, got {lhs:?} and {rhs:?}")]
    OperandShapes { op: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("placement decisions at `{site}` differ between recorded iterations")]
    DataDependent { site: String },
    #[error("unknown dispatch mode `{0}`")]
    UnknownMode(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Dynamic,
    StaticEager,
    Record,
}

impl FromStr for Mode {
    type Err = DispatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(Mode::Dynamic),
            "static" => Ok(Mode::StaticEager),
            "record" => Ok(Mode::Record),
            _ => Err(DispatchError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dynamic => "dynamic",
            Mode::StaticEager => "static",
            Mode::Record => "record",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub hits: u64,
    pub misses: u64,
    pub inferences: u64,
    /// Bypass count per rule action.
    pub bypass: BTreeMap<String, u64>,
}

/// Mutable runtime state shared by every dispatch of a run.
#[derive(Clone, Debug)]
pub struct Env {
    pub ledger: Ledger,
    pub rng: RngState,
    pub threads: usize,
}

impl Env {
    pub fn new(rng: RngState) -> Self {
        Self {
            ledger: Ledger::default(),
            rng,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperandTrace {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub src: Vec<Placement>,
    pub chosen: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceEvent {
    Op {
        site: String,
        op: String,
        mesh: String,
        random: bool,
        /// Rule that handled the call, if any.
        bypass: Option<String>,
        inputs: Vec<OperandTrace>,
        output: Vec<Placement>,
    },
    Grad {
        param: String,
        mesh: String,
        placements: Vec<Placement>,
    },
}

/// One operator call.
#[derive(Clone, Debug)]
pub struct Call<'a> {
    pub site: &'a str,
    pub op: &'a Op,
    pub inputs: Vec<&'a DTensor>,
    /// Output tensor supplied by the caller.
    pub out: Option<&'a DTensorMeta>,
    pub custom_meta: Option<&'a str>,
    /// Output placements installed by a plan, used by static mode.
    pub annotation: Option<Vec<Placement>>,
}

impl<'a> Call<'a> {
    pub fn new(site: &'a str, op: &'a Op, inputs: Vec<&'a DTensor>) -> Self {
        Self {
            site,
            op,
            inputs,
            out: None,
            custom_meta: None,
            annotation: None,
        }
    }

    pub fn with_out(mut self, out: &'a DTensorMeta) -> Self {
        self.out = Some(out);
        self
    }

    pub fn with_custom_meta(mut self, meta: &'a str) -> Self {
        self.custom_meta = Some(meta);
        self
    }

    pub fn with_annotation(mut self, placements: Vec<Placement>) -> Self {
        self.annotation = Some(placements);
        self
    }
}

/// Operand name used in plan paths: `<in>` for the first, `<in:k>` after.
pub fn operand_name(k: usize) -> String {
    if k == 0 {
        "<in>".to_string()
    } else {
        format!("<in:{k}>")
    }
}

fn check_mesh(inputs: &[&DTensor]) -> Result<(), Error> {
    let first = inputs[0].mesh();
    match inputs.iter().find(|t| t.mesh() != first) {
        Some(other) => Err(Error::MeshMismatch {
            expected: first.name().to_string(),
            actual: other.mesh().name().to_string(),
        }),
        None => Ok(()),
    }
}

/// Runs `op` on every device's locals and wraps the result with `out`.
pub fn execute_local(op: &Op, inputs: &[&DTensor], out: DTensorMeta, env: &mut Env) -> Result<DTensor, Error> {
    if let Op::Bernoulli { p } = op {
        let locals = random_locals(&out.spec, &out.global_shape, &Distribution::Bernoulli { p: *p }, &mut env.rng, env.threads)?;
        return DTensor::from_locals(out, locals);
    }
    let denom = inputs[0].meta.numel();
    let mesh = out.mesh().clone();
    let locals = (0..mesh.size())
        .into_par_iter()
        .map(|dev| {
            let view = out.view(&mesh.coord_of_index(dev))?;
            let args: Vec<&Tensor> = inputs.iter().map(|t| t.local(dev)).collect();
            Ok(op.run_local(&args, denom, &view.local_shape)?)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    DTensor::from_locals(out, locals)
}

pub struct Dispatcher {
    pub mode: Mode,
    rules: Vec<DispatchRule>,
    cache: Arc<PropCache>,
    cache_enabled: bool,
    inferences: u64,
    bypass: BTreeMap<String, u64>,
    trace: Vec<TraceEvent>,
}

impl Default for Dispatcher {
    fn default() -> Self {
        Self::new(Mode::Dynamic)
    }
}

impl Dispatcher {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            rules: default_rules(),
            cache: Arc::new(PropCache::new()),
            cache_enabled: true,
            inferences: 0,
            bypass: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn with_rules(mut self, rules: Vec<DispatchRule>) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_cache(mut self, cache: Arc<PropCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn set_cache_enabled(&mut self, on: bool) {
        self.cache_enabled = on;
    }

    pub fn rules(&self) -> &[DispatchRule] {
        &self.rules
    }

    pub fn cache(&self) -> &Arc<PropCache> {
        &self.cache
    }

    pub fn counters(&self) -> Counters {
        Counters {
            hits: self.cache.hits(),
            misses: self.cache.misses(),
            inferences: self.inferences,
            bypass: self.bypass.clone(),
        }
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    /// Logs the placement a parameter gradient reached before reduction.
    pub fn record_grad(&mut self, param: &str, grad: &DTensor) {
        if self.mode == Mode::Record {
            self.trace.push(TraceEvent::Grad {
                param: param.to_string(),
                mesh: grad.mesh().name().to_string(),
                placements: grad.placements().to_vec(),
            });
        }
    }

    fn bump(&mut self, action: RuleAction) {
        *self.bypass.entry(action.as_str().to_string()).or_default() += 1;
    }

    fn infer(&mut self, op: &Op, metas: &[&DTensorMeta]) -> Result<PropResult, Error> {
        self.inferences += 1;
        propagate(op, metas).ok_or_else(|| {
            let placements: Vec<String> = metas.iter().map(|m| format_placements(m.placements())).collect();
            DispatchError::NoStrategy {
                op: op.to_string(),
                placements: placements.join(" / "),
            }
            .into()
        })
    }

    fn log(&mut self, call: &Call<'_>, bypass: Option<RuleAction>, inputs: Vec<OperandTrace>, out: &DTensor) {
        if self.mode == Mode::Record {
            self.trace.push(TraceEvent::Op {
                site: call.site.to_string(),
                op: call.op.to_string(),
                mesh: out.mesh().name().to_string(),
                random: matches!(call.op, Op::Bernoulli { .. }),
                bypass: bypass.map(|a| a.as_str().to_string()),
                inputs,
                output: out.placements().to_vec(),
            });
        }
    }

    pub fn dispatch(&mut self, env: &mut Env, call: Call<'_>) -> Result<DTensor, Error> {
        let op = call.op;
        op.check_arity(call.inputs.len())?;
        check_mesh(&call.inputs)?;
        let metas: Vec<&DTensorMeta> = call.inputs.iter().map(|t| &t.meta).collect();
        let unchanged = || -> Vec<OperandTrace> {
            metas
                .iter()
                .map(|m| OperandTrace {
                    shape: m.global_shape.clone(),
                    dtype: m.dtype,
                    src: m.placements().to_vec(),
                    chosen: m.placements().to_vec(),
                })
                .collect()
        };

        let sig = rules::Signature {
            op_name: op.name(),
            op_kind: if call.out.is_some() { "out-given" } else { op.kind().as_str() },
            inputs: rules::input_classes(metas.iter().map(|m| m.placements())),
            custom_meta: call.custom_meta.unwrap_or(""),
        };
        if let Some(action) = match_rule(&self.rules, &sig).map(|r| r.action) {
            if let Some(out) = self.bypass_action(env, &call, action)? {
                self.bump(action);
                self.log(&call, Some(action), unchanged(), &out);
                return Ok(out);
            }
        }

        if self.mode == Mode::StaticEager {
            let out_pl = match &call.annotation {
                Some(pl) => pl.clone(),
                None if metas.iter().all(|m| m.placements() == metas[0].placements()) => metas[0].placements().to_vec(),
                None => {
                    return Err(DispatchError::StaticMetadataMissing {
                        op: call.site.to_string(),
                        operand: "<out>".to_string(),
                    }
                    .into())
                }
            };
            let shapes: Vec<&[usize]> = metas.iter().map(|m| m.global_shape.as_slice()).collect();
            let meta = DTensorMeta::new(op.out_shape(&shapes)?, ShardSpec::new(metas[0].mesh().clone(), out_pl), op.out_dtype(metas[0].dtype))?;
            return execute_local(op, &call.inputs, meta, env);
        }

        let prop = if self.cache_enabled {
            let key = Signature::of(op, &metas);
            match self.cache.get(&key) {
                Some(p) => p,
                None => {
                    let p = self.infer(op, &metas)?;
                    self.cache.insert(key, p.clone());
                    p
                }
            }
        } else {
            self.infer(op, &metas)?
        };

        let mut moved: Vec<DTensor> = Vec::new();
        let mut traces = Vec::with_capacity(call.inputs.len());
        for (k, t) in call.inputs.iter().enumerate() {
            traces.push(OperandTrace {
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
                src: t.placements().to_vec(),
                chosen: prop.inputs[k].clone(),
            });
            if t.placements() != prop.inputs[k].as_slice() {
                let label = format!("{}.{}", call.site, operand_name(k));
                moved.push(t.redistribute_labeled(&prop.inputs[k], &mut env.ledger, &label)?);
            }
        }
        let mut it = moved.iter();
        let ready: Vec<&DTensor> = call
            .inputs
            .iter()
            .zip(&prop.inputs)
            .map(|(t, want)| if t.placements() == want.as_slice() { *t } else { it.next().expect("moved") })
            .collect();
        let out = execute_local(op, &ready, prop.output, env)?;
        self.log(&call, None, traces, &out);
        Ok(out)
    }

    /// `Some` when the rule handled the call; `None` to fall through.
    fn bypass_action(&mut self, env: &mut Env, call: &Call<'_>, action: RuleAction) -> Result<Option<DTensor>, Error> {
        let op = call.op;
        let metas: Vec<&DTensorMeta> = call.inputs.iter().map(|t| &t.meta).collect();
        let shapes: Vec<&[usize]> = metas.iter().map(|m| m.global_shape.as_slice()).collect();
        match action {
            RuleAction::LocalCompare => Ok(None),
            RuleAction::ReuseOut => {
                let out = call.out.expect("out-given").clone();
                let expected = op.out_shape(&shapes)?;
                if out.global_shape != expected {
                    return Err(DispatchError::OutShape {
                        op: call.site.to_string(),
                        given: out.global_shape,
                        expected,
                    }
                    .into());
                }
                execute_local(op, &call.inputs, out, env).map(Some)
            }
            RuleAction::HalfwayPartial => {
                let Some(pl) = strategy::lookup_exact(op, &metas) else { return Ok(None) };
                if !pl.iter().any(Placement::is_partial) {
                    return Ok(None);
                }
                let Ok(meta) = DTensorMeta::new(op.out_shape(&shapes)?, ShardSpec::new(metas[0].mesh().clone(), pl), op.out_dtype(metas[0].dtype)) else {
                    return Ok(None);
                };
                execute_local(op, &call.inputs, meta, env).map(Some)
            }
            RuleAction::CommFreeAdd => {
                let (a, b) = (call.inputs[0], call.inputs[1]);
                if a.shape() != b.shape() {
                    return Err(DispatchError::OperandShapes {
                        op: call.site.to_string(),
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    }
                    .into());
                }
                let partial = a.meta.spec.partial_dims();
                let mesh = a.mesh().clone();
                let locals = (0..mesh.size())
                    .into_par_iter()
                    .map(|dev| {
                        let coord = mesh.coord_of_index(dev);
                        let bl = b.local(dev);
                        if partial.iter().any(|&d| coord[d] != 0) {
                            kernels::add(a.local(dev), &Tensor::zeros(bl.shape(), bl.dtype()))
                        } else {
                            kernels::add(a.local(dev), bl)
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                DTensor::from_locals(a.meta.clone(), locals).map(Some)
            }
        }
    }

    /// Elementwise equality of two distributed tensors as a plain boolean.
    pub fn equal(&mut self, env: &mut Env, a: &DTensor, b: &DTensor) -> Result<bool, Error> {
        check_mesh(&[a, b])?;
        let sig = rules::Signature {
            op_name: "equal",
            op_kind: "comparison",
            inputs: rules::input_classes([a.placements(), b.placements()]),
            custom_meta: "",
        };
        if a.shape() != b.shape() || a.dtype() != b.dtype() {
            return Ok(false);
        }
        let rule = match_rule(&self.rules, &sig).map(|r| r.action);
        if rule == Some(RuleAction::LocalCompare) {
            self.bump(RuleAction::LocalCompare);
            if a.placements() == b.placements() && a.meta.spec.partial_dims().is_empty() {
                return Ok(a.locals().iter().zip(b.locals()).all(|(x, y)| x.bit_eq(y)));
            }
            return Ok(a.to_global()?.bit_eq(&b.to_global()?));
        }
        let all_r = vec![Placement::Replicate; a.mesh().ndim()];
        let ga = a.redistribute_labeled(&all_r, &mut env.ledger, "equal.<in>")?;
        let gb = b.redistribute_labeled(&all_r, &mut env.ledger, "equal.<in:1>")?;
        Ok(ga.local(0).bit_eq(gb.local(0)))
    }
}

fn module_of(site: &str) -> &str {
    site.rsplit_once('.').map_or(site, |(m, _)| m)
}

/// Plan directives that reproduce one recorded iteration under static mode.
/// Every further iteration must make the same decisions.
pub fn record_static_plan(iterations: &[Vec<TraceEvent>]) -> Result<Vec<String>, Error> {
    let Some(first) = iterations.first() else { return Ok(Vec::new()) };
    for it in &iterations[1..] {
        if it.len() != first.len() {
            return Err(DispatchError::DataDependent {
                site: "<iteration>".to_string(),
            }
            .into());
        }
        if let Some((a, _)) = first.iter().zip(it).find(|(a, b)| a != b) {
            let site = match a {
                TraceEvent::Op { site, .. } => site.clone(),
                TraceEvent::Grad { param, .. } => format!("{param}.grad"),
            };
            return Err(DispatchError::DataDependent { site }.into());
        }
    }
    let mut seen: BTreeMap<String, &TraceEvent> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in first {
        let key = match ev {
            TraceEvent::Op { site, .. } => site.clone(),
            TraceEvent::Grad { param, .. } => format!("{param}.grad"),
        };
        if let Some(prev) = seen.insert(key.clone(), ev) {
            if prev != ev {
                return Err(DispatchError::DataDependent { site: key }.into());
            }
            continue;
        }
        match ev {
            TraceEvent::Op {
                site,
                mesh,
                random,
                bypass,
                inputs,
                output,
                ..
            } => {
                if bypass.is_some() {
                    continue;
                }
                for (k, t) in inputs.iter().enumerate() {
                    if t.src != t.chosen {
                        out.push(format!(
                            "redistribute {site}.{} {}->{} @{mesh}",
                            operand_name(k),
                            format_placements(&t.src),
                            format_placements(&t.chosen)
                        ));
                    }
                }
                let passthrough = inputs.iter().all(|t| t.chosen == *output);
                if !passthrough {
                    out.push(format!("annotate {site}.<out> {} @{mesh}", format_placements(output)));
                }
                if *random && !inputs[0].chosen.iter().all(Placement::is_replicate) {
                    out.push(format!("annotate {}.<in> {} @{mesh}", module_of(site), format_placements(&inputs[0].chosen)));
                }
            }
            TraceEvent::Grad { param, mesh, placements } => {
                if !placements.iter().all(Placement::is_replicate) {
                    out.push(format!("annotate {param}.grad {} @{mesh}", format_placements(placements)));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::DeviceMesh;

    fn env() -> Env {
        Env::new(RngState::new(0))
    }

    fn dt(mesh: &DeviceMesh, shape: &[usize], vals: Vec<f64>, pl: Vec<Placement>) -> DTensor {
        DTensor::distribute(&Tensor::from_f64(shape, vals).unwrap(), ShardSpec::new(mesh.clone(), pl)).unwrap()
    }

    #[test]
    fn repeated_mm_hits_cache() {
        let m = DeviceMesh::from_shape("m", &[("TP", 2)]).unwrap();
        let a = dt(&m, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], vec![Placement::Replicate]);
        let b = dt(&m, &[2, 2], vec![5.0, 6.0, 7.0, 8.0], vec![Placement::Shard(1)]);
        let mut d = Dispatcher::default();
        let mut e = env();
        let o1 = d.dispatch(&mut e, Call::new("mm", &Op::Mm, vec![&a, &b])).unwrap();
        let o2 = d.dispatch(&mut e, Call::new("mm", &Op::Mm, vec![&a, &b])).unwrap();
        let c = d.counters();
        assert_eq!((c.inferences, c.hits, c.misses), (1, 1, 1));
        assert_eq!(o1.placements(), &[Placement::Shard(1)]);
        assert_eq!(o1.to_global().unwrap().as_f64().unwrap(), &[19.0, 22.0, 43.0, 50.0]);
        assert!(o1.to_global().unwrap().bit_eq(&o2.to_global().unwrap()));
        assert!(e.ledger.is_empty());
    }

    #[test]
    fn equal_is_a_plain_bool() {
        let m = DeviceMesh::from_shape("m", &[("x", 2)]).unwrap();
        let a = dt(&m, &[4], vec![1.0, 2.0, 3.0, 4.0], vec![Placement::Shard(0)]);
        let b = dt(&m, &[4], vec![1.0, 2.0, 3.0, 5.0], vec![Placement::Shard(0)]);
        let mut d = Dispatcher::default();
        let mut e = env();
        assert!(d.equal(&mut e, &a, &a).unwrap());
        assert!(!d.equal(&mut e, &a, &b).unwrap());
        assert_eq!(d.counters().inferences, 0);
        assert_eq!(d.counters().bypass["local-compare"], 2);
    }

    #[test]
    fn static_mode_needs_annotations() {
        let m = DeviceMesh::from_shape("m", &[("x", 2)]).unwrap();
        let a = dt(&m, &[2, 2], vec![1.0; 4], vec![Placement::Replicate]);
        let b = dt(&m, &[2, 2], vec![1.0; 4], vec![Placement::Shard(1)]);
        let mut d = Dispatcher::new(Mode::StaticEager);
        let err = d.dispatch(&mut env(), Call::new("fc.mm", &Op::Mm, vec![&a, &b])).unwrap_err();
        assert_eq!(
            err,
            Error::Dispatch(DispatchError::StaticMetadataMissing {
                op: "fc.mm".into(),
                operand: "<out>".into()
            })
        );
        let out = d
            .dispatch(&mut env(), Call::new("fc.mm", &Op::Mm, vec![&a, &b]).with_annotation(vec![Placement::Shard(1)]))
            .unwrap();
        assert_eq!(out.to_global().unwrap().as_f64().unwrap(), &[2.0; 4]);
        assert_eq!(d.counters().inferences, 0);
    }

    #[test]
    fn replicate_trace_gives_empty_plan() {
        let m = DeviceMesh::from_shape("m", &[("x", 2)]).unwrap();
        let a = dt(&m, &[2, 2], vec![1.0; 4], vec![Placement::Replicate]);
        let mut d = Dispatcher::new(Mode::Record);
        let mut e = env();
        let h = d.dispatch(&mut e, Call::new("fc.mm", &Op::Mm, vec![&a, &a])).unwrap();
        d.dispatch(&mut e, Call::new("act.relu", &Op::Relu, vec![&h])).unwrap();
        let trace = d.take_trace();
        assert_eq!(trace.len(), 2);
        assert!(record_static_plan(&[trace]).unwrap().is_empty());
    }

    #[test]
    fn changing_decisions_are_reported() {
        let ev = |pl: Placement| TraceEvent::Op {
            site: "fc.mm".into(),
            op: "mm".into(),
            mesh: "m".into(),
            random: false,
            bypass: None,
            inputs: vec![],
            output: vec![pl],
        };
        let err = record_static_plan(&[vec![ev(Placement::Replicate)], vec![ev(Placement::P)]]).unwrap_err();
        assert_eq!(err, Error::Dispatch(DispatchError::DataDependent { site: "fc.mm".into() }));
    }
}

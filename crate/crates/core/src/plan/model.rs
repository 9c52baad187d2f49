//! A small module tree: a sequence of named layers with dotted paths, plus
//! the tensor paths a plan may address.

use std::collections::HashMap;

use crate::engine::{Backend, DType, EngineError, Op, Tape, Tensor, Var};
use crate::rng::{dropout_params, Distribution};

use super::HookPoint;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// `y = x · weight`, weight `[in, out]`.
    Linear { in_features: usize, out_features: usize, init: Distribution },
    Relu,
    /// Drop rate `p`.
    Dropout { p: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// Dotted path, e.g. `blk1.fc1`.
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub module: String,
    pub name: String,
    pub index: usize,
    pub shape: Vec<usize>,
    pub init: Distribution,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorRole {
    In(usize),
    Out,
    Param { name: String, index: usize },
    Grad { name: String, index: usize },
}

/// A concrete addressable tensor: `module` plus its role.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorPath {
    pub path: String,
    pub module: String,
    pub role: TensorRole,
}

impl TensorPath {
    fn new(module: &str, role: TensorRole) -> Self {
        let suffix = match &role {
            TensorRole::In(k) => crate::dispatch::operand_name(*k),
            TensorRole::Out => "<out>".to_string(),
            TensorRole::Param { name, .. } => name.clone(),
            TensorRole::Grad { name, .. } => format!("{name}.grad"),
        };
        Self {
            path: format!("{module}.{suffix}"),
            module: module.to_string(),
            role,
        }
    }
}

/// Hooks a model forward pass calls into. Backends without plans keep the
/// defaults.
pub trait ModelExec: Backend {
    /// Brings a host tensor into the run as the output of data module `module`.
    fn data(&mut self, tape: &mut Tape<Self::Value>, module: &str, t: &Tensor) -> Result<Var, Self::Error>;

    /// The trainable leaf for `p` and the value the layer computes with.
    fn param(&mut self, tape: &mut Tape<Self::Value>, p: &ParamSpec) -> Result<(Var, Var), Self::Error>;

    fn module_hook(&mut self, _tape: &mut Tape<Self::Value>, _module: &str, _point: HookPoint, _operand: usize, v: Var) -> Result<Var, Self::Error> {
        Ok(v)
    }
}

/// Makes repeated call sites within one step distinct: the k-th repeat of
/// `s` becomes `s~k`.
#[derive(Clone, Debug, Default)]
pub struct SiteNamer {
    seen: HashMap<String, usize>,
}

impl SiteNamer {
    pub fn name(&mut self, site: &str) -> String {
        let n = self.seen.entry(site.to_string()).or_default();
        let out = if *n == 0 { site.to_string() } else { format!("{site}~{n}") };
        *n += 1;
        out
    }

    pub fn reset(&mut self) {
        self.seen.clear();
    }
}

pub struct Forward {
    pub loss: Var,
    /// `(param path, leaf)` in parameter order.
    pub params: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub dtype: DType,
}

impl Model {
    pub fn new(layers: Vec<Layer>, dtype: DType) -> Self {
        Self { layers, dtype }
    }

    /// `fc1, act1, drop1, fc2, …` for `dims = [in, hidden…, out]`; no
    /// dropout layer when `dropout == 0`.
    pub fn mlp(dims: &[usize], dropout: f64, dtype: DType, init: impl Fn(usize, usize) -> Distribution) -> Self {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let n = i + 1;
            layers.push(Layer {
                name: format!("fc{n}"),
                kind: LayerKind::Linear {
                    in_features: dims[i],
                    out_features: dims[i + 1],
                    init: init(dims[i], dims[i + 1]),
                },
            });
            if i + 2 < dims.len() {
                layers.push(Layer {
                    name: format!("act{n}"),
                    kind: LayerKind::Relu,
                });
                if dropout > 0.0 {
                    layers.push(Layer {
                        name: format!("drop{n}"),
                        kind: LayerKind::Dropout { p: dropout },
                    });
                }
            }
        }
        Self::new(layers, dtype)
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                    init,
                } => Some(ParamSpec {
                    path: format!("{}.weight", l.name),
                    module: l.name.clone(),
                    name: "weight".into(),
                    index: 0,
                    shape: vec![*in_features, *out_features],
                    init: *init,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn in_features(&self) -> usize {
        self.params().first().map_or(0, |p| p.shape[0])
    }

    pub fn out_features(&self) -> usize {
        self.params().last().map_or(0, |p| p.shape[1])
    }

    fn prefixes(name: &str) -> Vec<String> {
        let parts: Vec<&str> = name.split('.').collect();
        (1..=parts.len()).map(|k| parts[..k].join(".")).collect()
    }

    /// Modules whose forward-pre hooks fire at layer `i`, outermost first.
    pub fn pre_modules(&self, i: usize) -> Vec<String> {
        Self::prefixes(&self.layers[i].name)
            .into_iter()
            .filter(|m| self.layers[..i].iter().all(|l| !Self::prefixes(&l.name).contains(m)))
            .collect()
    }

    /// Modules whose forward-post hooks fire after layer `i`, innermost first.
    pub fn post_modules(&self, i: usize) -> Vec<String> {
        let mut v: Vec<String> = Self::prefixes(&self.layers[i].name)
            .into_iter()
            .filter(|m| self.layers[i + 1..].iter().all(|l| !Self::prefixes(&l.name).contains(m)))
            .collect();
        v.reverse();
        v
    }

    /// Every path a plan may name: data, layer and ancestor modules,
    /// parameters and their gradients, and each op site of one training step.
    pub fn tensor_paths(&self, batch: usize) -> Vec<TensorPath> {
        let mut out = vec![TensorPath::new("input", TensorRole::Out), TensorPath::new("target", TensorRole::Out)];
        let mut modules: Vec<String> = Vec::new();
        for l in &self.layers {
            for m in Self::prefixes(&l.name) {
                if !modules.contains(&m) {
                    modules.push(m);
                }
            }
        }
        for m in &modules {
            out.push(TensorPath::new(m, TensorRole::In(0)));
            out.push(TensorPath::new(m, TensorRole::Out));
        }
        out.push(TensorPath::new("loss", TensorRole::In(0)));
        out.push(TensorPath::new("loss", TensorRole::In(1)));
        out.push(TensorPath::new("loss", TensorRole::Out));
        for p in self.params() {
            out.push(TensorPath::new(&p.module, TensorRole::Param { name: p.name.clone(), index: p.index }));
            out.push(TensorPath::new(&p.module, TensorRole::Grad { name: p.name.clone(), index: p.index }));
        }
        let mut rec = ShapeExec::default();
        let x = Tensor::zeros(&[batch, self.in_features()], self.dtype);
        let y = Tensor::zeros(&[batch, self.out_features()], self.dtype);
        let mut tape = Tape::new();
        if let Ok(fwd) = self.forward(&mut rec, &mut tape, &x, &y) {
            let _ = tape.backward(&mut rec, fwd.loss);
        }
        for p in self.params() {
            rec.sites.push((format!("{}.sgd", p.path), 2));
        }
        for (site, arity) in rec.sites {
            for k in 0..arity {
                out.push(TensorPath::new(&site, TensorRole::In(k)));
            }
            out.push(TensorPath::new(&site, TensorRole::Out));
        }
        out
    }

    /// One forward pass ending in the MSE loss against `y`.
    pub fn forward<E: ModelExec>(&self, exec: &mut E, tape: &mut Tape<E::Value>, x: &Tensor, y: &Tensor) -> Result<Forward, E::Error> {
        let mut h = exec.data(tape, "input", x)?;
        let mut t = exec.data(tape, "target", y)?;
        let params = self.params();
        let mut leaves = Vec::new();
        let mut next_param = params.iter();
        for (i, layer) in self.layers.iter().enumerate() {
            for m in self.pre_modules(i) {
                h = exec.module_hook(tape, &m, HookPoint::ForwardPre, 0, h)?;
            }
            let name = &layer.name;
            h = match &layer.kind {
                LayerKind::Linear { .. } => {
                    let p = next_param.next().expect("one param per linear layer");
                    let (leaf, w) = exec.param(tape, p)?;
                    leaves.push((p.path.clone(), leaf));
                    tape.apply(exec, &format!("{name}.mm"), Op::Mm, &[h, w])?
                }
                LayerKind::Relu => tape.apply(exec, &format!("{name}.relu"), Op::Relu, &[h])?,
                LayerKind::Dropout { p } => {
                    let (keep, scale) = dropout_params(*p).map_err(|_| EngineError::Unsupported { op: "dropout", dtype: self.dtype })?;
                    let mask = tape.apply(exec, &format!("{name}.mask"), Op::Bernoulli { p: keep }, &[h])?;
                    tape.apply(exec, &format!("{name}.apply"), Op::DropoutApply { scale }, &[h, mask])?
                }
            };
            for m in self.post_modules(i) {
                h = exec.module_hook(tape, &m, HookPoint::ForwardPost, 0, h)?;
            }
        }
        h = exec.module_hook(tape, "loss", HookPoint::ForwardPre, 0, h)?;
        t = exec.module_hook(tape, "loss", HookPoint::ForwardPre, 1, t)?;
        let loss = tape.apply(exec, "loss.mse", Op::MseLoss, &[h, t])?;
        let loss = exec.module_hook(tape, "loss", HookPoint::ForwardPost, 0, loss)?;
        Ok(Forward { loss, params: leaves })
    }
}

/// Shape-only execution that records every op site it sees.
#[derive(Debug, Default)]
struct ShapeExec {
    namer: SiteNamer,
    sites: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
struct Shaped {
    shape: Vec<usize>,
    dtype: DType,
}

impl Backend for ShapeExec {
    type Value = Shaped;
    type Error = EngineError;

    fn apply(&mut self, site: &str, op: &Op, inputs: &[&Shaped]) -> Result<Shaped, EngineError> {
        let site = self.namer.name(site);
        self.sites.push((site, inputs.len()));
        let shapes: Vec<&[usize]> = inputs.iter().map(|s| s.shape.as_slice()).collect();
        Ok(Shaped {
            shape: op.out_shape(&shapes)?,
            dtype: op.out_dtype(inputs[0].dtype),
        })
    }

    fn shape(&self, v: &Shaped) -> Vec<usize> {
        v.shape.clone()
    }

    fn seed_grad(&mut self, loss: &Shaped) -> Result<Shaped, EngineError> {
        Ok(loss.clone())
    }
}

impl ModelExec for ShapeExec {
    fn data(&mut self, tape: &mut Tape<Shaped>, _module: &str, t: &Tensor) -> Result<Var, EngineError> {
        Ok(tape.leaf(
            Shaped {
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
            },
            false,
        ))
    }

    fn param(&mut self, tape: &mut Tape<Shaped>, p: &ParamSpec) -> Result<(Var, Var), EngineError> {
        let v = tape.leaf(
            Shaped {
                shape: p.shape.clone(),
                dtype: p.init.dtype(),
            },
            true,
        );
        Ok((v, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init(_: usize, _: usize) -> Distribution {
        Distribution::standard_normal(DType::F64)
    }

    #[test]
    fn mlp_layout_and_paths() {
        let m = Model::mlp(&[4, 8, 2], 0.1, DType::F64, init);
        let names: Vec<&str> = m.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["fc1", "act1", "drop1", "fc2"]);
        let paths: Vec<String> = m.tensor_paths(3).into_iter().map(|p| p.path).collect();
        for p in ["fc1.weight", "fc2.weight.grad", "fc1.<in>", "fc1.mm.<in:1>", "drop1.mask.<out>", "fc1.mm.bwd.mm_b.<out>", "fc2.weight.sgd.<in:1>", "loss.<in:1>", "input.<out>"] {
            assert!(paths.iter().any(|q| q == p), "missing {p}");
        }
    }

    #[test]
    fn ancestor_hooks_fire_on_first_and_last_child() {
        let layer = |n: &str| Layer {
            name: n.into(),
            kind: LayerKind::Relu,
        };
        let m = Model::new(vec![layer("blk1.a"), layer("blk1.b"), layer("blk2.a")], DType::F64);
        assert_eq!(m.pre_modules(0), ["blk1", "blk1.a"]);
        assert_eq!(m.pre_modules(1), ["blk1.b"]);
        assert_eq!(m.post_modules(1), ["blk1.b", "blk1"]);
        assert_eq!(m.post_modules(0), ["blk1.a"]);
    }

    #[test]
    fn site_namer_suffixes_repeats() {
        let mut n = SiteNamer::default();
        assert_eq!(n.name("a"), "a");
        assert_eq!(n.name("a"), "a~1");
        n.reset();
        assert_eq!(n.name("a"), "a");
    }
}

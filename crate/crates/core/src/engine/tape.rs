use std::fmt;

use super::kernels;
use super::tensor::{numel, DType, Tensor};
use super::EngineError;

/// Operators understood by the tape and by every backend.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Mm,
    Add,
    Mul,
    Relu,
    /// `(g, x)`: `g` where `x > 0`.
    ReluGrad,
    Transpose,
    Reshape(Vec<usize>),
    Sum,
    Mean,
    MseLoss,
    /// `(x, y, g)`: gradient of the mean squared error with respect to `x`.
    MseGrad,
    ExpandSum(Vec<usize>),
    ExpandMean(Vec<usize>),
    /// Keep-mask with probability `p` of `true`, shaped like the input.
    Bernoulli { p: f64 },
    /// `(x, mask)`.
    DropoutApply { scale: f64 },
    /// `(w, g)`.
    SgdUpdate { lr: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Pointwise,
    Reduction,
    View,
    Random,
    Loss,
    Optimizer,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Pointwise => "pointwise",
            OpKind::Reduction => "reduction",
            OpKind::View => "view",
            OpKind::Random => "random",
            OpKind::Loss => "loss",
            OpKind::Optimizer => "optimizer",
        }
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Mm => "mm",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::ReluGrad => "relu_grad",
            Op::Transpose => "t",
            Op::Reshape(_) => "view",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MseLoss => "mse",
            Op::MseGrad => "mse_grad",
            Op::ExpandSum(_) => "expand_sum",
            Op::ExpandMean(_) => "expand_mean",
            Op::Bernoulli { .. } => "bernoulli",
            Op::DropoutApply { .. } => "dropout",
            Op::SgdUpdate { .. } => "sgd",
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            Op::Mm => OpKind::Matmul,
            Op::Add | Op::Mul | Op::Relu | Op::ReluGrad | Op::DropoutApply { .. } | Op::MseGrad => OpKind::Pointwise,
            Op::Transpose | Op::Reshape(_) | Op::ExpandSum(_) | Op::ExpandMean(_) => OpKind::View,
            Op::Sum | Op::Mean => OpKind::Reduction,
            Op::MseLoss => OpKind::Loss,
            Op::Bernoulli { .. } => OpKind::Random,
            Op::SgdUpdate { .. } => OpKind::Optimizer,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Mm | Op::Add | Op::Mul | Op::ReluGrad | Op::MseLoss | Op::DropoutApply { .. } | Op::SgdUpdate { .. } => 2,
            Op::MseGrad => 3,
            _ => 1,
        }
    }

    /// Output shares shape and element layout with every input.
    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            Op::Add
                | Op::Mul
                | Op::Relu
                | Op::ReluGrad
                | Op::MseGrad
                | Op::Bernoulli { .. }
                | Op::DropoutApply { .. }
                | Op::SgdUpdate { .. }
        )
    }

    pub fn differentiable(&self) -> bool {
        matches!(
            self,
            Op::Mm | Op::Add | Op::Mul | Op::Relu | Op::Transpose | Op::Reshape(_) | Op::Sum | Op::Mean | Op::MseLoss | Op::DropoutApply { .. }
        )
    }

    /// Arguments that influence output metadata, for signature hashing.
    pub fn shape_args(&self) -> Option<&[usize]> {
        match self {
            Op::Reshape(s) | Op::ExpandSum(s) | Op::ExpandMean(s) => Some(s),
            _ => None,
        }
    }

    pub fn check_arity(&self, n: usize) -> Result<(), EngineError> {
        if n != self.arity() {
            return Err(EngineError::Arity {
                op: self.name(),
                expected: self.arity(),
                actual: n,
            });
        }
        Ok(())
    }

    /// Global output shape from global input shapes.
    pub fn out_shape(&self, shapes: &[&[usize]]) -> Result<Vec<usize>, EngineError> {
        self.check_arity(shapes.len())?;
        let mismatch = |lhs: &[usize], rhs: &[usize]| EngineError::ShapeMismatch {
            op: self.name(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        match self {
            Op::Mm => match (shapes[0], shapes[1]) {
                ([m, k], [k2, n]) if k == k2 => Ok(vec![*m, *n]),
                (a, b) => Err(mismatch(a, b)),
            },
            Op::Transpose => match shapes[0] {
                [r, c] => Ok(vec![*c, *r]),
                other => Err(EngineError::NotMatrix {
                    op: "t",
                    shape: other.to_vec(),
                }),
            },
            Op::Reshape(s) => {
                if numel(s) != numel(shapes[0]) {
                    return Err(mismatch(shapes[0], s));
                }
                Ok(s.clone())
            }
            Op::Sum | Op::Mean => Ok(vec![]),
            Op::MseLoss => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(shapes[0], shapes[1]));
                }
                Ok(vec![])
            }
            Op::ExpandSum(s) | Op::ExpandMean(s) => {
                if numel(shapes[0]) != 1 {
                    return Err(EngineError::NotScalar(shapes[0].to_vec()));
                }
                Ok(s.clone())
            }
            Op::MseGrad => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(shapes[0], shapes[1]));
                }
                if numel(shapes[2]) != 1 {
                    return Err(EngineError::NotScalar(shapes[2].to_vec()));
                }
                Ok(shapes[0].to_vec())
            }
            _ => {
                for s in &shapes[1..] {
                    if *s != shapes[0] {
                        return Err(mismatch(shapes[0], s));
                    }
                }
                Ok(shapes[0].to_vec())
            }
        }
    }

    pub fn out_dtype(&self, input: DType) -> DType {
        match self {
            Op::Bernoulli { .. } => DType::Bool,
            _ => input,
        }
    }

    /// Runs the local kernel. `denom` is the global element count of the
    /// first input and `out_shape` the local output shape.
    pub fn run_local(&self, inputs: &[&Tensor], denom: usize, out_shape: &[usize]) -> Result<Tensor, EngineError> {
        self.check_arity(inputs.len())?;
        match self {
            Op::Mm => kernels::mm(inputs[0], inputs[1]),
            Op::Add => kernels::add(inputs[0], inputs[1]),
            Op::Mul => kernels::mul(inputs[0], inputs[1]),
            Op::Relu => kernels::relu(inputs[0]),
            Op::ReluGrad => kernels::relu_grad(inputs[0], inputs[1]),
            Op::Transpose => kernels::transpose(inputs[0]),
            Op::Reshape(_) => kernels::reshape(inputs[0], out_shape),
            Op::Sum => kernels::sum(inputs[0]),
            Op::Mean => kernels::mean(inputs[0], denom),
            Op::MseLoss => kernels::mse_loss(inputs[0], inputs[1], denom),
            Op::MseGrad => kernels::mse_grad(inputs[0], inputs[1], inputs[2], denom),
            Op::ExpandSum(_) => kernels::expand_scalar(inputs[0], out_shape, 1.0),
            Op::ExpandMean(_) if inputs[0].dtype() == DType::I64 => kernels::expand_scalar(inputs[0], out_shape, 1.0),
            Op::ExpandMean(s) => kernels::expand_scalar(inputs[0], out_shape, 1.0 / numel(s) as f64),
            Op::DropoutApply { scale } => kernels::dropout_apply(inputs[0], inputs[1], *scale),
            Op::SgdUpdate { lr } => kernels::sgd_update(inputs[0], inputs[1], *lr),
            Op::Bernoulli { .. } => Err(EngineError::NoKernel("bernoulli")),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Reshape(s) | Op::ExpandSum(s) | Op::ExpandMean(s) => write!(f, "{}{:?}", self.name(), s),
            Op::Bernoulli { p } => write!(f, "bernoulli(p={p})"),
            Op::DropoutApply { scale } => write!(f, "dropout(scale={scale})"),
            Op::SgdUpdate { lr } => write!(f, "sgd(lr={lr})"),
            _ => f.write_str(self.name()),
        }
    }
}

/// Executes operators on some value type. `site` names the call for hooks
/// and tracing.
pub trait Backend {
    type Value: Clone;
    type Error: From<EngineError>;

    fn apply(&mut self, site: &str, op: &Op, inputs: &[&Self::Value]) -> Result<Self::Value, Self::Error>;

    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    /// The gradient `1` of a scalar loss.
    fn seed_grad(&mut self, loss: &Self::Value) -> Result<Self::Value, Self::Error>;

    /// Applied to the gradient flowing through an identity node.
    fn backward_hook(&mut self, _hook: usize, grad: Self::Value) -> Result<Self::Value, Self::Error> {
        Ok(grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf,
    Op { op: Op, site: String, inputs: Vec<Var> },
    Identity { input: Var, hook: Option<usize> },
}

#[derive(Clone, Debug)]
struct Node<V> {
    value: V,
    kind: NodeKind,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, so index order
/// is a topological order.
#[derive(Clone, Debug)]
pub struct Tape<V> {
    nodes: Vec<Node<V>>,
    grads: Vec<Option<V>>,
}

impl<V: Clone> Default for Tape<V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<V: Clone> Tape<V> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: V, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<V>, EngineError> {
        self.nodes.get(v.0).ok_or(EngineError::UnknownVar(v.0))
    }

    pub fn leaf(&mut self, value: V, requires_grad: bool) -> Var {
        self.push(value, NodeKind::Leaf, requires_grad)
    }

    /// Records `value` as a view of `input` whose gradient passes through,
    /// optionally via the backend's hook `hook`.
    pub fn identity(&mut self, value: V, input: Var, hook: Option<usize>) -> Result<Var, EngineError> {
        let rg = self.node(input)?.requires_grad;
        Ok(self.push(value, NodeKind::Identity { input, hook }, rg))
    }

    pub fn value(&self, v: Var) -> Result<&V, EngineError> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.get(v.0).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn apply<B: Backend<Value = V>>(&mut self, backend: &mut B, site: &str, op: Op, inputs: &[Var]) -> Result<Var, B::Error> {
        let values: Vec<&V> = inputs.iter().map(|&v| self.node(v).map(|n| &n.value)).collect::<Result<_, _>>()?;
        let out = backend.apply(site, &op, &values)?;
        let rg = op.differentiable() && inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            out,
            NodeKind::Op {
                op,
                site: site.to_string(),
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Gradient of `v` from the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&V> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<V> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn accumulate<B: Backend<Value = V>>(&mut self, backend: &mut B, site: &str, target: Var, g: V) -> Result<(), B::Error> {
        if !self.requires_grad(target) {
            return Ok(());
        }
        let slot = &mut self.grads[target.0];
        *slot = Some(match slot.take() {
            None => g,
            Some(old) => backend.apply(&format!("{site}.bwd.acc"), &Op::Add, &[&old, &g])?,
        });
        Ok(())
    }

    /// Populates gradients for every node reachable from `loss`.
    pub fn backward<B: Backend<Value = V>>(&mut self, backend: &mut B, loss: Var) -> Result<(), B::Error> {
        let value = &self.node(loss)?.value;
        let shape = backend.shape(value);
        if numel(&shape) != 1 {
            return Err(EngineError::NonScalarLoss(shape).into());
        }
        let seed = backend.seed_grad(value)?;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].clone() else { continue };
            let kind = self.nodes[idx].kind.clone();
            match kind {
                NodeKind::Leaf => {}
                NodeKind::Identity { input, hook } => {
                    let g = match hook {
                        Some(h) => backend.backward_hook(h, g)?,
                        None => g,
                    };
                    self.accumulate(backend, "identity", input, g)?;
                }
                NodeKind::Op { op, site, inputs } => {
                    self.backward_op(backend, &op, &site, &inputs, g)?;
                }
            }
        }
        Ok(())
    }

    fn backward_op<B: Backend<Value = V>>(&mut self, backend: &mut B, op: &Op, site: &str, inputs: &[Var], g: V) -> Result<(), B::Error> {
        let val = |t: &Self, i: usize| t.nodes[inputs[i].0].value.clone();
        let need = |t: &Self, i: usize| t.requires_grad(inputs[i]);
        let sub = |name: &str| format!("{site}.bwd.{name}");
        match op {
            Op::Mm => {
                if need(self, 0) {
                    let bt = backend.apply(&sub("t_b"), &Op::Transpose, &[&val(self, 1)])?;
                    let da = backend.apply(&sub("mm_a"), &Op::Mm, &[&g, &bt])?;
                    self.accumulate(backend, site, inputs[0], da)?;
                }
                if need(self, 1) {
                    let at = backend.apply(&sub("t_a"), &Op::Transpose, &[&val(self, 0)])?;
                    let db = backend.apply(&sub("mm_b"), &Op::Mm, &[&at, &g])?;
                    self.accumulate(backend, site, inputs[1], db)?;
                }
            }
            Op::Add => {
                self.accumulate(backend, site, inputs[0], g.clone())?;
                self.accumulate(backend, site, inputs[1], g)?;
            }
            Op::Mul => {
                if need(self, 0) {
                    let da = backend.apply(&sub("mul_a"), &Op::Mul, &[&g, &val(self, 1)])?;
                    self.accumulate(backend, site, inputs[0], da)?;
                }
                if need(self, 1) {
                    let db = backend.apply(&sub("mul_b"), &Op::Mul, &[&g, &val(self, 0)])?;
                    self.accumulate(backend, site, inputs[1], db)?;
                }
            }
            Op::Relu => {
                let dx = backend.apply(&sub("relu"), &Op::ReluGrad, &[&g, &val(self, 0)])?;
                self.accumulate(backend, site, inputs[0], dx)?;
            }
            Op::Transpose => {
                let dx = backend.apply(&sub("t"), &Op::Transpose, &[&g])?;
                self.accumulate(backend, site, inputs[0], dx)?;
            }
            Op::Reshape(_) => {
                let shape = backend.shape(&val(self, 0));
                let dx = backend.apply(&sub("view"), &Op::Reshape(shape), &[&g])?;
                self.accumulate(backend, site, inputs[0], dx)?;
            }
            Op::Sum | Op::Mean => {
                let shape = backend.shape(&val(self, 0));
                let expand = if *op == Op::Sum {
                    Op::ExpandSum(shape)
                } else {
                    Op::ExpandMean(shape)
                };
                let dx = backend.apply(&sub("expand"), &expand, &[&g])?;
                self.accumulate(backend, site, inputs[0], dx)?;
            }
            Op::MseLoss => {
                let (x, y) = (val(self, 0), val(self, 1));
                if need(self, 0) {
                    let dx = backend.apply(&sub("mse"), &Op::MseGrad, &[&x, &y, &g])?;
                    self.accumulate(backend, site, inputs[0], dx)?;
                }
                if need(self, 1) {
                    let dy = backend.apply(&sub("mse_y"), &Op::MseGrad, &[&y, &x, &g])?;
                    self.accumulate(backend, site, inputs[1], dy)?;
                }
            }
            Op::DropoutApply { scale } => {
                let dx = backend.apply(&sub("dropout"), &Op::DropoutApply { scale: *scale }, &[&g, &val(self, 1)])?;
                self.accumulate(backend, site, inputs[0], dx)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Plain single-device execution with no source of randomness.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;
    type Error = EngineError;

    fn apply(&mut self, _site: &str, op: &Op, inputs: &[&Tensor]) -> Result<Tensor, EngineError> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out = op.out_shape(&shapes)?;
        op.run_local(inputs, inputs[0].numel(), &out)
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn seed_grad(&mut self, loss: &Tensor) -> Result<Tensor, EngineError> {
        Tensor::full(&[], loss.dtype(), 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = tape.apply(&mut Eager, "s", Op::Sum, &[x]).unwrap();
        tape.backward(&mut Eager, s).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_f64().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_mse_closed_form() {
        let mut tape = Tape::new();
        let xv = vec![1.0, 2.0, 3.0, 4.0];
        let yv = vec![0.5, 2.5, 1.0, 4.0];
        let x = tape.leaf(t(&[4], xv.clone()), true);
        let y = tape.leaf(t(&[4], yv.clone()), false);
        let l = tape.apply(&mut Eager, "loss", Op::MseLoss, &[x, y]).unwrap();
        tape.backward(&mut Eager, l).unwrap();
        let expected: Vec<f64> = xv.iter().zip(&yv).map(|(a, b)| 2.0 * (a - b) / 4.0).collect();
        assert_eq!(tape.grad(x).unwrap().as_f64().unwrap(), &expected[..]);
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]), true);
        let r = tape.apply(&mut Eager, "r", Op::Relu, &[x]).unwrap();
        assert!(matches!(tape.backward(&mut Eager, r), Err(EngineError::NonScalarLoss(_))));
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![3.0, -1.0]), true);
        let y = tape.apply(&mut Eager, "m", Op::Mul, &[x, x]).unwrap();
        let s = tape.apply(&mut Eager, "s", Op::Sum, &[y]).unwrap();
        tape.backward(&mut Eager, s).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_f64().unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn identity_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![3.0, -1.0]), true);
        let v = tape.value(x).unwrap().clone();
        let y = tape.identity(v, x, None).unwrap();
        let s = tape.apply(&mut Eager, "s", Op::Mean, &[y]).unwrap();
        tape.backward(&mut Eager, s).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_f64().unwrap(), &[0.5, 0.5]);
    }
}

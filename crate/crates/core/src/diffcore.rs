//! Scalar reverse-mode differentiation.
//!
//! A [`ValueGraph`] is an append-only record of scalar operations. Every node
//! stores its forward value at construction time, operands always point to
//! earlier nodes, so a single reverse sweep over the node list is a valid
//! topological traversal for [`ValueGraph::backward`].
//!
//! [`finite_diff_grad`] is the independent check used throughout the crate:
//! every analytic gradient is compared against central differences.

use thiserror::Error;

/// Handle to a node inside one [`ValueGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags understood by [`ValueGraph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Mul,
    Neg,
    Exp,
    Log,
    Relu,
    /// Binary max. The subgradient at a tie goes to the first operand.
    Max,
    /// N-ary sum.
    Sum,
}

impl Op {
    fn arity(self) -> Option<usize> {
        match self {
            Op::Add | Op::Mul | Op::Max => Some(2),
            Op::Neg | Op::Exp | Op::Log | Op::Relu => Some(1),
            Op::Sum => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Leaf,
    Op(Op),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: Kind,
    start: u32,
    len: u32,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node handle {0} does not exist in this graph")]
    InvalidHandle(usize),
    #[error("{op:?} expects {expected} operands, got {got}")]
    Arity { op: Op, expected: usize, got: usize },
    #[error("log of non-positive value {value} at node {node}")]
    Domain { node: usize, value: f64 },
    #[error("non-finite value {value} produced by {op:?} at node {node}")]
    NonFinite { node: usize, op: Op, value: f64 },
    #[error("non-finite leaf value {value} at node {node}")]
    NonFiniteLeaf { node: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Append-only scalar computation record with accumulated gradients.
///
/// `backward` adds into the gradient table; call [`ValueGraph::reset_grads`]
/// between passes unless accumulation is intended.
#[derive(Debug, Clone, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
    operands: Vec<u32>,
    grads: Vec<f64>,
}

impl ValueGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
            operands: Vec::with_capacity(2 * nodes),
            grads: Vec::new(),
        }
    }

    /// Drops every node but keeps the allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.operands.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input node (a parameter or a data value). Gradients flow into it.
    pub fn leaf(&mut self, value: f64) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(GraphError::NonFiniteLeaf {
                node: self.nodes.len(),
                value,
            });
        }
        self.nodes.push(Node {
            kind: Kind::Leaf,
            start: 0,
            len: 0,
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constants are leaves whose gradient is simply never read.
    pub fn constant(&mut self, value: f64) -> Result<NodeId> {
        self.leaf(value)
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value
    }

    /// Accumulated partial derivative of the last backward output w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> f64 {
        self.grads.get(id.0).copied().unwrap_or(0.0)
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::InvalidHandle(id.0))
        }
    }

    /// Appends `op(operands...)` and returns the new node.
    pub fn apply(&mut self, op: Op, operands: &[NodeId]) -> Result<NodeId> {
        if let Some(expected) = op.arity() {
            if operands.len() != expected {
                return Err(GraphError::Arity {
                    op,
                    expected,
                    got: operands.len(),
                });
            }
        }
        for &id in operands {
            self.check(id)?;
        }
        let v = |i: usize| self.nodes[operands[i].0].value;
        let node = self.nodes.len();
        let value = match op {
            Op::Add => v(0) + v(1),
            Op::Mul => v(0) * v(1),
            Op::Neg => -v(0),
            Op::Exp => v(0).exp(),
            Op::Log => {
                let x = v(0);
                if x <= 0.0 || x.is_nan() {
                    return Err(GraphError::Domain { node, value: x });
                }
                x.ln()
            }
            Op::Relu => v(0).max(0.0),
            Op::Max => {
                if v(0) >= v(1) {
                    v(0)
                } else {
                    v(1)
                }
            }
            Op::Sum => operands.iter().map(|id| self.nodes[id.0].value).sum(),
        };
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node, op, value });
        }
        let start = self.operands.len() as u32;
        self.operands.extend(operands.iter().map(|id| id.0 as u32));
        self.nodes.push(Node {
            kind: Kind::Op(op),
            start,
            len: operands.len() as u32,
            value,
        });
        Ok(NodeId(node))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Max, &[a, b])
    }

    pub fn sum(&mut self, operands: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Sum, operands)
    }

    /// `a - b`, recorded as `add(a, neg(b))`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(c)?;
        self.mul(k, a)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(c)?;
        self.add(a, k)
    }

    /// `|a|` as `max(a, -a)`; the subgradient at zero is +1.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.neg(a)?;
        self.max(a, na)
    }

    /// Smallest distance of any `relu` input from 0 or of any `max` operand
    /// pair from a tie: how far the recorded point is from a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let ops = &self.operands[node.start as usize..(node.start + node.len) as usize];
            let v = |k: usize| self.nodes[ops[k] as usize].value;
            match node.kind {
                Kind::Op(Op::Relu) => margin = margin.min(v(0).abs()),
                Kind::Op(Op::Max) => margin = margin.min((v(0) - v(1)).abs()),
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from `output`, adding `d output / d node` into the
    /// gradient table for every node. Nodes not reachable from `output`
    /// receive exactly zero.
    pub fn backward(&mut self, output: NodeId) -> Result<&[f64]> {
        self.check(output)?;
        let mut adj = vec![0.0; output.0 + 1];
        adj[output.0] = 1.0;
        for i in (0..=output.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let op = match node.kind {
                Kind::Leaf => continue,
                Kind::Op(op) => op,
            };
            let ops = &self.operands[node.start as usize..(node.start + node.len) as usize];
            let val = |k: usize| self.nodes[ops[k] as usize].value;
            match op {
                Op::Add => {
                    adj[ops[0] as usize] += g;
                    adj[ops[1] as usize] += g;
                }
                Op::Sum => {
                    for &o in ops {
                        adj[o as usize] += g;
                    }
                }
                Op::Mul => {
                    let (a, b) = (val(0), val(1));
                    adj[ops[0] as usize] += g * b;
                    adj[ops[1] as usize] += g * a;
                }
                Op::Neg => adj[ops[0] as usize] -= g,
                Op::Exp => adj[ops[0] as usize] += g * node.value,
                Op::Log => adj[ops[0] as usize] += g / val(0),
                Op::Relu => {
                    if val(0) > 0.0 {
                        adj[ops[0] as usize] += g;
                    }
                }
                Op::Max => {
                    let pick = if val(0) >= val(1) { ops[0] } else { ops[1] };
                    adj[pick as usize] += g;
                }
            }
        }
        self.grads.resize(self.nodes.len(), 0.0);
        for (acc, a) in self.grads.iter_mut().zip(adj) {
            *acc += a;
        }
        Ok(&self.grads)
    }
}

/// A learnable scalar. Bound to a node each time a graph is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: f64,
    pub grad: f64,
    /// Excluded from weight decay (log-variance parameters).
    pub decay_exempt: bool,
    node: Option<NodeId>,
}

impl Parameter {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grad: 0.0,
            decay_exempt: false,
            node: None,
        }
    }

    pub fn exempt(value: f64) -> Self {
        Self {
            decay_exempt: true,
            ..Self::new(value)
        }
    }

    /// Records the current value as a leaf of `graph`.
    pub fn bind(&mut self, graph: &mut ValueGraph) -> Result<NodeId> {
        let id = graph.leaf(self.value)?;
        self.node = Some(id);
        Ok(id)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Copies the gradient of the bound node out of `graph`.
    pub fn pull_grad(&mut self, graph: &ValueGraph) {
        self.grad = self.node.map_or(0.0, |n| graph.grad(n));
    }
}

/// Ordered collection of parameters; binding is contiguous so parameter `i`
/// maps to node `base + i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn push(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.len());
        for (p, &v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
    }

    pub fn grads(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.grad).collect()
    }

    /// Binds every parameter; returns the node handles in parameter order.
    pub fn bind_all(&mut self, graph: &mut ValueGraph) -> Result<Vec<NodeId>> {
        self.params.iter_mut().map(|p| p.bind(graph)).collect()
    }

    pub fn pull_grads(&mut self, graph: &ValueGraph) {
        for p in &mut self.params {
            p.pull_grad(graph);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FiniteDiffError {
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("non-finite evaluation at coordinate {coordinate} ({side} side): {value}")]
    NonFinite {
        coordinate: usize,
        side: &'static str,
        value: f64,
    },
    #[error("evaluation failed at coordinate {coordinate}: {message}")]
    Eval { coordinate: usize, message: String },
}

/// Central-difference gradient estimate `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F, E>(
    mut f: F,
    params: &[f64],
    h: f64,
) -> std::result::Result<Vec<f64>, FiniteDiffError>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(FiniteDiffError::BadStep(h));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut eval = |x: f64, side: &'static str, p: &mut Vec<f64>| {
            p[i] = x;
            let v = f(p).map_err(|e| FiniteDiffError::Eval {
                coordinate: i,
                message: e.to_string(),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(FiniteDiffError::NonFinite {
                    coordinate: i,
                    side,
                    value: v,
                })
            }
        };
        let plus = eval(params[i] + h, "plus", &mut p)?;
        let minus = eval(params[i] - h, "minus", &mut p)?;
        p[i] = params[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Relative gradient discrepancy with an absolute floor:
/// `|a - b| / max(|a|, |b|, abs_tol / rel_tol)`.
///
/// A value below `rel_tol` means either relative error `< rel_tol` or
/// absolute error `< abs_tol` for components near zero.
pub fn scaled_error(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(abs_tol / rel_tol);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_of_zero_is_one() {
        let mut g = ValueGraph::new();
        let x = g.leaf(0.0).unwrap();
        let y = g.exp(x).unwrap();
        assert_eq!(g.value(y), 1.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), 1.0);
    }

    #[test]
    fn relu_dead_unit() {
        let mut g = ValueGraph::new();
        let x = g.leaf(-3.0).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), 0.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), 0.0);
    }

    #[test]
    fn product_rule() {
        let mut g = ValueGraph::new();
        let a = g.leaf(2.0).unwrap();
        let b = g.leaf(3.0).unwrap();
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c), 6.0);
        g.backward(c).unwrap();
        assert_eq!((g.grad(a), g.grad(b)), (3.0, 2.0));
        assert_eq!(g.grad(c), 1.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = ValueGraph::new();
        let x = g.leaf(3.0).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), 6.0);
    }

    #[test]
    fn weighted_loss_stationary_at_log_loss() {
        // f = 0.5 exp(-s) L + 0.5 s, df/ds = -0.5 exp(-s) L + 0.5 = 0 at s = ln L.
        let mut g = ValueGraph::new();
        let s = g.leaf(4.0f64.ln()).unwrap();
        let ns = g.neg(s).unwrap();
        let w = g.exp(ns).unwrap();
        let wl = g.scale(w, 0.5 * 4.0).unwrap();
        let pen = g.scale(s, 0.5).unwrap();
        let f = g.add(wl, pen).unwrap();
        g.backward(f).unwrap();
        assert!(g.grad(s).abs() < 1e-15, "{}", g.grad(s));
    }

    #[test]
    fn log_domain_error() {
        let mut g = ValueGraph::new();
        let x = g.leaf(0.0).unwrap();
        assert_eq!(
            g.ln(x),
            Err(GraphError::Domain {
                node: 1,
                value: 0.0
            })
        );
        let y = g.leaf(-1.0).unwrap();
        assert!(matches!(g.ln(y), Err(GraphError::Domain { .. })));
    }

    #[test]
    fn exp_overflow_reports_node() {
        let mut g = ValueGraph::new();
        let x = g.leaf(1000.0).unwrap();
        match g.exp(x) {
            Err(GraphError::NonFinite { node, op, .. }) => {
                assert_eq!(node, 1);
                assert_eq!(op, Op::Exp);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn invalid_handle_and_arity() {
        let mut g = ValueGraph::new();
        let x = g.leaf(1.0).unwrap();
        assert_eq!(
            g.add(x, NodeId(5)),
            Err(GraphError::InvalidHandle(5))
        );
        assert!(matches!(
            g.apply(Op::Neg, &[x, x]),
            Err(GraphError::Arity { .. })
        ));
    }

    #[test]
    fn max_tie_goes_to_first_operand() {
        let mut g = ValueGraph::new();
        let a = g.leaf(2.0).unwrap();
        let b = g.leaf(2.0).unwrap();
        let m = g.max(a, b).unwrap();
        g.backward(m).unwrap();
        assert_eq!((g.grad(a), g.grad(b)), (1.0, 0.0));

        let mut g = ValueGraph::new();
        let a = g.leaf(1.0).unwrap();
        let b = g.leaf(2.0).unwrap();
        let m = g.max(a, b).unwrap();
        g.backward(m).unwrap();
        assert_eq!((g.grad(a), g.grad(b)), (0.0, 1.0));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = ValueGraph::new();
        let x = g.leaf(3.0).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), 12.0);
        assert_eq!(g.grad(y), 2.0);
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), 6.0);
        assert_eq!(g.grad(y), 1.0);
    }

    #[test]
    fn unreachable_gradient_is_exactly_zero() {
        let mut g = ValueGraph::new();
        let x = g.leaf(1.5).unwrap();
        let unused = g.leaf(7.0).unwrap();
        let _side = g.exp(unused).unwrap();
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused), 0.0);
        assert_eq!(g.grad(NodeId(2)), 0.0);
    }

    #[test]
    fn sum_and_abs() {
        let mut g = ValueGraph::new();
        let xs: Vec<_> = [1.0, -2.0, 0.5].iter().map(|&v| g.leaf(v).unwrap()).collect();
        let abs: Vec<_> = xs.iter().map(|&x| g.abs(x).unwrap()).collect();
        let s = g.sum(&abs).unwrap();
        assert_eq!(g.value(s), 3.5);
        g.backward(s).unwrap();
        assert_eq!(
            xs.iter().map(|&x| g.grad(x)).collect::<Vec<_>>(),
            vec![1.0, -1.0, 1.0]
        );
    }

    #[test]
    fn finite_diff_square_and_constant() {
        let d = finite_diff_grad(|p: &[f64]| Ok::<_, String>(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-6);
        let d = finite_diff_grad(|_: &[f64]| Ok::<_, String>(2.5), &[1.0, -4.0], 1e-5).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_diff_reports_bad_coordinate() {
        let f = |p: &[f64]| Ok::<_, String>(if p[1] > 1.0 { f64::NAN } else { p[0] });
        let err = finite_diff_grad(f, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(matches!(
            err,
            FiniteDiffError::NonFinite {
                coordinate: 1,
                side: "plus",
                ..
            }
        ));
        assert!(matches!(
            finite_diff_grad(|p: &[f64]| Ok::<_, String>(p[0]), &[0.0], 0.0),
            Err(FiniteDiffError::BadStep(_))
        ));
    }

    #[test]
    fn identical_inputs_give_identical_graphs() {
        let build = || {
            let mut g = ValueGraph::new();
            let a = g.leaf(0.3).unwrap();
            let b = g.leaf(-1.7).unwrap();
            let e = g.exp(b).unwrap();
            let m = g.mul(a, e).unwrap();
            let l = g.offset(m, 2.0).unwrap();
            let l = g.ln(l).unwrap();
            g.backward(l).unwrap();
            (g.value(l).to_bits(), g.grad(a).to_bits(), g.grad(b).to_bits())
        };
        assert_eq!(build(), build());
    }
}

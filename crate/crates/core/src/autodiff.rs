//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles; each recorded node keeps its inputs and a
//! [`BackwardRule`]. Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.

use std::hash::{Hash, Hasher};

use crate::tensor::{broadcast_index_map, broadcast_shape, gemm, strides_of};
use crate::{Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of one recorded operation.
///
/// Given the forward inputs, the forward output and `dL/doutput`, returns
/// `dL/dinput` for each input in order. Entries whose `needs_grad` flag is
/// false may be returned as `None` to skip work.
pub trait BackwardRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    /// Discrete choices the op made on this forward pass (ReLU on/off,
    /// max-pool winner, ...), fed into [`Tape::branch_digest`]. Smooth ops
    /// keep the empty default.
    fn branches(&self, _inputs: &[&Tensor], _output: &Tensor, _out: &mut Vec<u64>) {}
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    rule: Option<Box<dyn BackwardRule>>,
}

/// Gradient tape. Single writer; values are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// `d root / d leaf` for every leaf recorded with `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Hash of every recorded branch decision. Two tapes of the same graph
    /// with equal digests lie on the same smooth piece, so finite
    /// differences between them do not straddle a kink. Only nodes that
    /// carry a backward rule contribute.
    pub fn branch_digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut buf = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(rule) = &node.rule else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            buf.clear();
            rule.branches(&inputs, &node.value, &mut buf);
            if !buf.is_empty() {
                (i, &buf).hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends an operation node. The rule is dropped when no input needs a
    /// gradient, which keeps inference-only tapes free of backward state.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        rule: impl BackwardRule + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn BackwardRule>),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Add | Sub | Mul, Some(b)) => self.binary(op, a, b),
            (Add | Sub | Mul, None) => Err(Error::invalid(format!("{op:?} needs two operands"))),
            (_, Some(_)) => Err(Error::invalid(format!("{op:?} takes one operand"))),
            (Relu, None) => Ok(self.unary(a, Unary::Relu)),
            (Sigmoid, None) => Ok(self.unary(a, Unary::Sigmoid)),
            (Exp, None) => Ok(self.unary(a, Unary::Exp)),
            (Log, None) => {
                if self.value(a).data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::invalid("log of a non-positive value"));
                }
                Ok(self.unary(a, Unary::Log))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Log, a, None)
    }

    /// `c * a`
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Scale(c))
    }

    /// `a + c`
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Offset(c))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    fn unary(&mut self, a: Var, op: Unary) -> Var {
        let out = self.value(a).map(|x| op.apply(x));
        self.record(&[a], out, op)
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(format!("{op:?}: cannot broadcast {sa:?} with {sb:?}")))?;
        let a_map = (sa != shape.as_slice()).then(|| broadcast_index_map(sa, &shape));
        let b_map = (sb != shape.as_slice()).then(|| broadcast_index_map(sb, &shape));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = match op {
            ElementwiseOp::Add => |x: f64, y: f64| x + y,
            ElementwiseOp::Sub => |x: f64, y: f64| x - y,
            ElementwiseOp::Mul => |x: f64, y: f64| x * y,
            _ => unreachable!(),
        };
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = da[a_map.as_ref().map_or(i, |m| m[i])];
                let y = db[b_map.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(&[a, b], out, Binary { op, a_map, b_map }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut c);
        let out = Tensor::new(&[m, n], c)?;
        Ok(self.record(&[a, b], out, MatMul { m, k, n }))
    }

    /// Reduces over `axes`, removing them from the shape. An empty axis set
    /// is an identity copy.
    pub fn reduce(&mut self, op: ReduceOp, t: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(t).shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::invalid(format!(
                "axis {bad} out of range for rank {}",
                shape.len()
            )));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        let out_strides = strides_of(&out_shape);
        // flat input index -> flat output index
        let mut map = vec![0usize; self.value(t).len()];
        let in_strides = strides_of(&shape);
        for (flat, slot) in map.iter_mut().enumerate() {
            *slot = kept
                .iter()
                .zip(&out_strides)
                .map(|(&ax, &os)| (flat / in_strides[ax] % shape[ax]) * os)
                .sum();
        }
        let out_len: usize = out_shape.iter().product();
        let count = self.value(t).len() / out_len;
        let src = self.value(t).data();
        let (data, argmax) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0; out_len];
                for (i, &o) in map.iter().enumerate() {
                    acc[o] += src[i];
                }
                if op == ReduceOp::Mean {
                    acc.iter_mut().for_each(|v| *v /= count as f64);
                }
                (acc, None)
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, &o) in map.iter().enumerate() {
                    // strict > keeps the first occurrence in row-major order
                    if arg[o] == usize::MAX || src[i] > best[o] {
                        best[o] = src[i];
                        arg[o] = i;
                    }
                }
                (best, Some(arg))
            }
        };
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.record(&[t], out, Reduce { op, map, argmax, count }))
    }

    pub fn sum_all(&mut self, t: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(t).rank()).collect();
        self.reduce(ReduceOp::Sum, t, &axes).expect("valid axes")
    }

    pub fn mean_all(&mut self, t: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(t).rank()).collect();
        self.reduce(ReduceOp::Mean, t, &axes).expect("valid axes")
    }

    pub fn reshape(&mut self, t: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(t).reshape(shape)?;
        Ok(self.record(&[t], out, Reshape))
    }

    /// Computes `d root / d leaf` for all gradient-requiring leaves.
    ///
    /// Gradients of shared subexpressions accumulate additively.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::invalid("backward root is not on this tape"));
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let local = rule.backward(&inputs, &node.value, &g, &needs);
            for ((input, contribution), need) in node.inputs.iter().zip(local).zip(needs) {
                let Some(c) = contribution else { continue };
                if !need {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(g) if node.rule.is_none() && node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl BackwardRule for Unary {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = output.data();
        let d: Vec<f64> = match *self {
            // subgradient 0 at the kink
            Unary::Relu => x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
            Unary::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
            Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
            Unary::Log => x.iter().zip(g).map(|(&x, &g)| g / x).collect(),
            Unary::Scale(c) => g.iter().map(|&g| g * c).collect(),
            Unary::Offset(_) => g.to_vec(),
            Unary::Clamp(lo, hi) => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > lo && x < hi { g } else { 0.0 })
                .collect(),
        };
        vec![Some(d)]
    }

    fn branches(&self, inputs: &[&Tensor], _: &Tensor, out: &mut Vec<u64>) {
        let x = inputs[0].data();
        match *self {
            Unary::Relu => pack_bits(x.iter().map(|&x| x > 0.0), out),
            Unary::Clamp(lo, hi) => pack_bits(x.iter().map(|&x| x > lo && x < hi), out),
            _ => {}
        }
    }
}

struct Binary {
    op: ElementwiseOp,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

impl BackwardRule for Binary {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ai = |i: usize| self.a_map.as_ref().map_or(i, |m| m[i]);
        let bi = |i: usize| self.b_map.as_ref().map_or(i, |m| m[i]);
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for (i, &gi) in g.iter().enumerate() {
            let (da, db) = match self.op {
                ElementwiseOp::Add => (gi, gi),
                ElementwiseOp::Sub => (gi, -gi),
                ElementwiseOp::Mul => (gi * b[bi(i)], gi * a[ai(i)]),
                _ => unreachable!(),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ai(i)] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[bi(i)] += db;
            }
        }
        vec![ga, gb]
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            // dA = G B^T
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g, false, b, true, 0.0, &mut out);
            out
        });
        let gb = needs[1].then(|| {
            // dB = A^T G
            let mut out = vec![0.0; k * n];
            gemm(k, m, n, 1.0, a, true, g, false, 0.0, &mut out);
            out
        });
        vec![ga, gb]
    }
}

struct Reduce {
    op: ReduceOp,
    map: Vec<usize>,
    argmax: Option<Vec<usize>>,
    count: usize,
}

impl BackwardRule for Reduce {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = match self.op {
            ReduceOp::Sum => self.map.iter().map(|&o| g[o]).collect(),
            ReduceOp::Mean => self.map.iter().map(|&o| g[o] / self.count as f64).collect(),
            ReduceOp::Max => {
                let mut d = vec![0.0; self.map.len()];
                for (o, &i) in self.argmax.as_ref().expect("argmax saved").iter().enumerate() {
                    d[i] += g[o];
                }
                d
            }
        };
        vec![Some(d)]
    }

    fn branches(&self, _: &[&Tensor], _: &Tensor, out: &mut Vec<u64>) {
        if let Some(arg) = &self.argmax {
            out.extend(arg.iter().map(|&i| i as u64));
        }
    }
}

/// Appends `bits` packed 64 to a word.
pub(crate) fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u64>) {
    let mut word = 0u64;
    let mut n = 0;
    for b in bits {
        word |= u64::from(b) << (n % 64);
        n += 1;
        if n % 64 == 0 {
            out.push(word);
            word = 0;
        }
    }
    if n % 64 != 0 {
        out.push(word);
    }
}

struct Reshape;

impl BackwardRule for Reshape {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
/// Expect large values when `x` sits on a non-differentiable point such as a
/// ReLU kink.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the flat element indices in `indices`.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false);
        let root = f(&mut tape, v)?;
        let y = tape.value(root).item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: f evaluated to {y}")));
        }
        Ok(y)
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let root = f(&mut tape, v)?;
    let y = tape.value(root).item()?;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f evaluated to {y}")));
    }
    let grads = tape.backward(root)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

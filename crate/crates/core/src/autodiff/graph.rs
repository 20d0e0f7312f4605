use std::collections::HashMap;
use std::fmt;

use super::{AutodiffError, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    AddRow(NodeId, NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    Sum(NodeId),
    Expand(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Step(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Sign(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Sum(_) => "sum",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Sign(_) => "sign",
        }
    }

    /// Inputs through which derivatives propagate. `Step` and `Sign` are
    /// piecewise constant, so they are treated as constants of their input.
    fn differentiable_inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Const(_) | Op::Step(_) | Op::Sign(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a) => vec![a],
        }
    }

    fn all_inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Step(a) | Op::Sign(a) => vec![a],
            _ => self.differentiable_inputs(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Values bound to the graph's input nodes for one evaluation.
#[derive(Default)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, node: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(node, value);
        self
    }

    pub fn bind_all(&mut self, nodes: &[NodeId], values: &[&'a Tensor]) -> &mut Self {
        for (&n, &v) in nodes.iter().zip(values) {
            self.values.insert(n, v);
        }
        self
    }
}

/// A symbolic computation graph built op by op.
///
/// Nodes are appended in topological order. Shapes are checked when a node is
/// created; values are produced by [`Graph::eval`]. [`Graph::gradient`]
/// appends the backward pass as ordinary nodes, so its results can themselves
/// be differentiated.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn op_name(&self, node: NodeId) -> &'static str {
        self.nodes[node.0].op.name()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, node: NodeId) -> Result<&Node> {
        self.nodes.get(node.0).ok_or(AutodiffError::UnknownNode(node.0))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    /// A leaf whose value is supplied through [`Bindings`] at evaluation time.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = &self.check(b)?.shape;
        if &sa != sb {
            return Err(self.mismatch(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let shape = self.check(a)?.shape.clone();
        Ok(self.push(op, shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        self.unary(a, Op::AddScalar(a, offset))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    /// Heaviside step (1 where the input is positive); zero derivative.
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Step(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs(a))
    }

    /// Sign with `sign(0) = 0`; zero derivative.
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sign(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch("matmul", format!("operands must be matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(self.mismatch(
                "matmul",
                format!("inner dimensions disagree: {sa:?}{} x {sb:?}{}", t(trans_a), t(trans_b)),
            ));
        }
        Ok(self.push(Op::MatMul { a, b, trans_a, trans_b }, vec![m, n]))
    }

    /// Adds the vector `b` (length m) to every row of the n×m matrix `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.mismatch("add_row", format!("cannot add {sb:?} to rows of {sa:?}")));
        }
        Ok(self.push(Op::AddRow(a, b), sa))
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        if sa.len() != 2 {
            return Err(self.mismatch("sum_rows", format!("expected a matrix, got {sa:?}")));
        }
        Ok(self.push(Op::SumRows(a), vec![sa[1]]))
    }

    /// Stacks `rows` copies of the vector `a`.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        if sa.len() != 1 {
            return Err(self.mismatch("broadcast_rows", format!("expected a vector, got {sa:?}")));
        }
        Ok(self.push(Op::BroadcastRows(a, rows), vec![rows, sa[0]]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let len: usize = self.check(a)?.shape.iter().product();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Broadcasts a single-element node to `shape`.
    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = &self.check(a)?.shape;
        if sa.iter().product::<usize>() != 1 {
            return Err(self.mismatch("expand", format!("expected a single element, got {sa:?}")));
        }
        Ok(self.push(Op::Expand(a), shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = &self.check(a)?.shape;
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("cannot reshape {sa:?} into {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Evaluates `output` under `bindings`.
    pub fn forward(&self, bindings: &Bindings<'_>, output: NodeId) -> Result<Tensor> {
        Ok(self.eval(bindings, &[output])?.pop().expect("one output"))
    }

    /// Evaluates every node needed by `outputs`, in creation order.
    ///
    /// Fails with [`AutodiffError::NonFinite`] on the first node whose value
    /// contains NaN or infinity.
    pub fn eval(&self, bindings: &Bindings<'_>, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let Some(last) = outputs.iter().map(|n| n.0).max() else {
            return Ok(Vec::new());
        };
        for &o in outputs {
            self.check(o)?;
        }
        let mut needed = vec![false; last + 1];
        for &o in outputs {
            needed[o.0] = true;
        }
        for i in (0..=last).rev() {
            if needed[i] {
                for input in self.nodes[i].op.all_inputs() {
                    needed[input.0] = true;
                }
            }
        }

        let mut values: Vec<Option<Tensor>> = vec![None; last + 1];
        for i in 0..=last {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let id = NodeId(i);
            match &node.op {
                Op::Input => {
                    let bound = bindings.values.get(&id).ok_or(AutodiffError::UnboundInput { node: i })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(AutodiffError::ShapeMismatch {
                            node: i,
                            op: "input",
                            detail: format!("bound {:?}, declared {:?}", bound.shape(), node.shape),
                        });
                    }
                    if !bound.is_finite() {
                        return Err(AutodiffError::NonFinite { node: i, op: "input" });
                    }
                }
                Op::Const(t) => {
                    if !t.is_finite() {
                        return Err(AutodiffError::NonFinite { node: i, op: "const" });
                    }
                }
                op => {
                    let v = self.compute(op, &node.shape, &values, bindings);
                    if !v.is_finite() {
                        return Err(AutodiffError::NonFinite { node: i, op: op.name() });
                    }
                    values[i] = Some(v);
                }
            }
        }

        Ok(outputs.iter().map(|&o| self.value(o, &values, bindings).clone()).collect())
    }

    fn value<'v>(&'v self, id: NodeId, values: &'v [Option<Tensor>], bindings: &'v Bindings<'_>) -> &'v Tensor {
        match &self.nodes[id.0].op {
            Op::Const(t) => t,
            Op::Input => bindings.values[&id],
            _ => values[id.0].as_ref().expect("inputs evaluated before use"),
        }
    }

    fn compute(&self, op: &Op, shape: &[usize], values: &[Option<Tensor>], bindings: &Bindings<'_>) -> Tensor {
        let v = |id: NodeId| self.value(id, values, bindings);
        match *op {
            Op::Input | Op::Const(_) => unreachable!("leaves are not computed"),
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::MatMul { a, b, trans_a, trans_b } => matmul(v(a), v(b), trans_a, trans_b),
            Op::AddRow(a, b) => {
                let (va, vb) = (v(a), v(b));
                let cols = vb.len();
                let mut out = va.clone();
                for row in out.data_mut().chunks_exact_mut(cols) {
                    for (o, &x) in row.iter_mut().zip(vb.data()) {
                        *o += x;
                    }
                }
                out
            }
            Op::SumRows(a) => {
                let va = v(a);
                let mut out = vec![0.0; va.cols()];
                for row in va.data().chunks_exact(va.cols()) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::vector(out)
            }
            Op::BroadcastRows(a, rows) => {
                let va = v(a);
                let mut data = Vec::with_capacity(rows * va.len());
                for _ in 0..rows {
                    data.extend_from_slice(va.data());
                }
                Tensor::new(shape.to_vec(), data).expect("shape checked at construction")
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Expand(a) => Tensor::filled(shape, v(a).data()[0]),
            Op::Reshape(a) => v(a).clone().reshaped(shape.to_vec()).expect("shape checked at construction"),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Sign(a) => v(a).map(sign),
        }
    }

    /// Appends the reverse pass of `target` and returns `∂target/∂wrt` as
    /// nodes of this graph.
    ///
    /// The returned nodes are ordinary graph nodes, so a scalar reduction of
    /// them can be passed to `gradient` again. A `wrt` node the target does
    /// not depend on gets a zero constant.
    pub fn gradient(&mut self, target: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let tshape = self.check(target)?.shape.clone();
        if tshape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarTarget { node: target.0, shape: tshape });
        }
        for &w in wrt {
            self.check(w)?;
        }
        let last = target.0;

        let mut depends = vec![false; last + 1];
        for &w in wrt {
            if w.0 <= last {
                depends[w.0] = true;
            }
        }
        for i in 0..=last {
            if !depends[i] && self.nodes[i].op.differentiable_inputs().iter().any(|x| depends[x.0]) {
                depends[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; last + 1];
        if depends[last] {
            adjoint[last] = Some(self.constant(Tensor::filled(&tshape, 1.0)));
        }
        for i in (0..=last).rev() {
            let Some(g) = adjoint[i] else { continue };
            // Leaves listed in `wrt` keep their adjoint and have no inputs.
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(NodeId(i), &op, g, &depends)? {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(existing) => self.add(existing, contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of `node` for each input that needs one.
    fn vjp(&mut self, node: NodeId, op: &Op, g: NodeId, depends: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(2);
        let needs = |x: NodeId| depends[x.0];
        match *op {
            Op::Input | Op::Const(_) | Op::Step(_) | Op::Sign(_) => {}
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::MatMul { a, b, trans_a, trans_b } => {
                if needs(a) {
                    let ga = match (trans_a, trans_b) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb = match (trans_a, trans_b) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    out.push((b, gb));
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, self.sum_rows(g)?));
                }
            }
            Op::SumRows(a) => {
                let rows = self.nodes[a.0].shape[0];
                out.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a, _) => out.push((a, self.sum_rows(g)?)),
            Op::Sum(a) => {
                let shape = self.nodes[a.0].shape.clone();
                out.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => {
                let s = self.sum(g)?;
                let shape = self.nodes[a.0].shape.clone();
                out.push((a, self.reshape(s, &shape)?));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].shape.clone();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::Relu(a) => {
                let mask = self.step(a)?;
                out.push((a, self.mul(g, mask)?));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                out.push((a, self.mul(g, s)?));
            }
            Op::Sigmoid(a) => {
                let neg = self.neg(node)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let slope = self.mul(node, one_minus)?;
                out.push((a, self.mul(g, slope)?));
            }
            Op::Tanh(a) => {
                let sq = self.mul(node, node)?;
                let neg = self.neg(sq)?;
                let slope = self.add_scalar(neg, 1.0)?;
                out.push((a, self.mul(g, slope)?));
            }
            Op::Abs(a) => {
                let s = self.sign(a)?;
                out.push((a, self.mul(g, s)?));
            }
        }
        Ok(out)
    }
}

fn t(flag: bool) -> &'static str {
    if flag {
        "ᵀ"
    } else {
        ""
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    let mut out = Tensor::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: strides describe in-bounds views of `a` (ar×ac) and `b` (br×bc);
    // `out` is a freshly allocated m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bound<'a>(node: NodeId, value: &'a Tensor) -> Bindings<'a> {
        let mut b = Bindings::new();
        b.bind(node, value);
        b
    }

    /// Gradient of the scalar `build(x)` at `x` and its central-difference estimate.
    fn grad_and_fd(x: &Tensor, build: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let input = g.input(x.shape());
        let out = build(&mut g, input).unwrap();
        let grad = g.gradient(out, &[input]).unwrap()[0];
        let analytic = g.forward(&bound(input, x), grad).unwrap().into_data();
        let h = 1e-6;
        let numeric = (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let fp = g.forward(&bound(input, &plus), out).unwrap().item();
                let fm = g.forward(&bound(input, &minus), out).unwrap().item();
                (fp - fm) / (2.0 * h)
            })
            .collect();
        (analytic, numeric)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    fn away_from_zero(v: f64) -> f64 {
        if v.abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    }

    proptest! {
        #[test]
        fn elementwise_gradients_match_finite_differences(
            data in prop::collection::vec(-2.0f64..2.0, 6),
            other in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            let x = Tensor::matrix(2, 3, data.iter().copied().map(away_from_zero).collect()).unwrap();
            let c = Tensor::matrix(2, 3, other).unwrap();
            type Build = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;
            let cases: [(&str, Build); 10] = [
                ("add", |g, x, c| g.add(x, c)),
                ("sub", |g, x, c| g.sub(c, x)),
                ("mul", |g, x, c| g.mul(x, c)),
                ("square", |g, x, _| g.mul(x, x)),
                ("scale", |g, x, _| g.scale(x, -1.7)),
                ("relu", |g, x, c| { let r = g.relu(x)?; g.mul(r, c) }),
                ("softplus", |g, x, c| { let r = g.softplus(x)?; g.mul(r, c) }),
                ("sigmoid", |g, x, c| { let r = g.sigmoid(x)?; g.mul(r, c) }),
                ("tanh", |g, x, c| { let r = g.tanh(x)?; g.mul(r, c) }),
                ("abs", |g, x, c| { let r = g.abs(x)?; g.mul(r, c) }),
            ];
            for (name, build) in cases {
                let (a, n) = grad_and_fd(&x, |g, input| {
                    let cn = g.constant(c.clone());
                    let y = build(g, input, cn)?;
                    let s = g.add_scalar(y, 0.5)?;
                    g.sum(s)
                });
                for (i, (ai, ni)) in a.iter().zip(&n).enumerate() {
                    prop_assert!((ai - ni).abs() <= 1e-6 * (1.0 + ni.abs()), "{name}[{i}]: {ai} vs {ni}");
                }
            }
        }

        #[test]
        fn matmul_transposes_match_finite_differences(
            a in prop::collection::vec(-1.0f64..1.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 12),
            ta in any::<bool>(),
            tb in any::<bool>(),
        ) {
            let a_shape = if ta { [3, 2] } else { [2, 3] };
            let b_shape = if tb { [4, 3] } else { [3, 4] };
            let x = Tensor::new(a_shape.to_vec(), a).unwrap();
            let bt = Tensor::new(b_shape.to_vec(), b).unwrap();
            let (ga, na) = grad_and_fd(&x, |g, input| {
                let bn = g.constant(bt.clone());
                let y = g.matmul_t(input, bn, ta, tb)?;
                let t = g.tanh(y)?;
                g.sum(t)
            });
            for (i, (ai, ni)) in ga.iter().zip(&na).enumerate() {
                prop_assert!((ai - ni).abs() <= 1e-6 * (1.0 + ni.abs()), "a[{i}]: {ai} vs {ni}");
            }
        }
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![2.0, -1.0, 0.0, 1.0, 3.0, 0.25]).unwrap();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let at = if ta { transpose(&a) } else { a.clone() };
            let btt = if tb { transpose(&b) } else { b.clone() };
            let mut g = Graph::new();
            let an = g.constant(at);
            let bn = g.constant(btt);
            let out = g.matmul_t(an, bn, ta, tb).unwrap();
            let got = g.forward(&Bindings::new(), out).unwrap();
            let mut expected = vec![0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    expected[i * 2 + j] = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                }
            }
            assert_close(got.data(), &expected, 1e-15);
        }
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        Tensor::matrix(c, r, (0..c).flat_map(|j| (0..r).map(move |i| t.get(i, j))).collect()).unwrap()
    }

    #[test]
    fn broadcasting_ops_match_finite_differences() {
        let x = Tensor::vector(vec![0.3, -1.2, 0.7]);
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, -0.5, 3.0]).unwrap();
        let (a, n) = grad_and_fd(&x, |g, input| {
            let mn = g.constant(m.clone());
            let y = g.add_row(mn, input)?;
            let b = g.broadcast_rows(input, 2)?;
            let z = g.mul(y, b)?;
            let s = g.sum_rows(z)?;
            let t = g.tanh(s)?;
            g.mean(t)
        });
        assert_close(&a, &n, 1e-7);

        let s = Tensor::scalar(0.4);
        let (a, n) = grad_and_fd(&s, |g, input| {
            let e = g.expand(input, &[2, 3])?;
            let mn = g.constant(m.clone());
            let z = g.mul(e, mn)?;
            let r = g.reshape(z, &[6])?;
            let sp = g.softplus(r)?;
            g.sum(sp)
        });
        assert_close(&a, &n, 1e-7);
    }

    #[test]
    fn second_derivative_through_gradient_nodes() {
        // h(x) = Σ σ(x)² where σ = d softplus/dx, so dh/dx = 2σ²(1 − σ).
        let x = Tensor::vector(vec![-1.5, 0.2, 2.0]);
        let mut g = Graph::new();
        let input = g.input(&[3]);
        let sp = g.softplus(input).unwrap();
        let total = g.sum(sp).unwrap();
        let first = g.gradient(total, &[input]).unwrap()[0];
        let sq = g.mul(first, first).unwrap();
        let h = g.sum(sq).unwrap();
        let second = g.gradient(h, &[input]).unwrap()[0];
        let got = g.forward(&bound(input, &x), second).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|&v| 2.0 * sigmoid(v).powi(2) * (1.0 - sigmoid(v))).collect();
        assert_close(got.data(), &expected, 1e-14);
    }

    #[test]
    fn relu_has_zero_second_derivative() {
        let x = Tensor::vector(vec![-1.0, 0.5, 2.0]);
        let mut g = Graph::new();
        let input = g.input(&[3]);
        let r = g.relu(input).unwrap();
        let sq = g.mul(r, input).unwrap();
        let total = g.sum(sq).unwrap();
        let first = g.gradient(total, &[input]).unwrap()[0];
        // d/dx (x·relu(x)) = 2·relu(x) away from 0; its gradient is 2·step(x).
        let s = g.sum(first).unwrap();
        let second = g.gradient(s, &[input]).unwrap()[0];
        let got = g.forward(&bound(input, &x), second).unwrap();
        assert_eq!(got.data(), &[0.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(&[2]);
        let b = g.input(&[2]);
        let s = g.sum(a).unwrap();
        let grads = g.gradient(s, &[a, b]).unwrap();
        let (va, vb) = (Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, 4.0]));
        let mut bindings = Bindings::new();
        bindings.bind(a, &va).bind(b, &vb);
        let out = g.eval(&bindings, &grads).unwrap();
        assert_eq!(out[0].data(), &[1.0, 1.0]);
        assert_eq!(out[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input(&[2, 3]);
        let b = g.input(&[2, 2]);
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
        assert!(matches!(g.matmul(a, a), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(g.gradient(a, &[a]), Err(AutodiffError::NonScalarTarget { .. })));
        assert!(matches!(g.sum(NodeId(99)), Err(AutodiffError::UnknownNode(99))));
        let s = g.sum(a).unwrap();
        assert!(matches!(g.forward(&Bindings::new(), s), Err(AutodiffError::UnboundInput { .. })));

        let x = Tensor::vector(vec![1.0, -1.0]);
        let mut g = Graph::new();
        let input = g.input(&[2]);
        let big = g.scale(input, f64::MAX).unwrap();
        let sq = g.mul(big, big).unwrap();
        assert!(matches!(g.forward(&bound(input, &x), sq), Err(AutodiffError::NonFinite { op: "mul", .. })));
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}

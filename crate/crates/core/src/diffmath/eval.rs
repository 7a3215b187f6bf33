use std::collections::{BTreeMap, HashMap};

use super::array::{axis_split, matmul_raw, transpose_raw};
use super::expr::{Node, Op};
use super::{Array, Expr, MathError, ParamId};

/// Source of parameter values for a forward pass.
pub trait ParamSource {
    fn param(&self, id: ParamId) -> Option<&Array>;
}

impl ParamSource for BTreeMap<ParamId, Array> {
    fn param(&self, id: ParamId) -> Option<&Array> {
        self.get(&id)
    }
}

impl ParamSource for HashMap<ParamId, Array> {
    fn param(&self, id: ParamId) -> Option<&Array> {
        self.get(&id)
    }
}

/// Gradients of a scalar expression, keyed by parameter.
pub type GradientMap = BTreeMap<ParamId, Array>;

/// Cached values of one forward pass over a set of roots.
pub struct Forward {
    order: Vec<Expr>,
    index: HashMap<u64, usize>,
    values: Vec<Array>,
}

/// Evaluates `roots` (and everything they depend on) once.
pub fn forward(roots: &[&Expr], params: &dyn ParamSource) -> Result<Forward, MathError> {
    let order = topo_order(roots);
    let index: HashMap<u64, usize> = order.iter().enumerate().map(|(i, e)| (e.id(), i)).collect();
    let mut values: Vec<Array> = Vec::with_capacity(order.len());
    for expr in &order {
        let inputs: Vec<&Array> = expr.0.inputs.iter().map(|e| &values[index[&e.id()]]).collect();
        let value = eval_node(&expr.0, &inputs, params)?;
        values.push(value);
    }
    Ok(Forward { order, index, values })
}

/// Forward value of `expr`.
pub fn evaluate(expr: &Expr, params: &dyn ParamSource) -> Result<Array, MathError> {
    let mut fwd = forward(&[expr], params)?;
    Ok(fwd.values.pop().expect("root is last in topological order"))
}

/// Gradient of the scalar `expr` with respect to every reachable parameter.
pub fn gradient(expr: &Expr, params: &dyn ParamSource) -> Result<GradientMap, MathError> {
    forward(&[expr], params)?.backward(expr)
}

impl Forward {
    pub fn value(&self, expr: &Expr) -> Option<&Array> {
        self.index.get(&expr.id()).map(|&i| &self.values[i])
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, expr: &Expr) -> Option<f64> {
        self.value(expr).and_then(Array::item)
    }

    /// Reverse sweep from `root`, which must be a scalar evaluated in this pass.
    pub fn backward(&self, root: &Expr) -> Result<GradientMap, MathError> {
        let root_idx = *self.index.get(&root.id()).ok_or(MathError::NotInPass)?;
        let root_val = &self.values[root_idx];
        if root_val.len() != 1 {
            return Err(MathError::NotScalar {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Array>> = vec![None; self.order.len()];
        adjoints[root_idx] = Some(Array::filled(root_val.shape(), 1.0));
        let mut grads = GradientMap::new();

        for i in (0..=root_idx).rev() {
            let Some(adj) = adjoints[i].take() else {
                continue;
            };
            let node = &self.order[i].0;
            if let Op::Param(id) = node.op {
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&adj),
                    None => {
                        grads.insert(id, adj);
                    }
                }
                continue;
            }
            let inputs: Vec<&Array> = node.inputs.iter().map(|e| &self.values[self.index[&e.id()]]).collect();
            let input_grads = backprop_node(node, &inputs, &self.values[i], &adj);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let j = self.index[&input.id()];
                match &mut adjoints[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Parameters reachable only through detached edges still belong in the map.
        for expr in topo_order(&[root]) {
            if let Op::Param(id) = expr.0.op {
                grads
                    .entry(id)
                    .or_insert_with(|| Array::zeros(self.values[self.index[&expr.id()]].shape()));
            }
        }
        Ok(grads)
    }
}

/// Post-order over the union of the roots' subgraphs; each node appears once.
fn topo_order(roots: &[&Expr]) -> Vec<Expr> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    for root in roots {
        let mut stack: Vec<(Expr, bool)> = vec![((*root).clone(), false)];
        while let Some((expr, expanded)) = stack.pop() {
            if expanded {
                order.push(expr);
                continue;
            }
            if visited.contains(&expr.id()) {
                continue;
            }
            visited.insert(expr.id());
            stack.push((expr.clone(), true));
            for input in expr.0.inputs.iter().rev() {
                if !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn broadcast_pair(op: &'static str, a: &Array, b: &Array) -> Result<Vec<usize>, MathError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(MathError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Array, b: &Array, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Array {
    let n: usize = shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let data = (0..n)
        .map(|i| {
            let x = if a.is_scalar() { ad[0] } else { ad[i] };
            let y = if b.is_scalar() { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Array::new(shape, data).expect("broadcast shape")
}

fn check_axis(op: &'static str, x: &Array, axis: usize) -> Result<(), MathError> {
    if axis >= x.rank() {
        return Err(MathError::BadAxis {
            op,
            axis,
            shape: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn sum_along(x: &Array, axis: usize) -> Array {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for k in 0..extent {
            for i in 0..inner {
                out[o * inner + i] += d[(o * extent + k) * inner + i];
            }
        }
    }
    Array::new(reduced_shape(x.shape(), axis), out).expect("reduced shape")
}

fn expand_along(g: &Array, shape: &[usize], axis: usize, factor: f64) -> Array {
    let (outer, extent, inner) = axis_split(shape, axis);
    let gd = g.data();
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for k in 0..extent {
            for i in 0..inner {
                out[(o * extent + k) * inner + i] = gd[o * inner + i] * factor;
            }
        }
    }
    Array::new(shape.to_vec(), out).expect("expanded shape")
}

fn first_argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}

fn eval_node(node: &Node, inputs: &[&Array], params: &dyn ParamSource) -> Result<Array, MathError> {
    let op_name = node.op.name();
    let out = match &node.op {
        Op::Param(id) => params.param(*id).cloned().ok_or(MathError::UnboundParam(*id))?,
        Op::Constant(a) => (**a).clone(),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = broadcast_pair(op_name, a, b)?;
            match node.op {
                Op::Add => zip_broadcast(a, b, shape, |x, y| x + y),
                Op::Sub => zip_broadcast(a, b, shape, |x, y| x - y),
                _ => zip_broadcast(a, b, shape, |x, y| x * y),
            }
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(MathError::ShapeMismatch {
                    op: op_name,
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Array::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))?
        }
        Op::Relu => inputs[0].map(|v| v.max(0.0)),
        Op::Tanh => inputs[0].map(f64::tanh),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::Softmax => {
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(MathError::BadAxis {
                    op: op_name,
                    axis: 0,
                    shape: Vec::new(),
                });
            }
            let width = *x.shape().last().unwrap();
            let mut data = x.data().to_vec();
            if width > 0 {
                for row in data.chunks_mut(width) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
            }
            Array::new(x.shape().to_vec(), data)?
        }
        Op::Ln => {
            let x = inputs[0];
            if let Some(&bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(MathError::Domain {
                    op: op_name,
                    value: bad,
                });
            }
            x.map(f64::ln)
        }
        Op::Exp => inputs[0].map(f64::exp),
        Op::Abs => inputs[0].map(f64::abs),
        Op::Sum(None) => Array::scalar(inputs[0].sum()),
        Op::Mean(None) => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(MathError::EmptyReduction { op: op_name });
            }
            Array::scalar(x.sum() / x.len() as f64)
        }
        Op::Sum(Some(axis)) | Op::Mean(Some(axis)) => {
            let x = inputs[0];
            check_axis(op_name, x, *axis)?;
            let s = sum_along(x, *axis);
            if matches!(node.op, Op::Mean(_)) {
                let n = x.shape()[*axis];
                if n == 0 {
                    return Err(MathError::EmptyReduction { op: op_name });
                }
                s.map(|v| v / n as f64)
            } else {
                s
            }
        }
        Op::ClampMin(c) => inputs[0].map(|v| if v > *c { v } else { *c }),
        Op::ClampMax(c) => inputs[0].map(|v| if v < *c { v } else { *c }),
        Op::MaxReduce => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(MathError::EmptyReduction { op: op_name });
            }
            Array::scalar(x.data()[first_argmax(x.data())])
        }
        Op::Select(mask) => {
            let x = inputs[0];
            if mask.len() != x.len() {
                return Err(MathError::ShapeMismatch {
                    op: op_name,
                    left: x.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            let data: Vec<f64> = x
                .data()
                .iter()
                .zip(mask.iter())
                .filter_map(|(&v, &keep)| keep.then_some(v))
                .collect();
            Array::vector(data)
        }
        Op::Concat(axis) => concat_values(inputs, *axis)?,
        Op::Reshape(shape) => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.len() {
                return Err(MathError::ShapeMismatch {
                    op: op_name,
                    left: x.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            x.reshaped(shape.clone())?
        }
        Op::Detach => inputs[0].clone(),
    };
    if !out.all_finite() {
        return Err(MathError::NonFinite { op: op_name });
    }
    Ok(out)
}

fn concat_values(inputs: &[&Array], axis: usize) -> Result<Array, MathError> {
    let first = inputs.first().ok_or(MathError::EmptyReduction { op: "concat" })?;
    check_axis("concat", first, axis)?;
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for x in inputs {
        let ok = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(MathError::ShapeMismatch {
                op: "concat",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        total += x.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in inputs {
            let chunk = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Array::new(shape, data)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Reduces a broadcast gradient back to a scalar operand when needed.
fn unbroadcast(g: Array, operand: &Array) -> Array {
    if operand.is_scalar() && !g.is_scalar() {
        Array::scalar(g.sum())
    } else {
        g
    }
}

fn backprop_node(node: &Node, inputs: &[&Array], out: &Array, g: &Array) -> Vec<Option<Array>> {
    let elementwise = |x: &Array, f: &dyn Fn(f64, f64, f64) -> f64| -> Array {
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
            .collect();
        Array::new(x.shape().to_vec(), data).expect("same shape")
    };
    match &node.op {
        Op::Param(_) | Op::Constant(_) | Op::Detach => vec![None; node.inputs.len()],
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![Some(unbroadcast(g.clone(), a)), Some(unbroadcast(g.clone(), b))]
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![Some(unbroadcast(g.clone(), a)), Some(unbroadcast(g.map(|v| -v), b))]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = g.shape().to_vec();
            let ga = zip_broadcast(g, b, shape.clone(), |x, y| x * y);
            let gb = zip_broadcast(g, a, shape, |x, y| x * y);
            vec![Some(unbroadcast(ga, a)), Some(unbroadcast(gb, b))]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let bt = transpose_raw(b.data(), k, m);
            let ga = matmul_raw(g.data(), &bt, n, m, k);
            let at = transpose_raw(a.data(), n, k);
            let gb = matmul_raw(&at, g.data(), k, n, m);
            vec![
                Some(Array::new(vec![n, k], ga).expect("shape")),
                Some(Array::new(vec![k, m], gb).expect("shape")),
            ]
        }
        Op::Relu => vec![Some(elementwise(inputs[0], &|x, _, gv| {
            if x > 0.0 {
                gv
            } else {
                0.0
            }
        }))],
        Op::Tanh => vec![Some(elementwise(inputs[0], &|_, y, gv| gv * (1.0 - y * y)))],
        Op::Sigmoid => vec![Some(elementwise(inputs[0], &|_, y, gv| gv * y * (1.0 - y)))],
        Op::Exp => vec![Some(elementwise(inputs[0], &|_, y, gv| gv * y))],
        Op::Ln => vec![Some(elementwise(inputs[0], &|x, _, gv| gv / x))],
        Op::Abs => vec![Some(elementwise(inputs[0], &|x, _, gv| {
            if x > 0.0 {
                gv
            } else if x < 0.0 {
                -gv
            } else {
                0.0
            }
        }))],
        Op::ClampMin(c) => {
            let c = *c;
            vec![Some(elementwise(inputs[0], &|x, _, gv| if x > c { gv } else { 0.0 }))]
        }
        Op::ClampMax(c) => {
            let c = *c;
            vec![Some(elementwise(inputs[0], &|x, _, gv| if x < c { gv } else { 0.0 }))]
        }
        Op::Softmax => {
            let width = *out.shape().last().unwrap();
            let mut data = vec![0.0; out.len()];
            if width > 0 {
                for ((dst, y), gr) in data
                    .chunks_mut(width)
                    .zip(out.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
            }
            vec![Some(Array::new(out.shape().to_vec(), data).expect("shape"))]
        }
        Op::Sum(None) => vec![Some(Array::filled(inputs[0].shape(), g.data()[0]))],
        Op::Mean(None) => {
            let n = inputs[0].len() as f64;
            vec![Some(Array::filled(inputs[0].shape(), g.data()[0] / n))]
        }
        Op::Sum(Some(axis)) => vec![Some(expand_along(g, inputs[0].shape(), *axis, 1.0))],
        Op::Mean(Some(axis)) => {
            let n = inputs[0].shape()[*axis] as f64;
            vec![Some(expand_along(g, inputs[0].shape(), *axis, 1.0 / n))]
        }
        Op::MaxReduce => {
            let x = inputs[0];
            let mut ga = Array::zeros(x.shape());
            ga.data_mut()[first_argmax(x.data())] = g.data()[0];
            vec![Some(ga)]
        }
        Op::Select(mask) => {
            let x = inputs[0];
            let mut ga = Array::zeros(x.shape());
            let mut src = g.data().iter();
            for (dst, &keep) in ga.data_mut().iter_mut().zip(mask.iter()) {
                if keep {
                    *dst = *src.next().expect("selected count");
                }
            }
            vec![Some(ga)]
        }
        Op::Concat(axis) => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let mut parts: Vec<Vec<f64>> = inputs.iter().map(|x| Vec::with_capacity(x.len())).collect();
            let gd = g.data();
            let mut offset = 0;
            for _ in 0..outer {
                for (x, part) in inputs.iter().zip(parts.iter_mut()) {
                    let chunk = x.shape()[*axis] * inner;
                    part.extend_from_slice(&gd[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            inputs
                .iter()
                .zip(parts)
                .map(|(x, p)| Some(Array::new(x.shape().to_vec(), p).expect("shape")))
                .collect()
        }
        Op::Reshape(_) => vec![Some(g.reshaped(inputs[0].shape().to_vec()).expect("shape"))],
    }
}

//! Wengert-list tape: operations are recorded once against named inputs,
//! then evaluated (and differentiated) for any binding of those inputs.

use std::collections::BTreeMap;

use super::tensor::{Shape, Tensor};
use super::{relu, sigmoid, softplus};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Const(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Outer(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    L1Normalize(Var),
    Slice(Var, usize, usize),
    Row(Var, usize),
    Column(Var, usize),
    Concat(Vec<Var>),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Outer(..) => "outer",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(_) => "softmax",
            Op::L1Normalize(_) => "l1_normalize",
            Op::Slice(..) => "slice",
            Op::Row(..) => "row",
            Op::Column(..) => "column",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
}

/// Recorded computation graph. Parents always precede their children.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<(String, Var)>,
}

/// Forward values for every node of a tape.
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }
}

/// Binding of input names to tensors.
pub type Bindings = BTreeMap<String, Tensor>;

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    if a == b {
        Some(a)
    } else if a == Shape::Scalar {
        Some(b)
    } else if b == Shape::Scalar {
        Some(a)
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].shape
    }

    fn push(&mut self, op: Op, shape: Shape) -> Var {
        self.nodes.push(Node { op, shape });
        Var(self.nodes.len() - 1)
    }

    /// Declares a named input. Declaring the same name twice returns the
    /// original node when the shapes agree.
    pub fn input(&mut self, name: &str, shape: Shape) -> Result<Var> {
        if let Some(&(_, v)) = self.inputs.iter().find(|(n, _)| n == name) {
            if self.shape(v) != shape {
                return Err(Error::Shape(format!(
                    "input {name} redeclared with shape {shape}, was {}",
                    self.shape(v)
                )));
            }
            return Ok(v);
        }
        let v = self.push(Op::Input(name.to_string()), shape);
        self.inputs.push((name.to_string(), v));
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape();
        self.push(Op::Const(value), shape)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, name: &str) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::Shape(format!("{name}: {} vs {}", self.shape(a), self.shape(b))))?;
        Ok(self.push(op(a, b), shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Div, "div")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let shape = self.shape(a);
        self.push(Op::Scale(a, factor), shape)
    }

    /// Matrix-matrix or matrix-vector product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = match (self.shape(a), self.shape(b)) {
            (Shape::Matrix(m, n), Shape::Matrix(n2, p)) if n == n2 => Shape::Matrix(m, p),
            (Shape::Matrix(m, n), Shape::Vector(n2)) if n == n2 => Shape::Vector(m),
            (sa, sb) => return Err(Error::Shape(format!("matmul: {sa} x {sb}"))),
        };
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = match (self.shape(a), self.shape(b)) {
            (Shape::Vector(m), Shape::Vector(n)) => Shape::Matrix(m, n),
            (sa, sb) => return Err(Error::Shape(format!("outer: {sa} x {sb}"))),
        };
        Ok(self.push(Op::Outer(a, b), shape))
    }

    fn unary(&mut self, op: Op, a: Var) -> Var {
        let shape = self.shape(a);
        self.push(op, shape)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(Op::ClampMin(a, floor), a)
    }

    fn vector_only(&self, a: Var, name: &str) -> Result<usize> {
        match self.shape(a) {
            Shape::Vector(n) => Ok(n),
            s => Err(Error::Shape(format!("{name} needs a vector, got {s}"))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.vector_only(a, "softmax")?;
        Ok(self.unary(Op::Softmax(a), a))
    }

    /// `x / ||x||_1`
    pub fn l1_normalize(&mut self, a: Var) -> Result<Var> {
        self.vector_only(a, "l1_normalize")?;
        Ok(self.unary(Op::L1Normalize(a), a))
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.vector_only(a, "slice")?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice {start}..{end} of length {n}")));
        }
        Ok(self.push(Op::Slice(a, start, end), Shape::Vector(end - start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        match self.shape(a) {
            Shape::Matrix(rows, cols) if r < rows => Ok(self.push(Op::Row(a, r), Shape::Vector(cols))),
            s => Err(Error::Shape(format!("row {r} of {s}"))),
        }
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        match self.shape(a) {
            Shape::Matrix(rows, cols) if c < cols => Ok(self.push(Op::Column(a, c), Shape::Vector(rows))),
            s => Err(Error::Shape(format!("column {c} of {s}"))),
        }
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut n = 0;
        for &p in parts {
            n += self.vector_only(p, "concat")?;
        }
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Shape::Vector(n)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), Shape::Scalar)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Names of the declared inputs with their shapes.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, Shape)> {
        self.inputs.iter().map(|(n, v)| (n.as_str(), self.shape(*v)))
    }

    /// Forward pass.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = self.forward_node(i, node, &values, bindings)?;
            debug_assert_eq!(v.shape(), node.shape);
            values.push(v);
        }
        Ok(Values { values })
    }

    fn forward_node(&self, i: usize, node: &Node, vals: &[Tensor], bindings: &Bindings) -> Result<Tensor> {
        let domain = |detail: String| Error::Domain {
            node: i,
            op: node.op.name(),
            detail,
        };
        let map = |a: Var, f: &dyn Fn(f64) -> f64| {
            let x = &vals[a.0];
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
        };
        let zip = |a: Var, b: Var, f: &dyn Fn(f64, f64) -> f64| {
            let (x, y) = (&vals[a.0], &vals[b.0]);
            let n = node.shape.len();
            let xi = |k: usize| if x.len() == 1 { x.data()[0] } else { x.data()[k] };
            let yi = |k: usize| if y.len() == 1 { y.data()[0] } else { y.data()[k] };
            Tensor::new(node.shape, (0..n).map(|k| f(xi(k), yi(k))).collect())
        };
        match &node.op {
            Op::Input(name) => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("input {name} is not bound")))?;
                if t.shape() != node.shape {
                    return Err(Error::Shape(format!(
                        "input {name}: bound {} but declared {}",
                        t.shape(),
                        node.shape
                    )));
                }
                Ok(t.clone())
            }
            Op::Const(t) => Ok(t.clone()),
            Op::Add(a, b) => zip(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => zip(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => zip(*a, *b, &|x, y| x * y),
            Op::Div(a, b) => {
                if vals[b.0].data().contains(&0.0) {
                    return Err(domain("division by zero".into()));
                }
                zip(*a, *b, &|x, y| x / y)
            }
            Op::Scale(a, f) => map(*a, &|x| x * f),
            Op::MatMul(a, b) => {
                let (x, y) = (&vals[a.0], &vals[b.0]);
                let (m, n, p) = (x.rows(), x.cols(), y.cols());
                let mut out = vec![0.0; m * p];
                for r in 0..m {
                    for k in 0..n {
                        let xv = x.data()[r * n + k];
                        for c in 0..p {
                            out[r * p + c] += xv * y.data()[k * p + c];
                        }
                    }
                }
                Tensor::new(node.shape, out)
            }
            Op::Outer(a, b) => {
                let (x, y) = (&vals[a.0], &vals[b.0]);
                let out = x.data().iter().flat_map(|&u| y.data().iter().map(move |&v| u * v)).collect();
                Tensor::new(node.shape, out)
            }
            Op::Exp(a) => map(*a, &f64::exp),
            Op::Log(a) => {
                if let Some(v) = vals[a.0].data().iter().find(|&&v| v <= 0.0) {
                    return Err(domain(format!("log of non-positive value {v}")));
                }
                map(*a, &f64::ln)
            }
            Op::Softplus(a) => map(*a, &softplus),
            Op::Sigmoid(a) => map(*a, &sigmoid),
            Op::Relu(a) => map(*a, &relu),
            Op::ClampMin(a, f) => map(*a, &|x| x.max(*f)),
            Op::Softmax(a) => Ok(Tensor::vector(super::softmax(vals[a.0].data()))),
            Op::L1Normalize(a) => {
                let x = vals[a.0].data();
                let norm: f64 = x.iter().map(|v| v.abs()).sum();
                if norm == 0.0 {
                    return Err(domain("L1 normalization of the zero vector".into()));
                }
                Ok(Tensor::vector(x.iter().map(|v| v / norm).collect()))
            }
            Op::Slice(a, s, e) => Ok(Tensor::vector(vals[a.0].data()[*s..*e].to_vec())),
            Op::Row(a, r) => Ok(Tensor::vector(vals[a.0].row(*r).to_vec())),
            Op::Column(a, c) => {
                let x = &vals[a.0];
                Ok(Tensor::vector((0..x.rows()).map(|r| x.at(r, *c)).collect()))
            }
            Op::Concat(parts) => Ok(Tensor::vector(
                parts.iter().flat_map(|p| vals[p.0].data().iter().copied()).collect(),
            )),
            Op::Sum(a) => Ok(Tensor::scalar(vals[a.0].data().iter().sum())),
        }
    }

    /// Reverse pass seeded at a scalar node. Returns the partial derivative
    /// of the seed with respect to every declared input; inputs the seed does
    /// not depend on get zeros.
    pub fn gradient(&self, bindings: &Bindings, seed: Var) -> Result<(Values, Bindings)> {
        if self.shape(seed) != Shape::Scalar {
            return Err(Error::Contract(format!(
                "gradient seed must be scalar, node {} has shape {}",
                seed.0,
                self.shape(seed)
            )));
        }
        let values = self.evaluate(bindings)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Tensor::scalar(1.0));
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &values, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Bindings::new();
        for (name, v) in &self.inputs {
            let g = grads
                .get(v.0)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        Ok((values, out))
    }

    fn backward_node(&self, i: usize, g: &Tensor, vals: &Values, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], shape: Shape, var: Var, delta: &[f64]) {
            let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(shape));
            if delta.len() == slot.len() {
                for (a, d) in slot.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            } else {
                // scalar broadcast: reduce
                slot.data_mut()[0] += delta.iter().sum::<f64>();
            }
        }
        let shape = |v: Var| self.nodes[v.0].shape;
        let val = |v: Var| vals.get(v).data();
        let y = vals.values[i].data();
        let gd = g.data();
        let bc = |v: Var, k: usize| {
            let d = val(v);
            if d.len() == 1 {
                d[0]
            } else {
                d[k]
            }
        };
        match &self.nodes[i].op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                acc(grads, shape(*a), *a, gd);
                acc(grads, shape(*b), *b, gd);
            }
            Op::Sub(a, b) => {
                acc(grads, shape(*a), *a, gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                acc(grads, shape(*b), *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gd.iter().enumerate().map(|(k, g)| g * bc(*b, k)).collect();
                let gb: Vec<f64> = gd.iter().enumerate().map(|(k, g)| g * bc(*a, k)).collect();
                acc(grads, shape(*a), *a, &ga);
                acc(grads, shape(*b), *b, &gb);
            }
            Op::Div(a, b) => {
                let ga: Vec<f64> = gd.iter().enumerate().map(|(k, g)| g / bc(*b, k)).collect();
                let gb: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(k, g)| -g * bc(*a, k) / (bc(*b, k) * bc(*b, k)))
                    .collect();
                acc(grads, shape(*a), *a, &ga);
                acc(grads, shape(*b), *b, &gb);
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = gd.iter().map(|g| g * f).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::MatMul(a, b) => {
                let (x, w) = (vals.get(*a), vals.get(*b));
                let (m, n, p) = (x.rows(), x.cols(), w.cols());
                // dX = G W^T, dW = X^T G
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; n * p];
                for r in 0..m {
                    for k in 0..n {
                        let mut s = 0.0;
                        for c in 0..p {
                            s += gd[r * p + c] * w.data()[k * p + c];
                            gb[k * p + c] += x.data()[r * n + k] * gd[r * p + c];
                        }
                        ga[r * n + k] = s;
                    }
                }
                acc(grads, shape(*a), *a, &ga);
                acc(grads, shape(*b), *b, &gb);
            }
            Op::Outer(a, b) => {
                let (u, v) = (val(*a), val(*b));
                let n = v.len();
                let ga: Vec<f64> = (0..u.len()).map(|r| (0..n).map(|c| gd[r * n + c] * v[c]).sum()).collect();
                let gb: Vec<f64> = (0..n).map(|c| (0..u.len()).map(|r| gd[r * n + c] * u[r]).sum()).collect();
                acc(grads, shape(*a), *a, &ga);
                acc(grads, shape(*b), *b, &gb);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = gd.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Softplus(a) => {
                let ga: Vec<f64> = gd.iter().zip(val(*a)).map(|(g, &x)| g * sigmoid(x)).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = gd.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::ClampMin(a, f) => {
                let ga: Vec<f64> = gd.iter().zip(val(*a)).map(|(g, &x)| if x > *f { *g } else { 0.0 }).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Softmax(a) => {
                let gy: f64 = gd.iter().zip(y).map(|(g, y)| g * y).sum();
                let ga: Vec<f64> = gd.iter().zip(y).map(|(g, y)| y * (g - gy)).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::L1Normalize(a) => {
                let x = val(*a);
                let norm: f64 = x.iter().map(|v| v.abs()).sum();
                let gx: f64 = gd.iter().zip(x).map(|(g, x)| g * x).sum();
                let ga: Vec<f64> = gd.iter().zip(x).map(|(g, x)| g / norm - x.signum() * gx / (norm * norm)).collect();
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Slice(a, s, _) => {
                let mut ga = vec![0.0; shape(*a).len()];
                ga[*s..*s + gd.len()].copy_from_slice(gd);
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Row(a, r) => {
                let mut ga = vec![0.0; shape(*a).len()];
                let c = gd.len();
                ga[r * c..(r + 1) * c].copy_from_slice(gd);
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Column(a, c) => {
                let Shape::Matrix(rows, cols) = shape(*a) else { unreachable!() };
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + c] = gd[r];
                }
                acc(grads, shape(*a), *a, &ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = shape(p).len();
                    acc(grads, shape(p), p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::Sum(a) => {
                let ga = vec![gd[0]; shape(*a).len()];
                acc(grads, shape(*a), *a, &ga);
            }
        }
    }
}

use super::{cosine, dot, safe_log, sigmoid, softmax, softplus, Result, Tensor, TensorError, LOG_EPS, NORM_EPS};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs always precede the node that consumes them.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Matrix plus a column vector broadcast over every column.
    AddColumn(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    SafeLog(Var),
    Softplus(Var),
    /// `scale * x + shift`
    Affine(Var, f64, f64),
    Softmax(Var),
    Cosine(Var, Var),
    /// Mean over the columns of a matrix.
    MeanColumns(Var),
    SelectColumns(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient table returned by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zero when no path exists.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn has_path(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// Interpret a tensor as a matrix for multiplication. A vector on the left is
/// a row, a vector on the right is a column.
fn mat_dims(shape: &[usize], left: bool) -> Option<(usize, usize)> {
    match shape.len() {
        1 if left => Some((1, shape[0])),
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Pre-activation values of every relu node, in insertion order.
    pub fn relu_preactivations(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend_from_slice(self.nodes[x.0].value.data());
            }
        }
        out
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, op: Op, opname: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let shape_err = || TensorError::Shape {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (m, k) = mat_dims(&sa, true).ok_or_else(shape_err)?;
        let (k2, n) = mat_dims(&sb, false).ok_or_else(shape_err)?;
        if k != k2 {
            return Err(shape_err());
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = Vec::new();
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        self.derived(Op::MatMul(a, b), "matmul", shape, data, &[a, b])
    }

    fn zip_with(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.derived(op, name, shape, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Hadamard(a, b), "hadamard", a, b, |x, y| x * y)
    }

    pub fn add_column(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.value(m).shape().to_vec(), self.value(v).shape().to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(TensorError::Shape {
                op: "add_column",
                left: sm,
                right: sv,
            });
        }
        let cols = sm[1];
        let vd = self.value(v).data().to_vec();
        let data = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i / cols])
            .collect();
        self.derived(Op::AddColumn(m, v), "add_column", sm, data, &[m, v])
    }

    fn unary(&mut self, op: Op, name: &'static str, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.derived(op, name, shape, data, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu(x), "relu", x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x), "sigmoid", x, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x), "exp", x, f64::exp)
    }

    pub fn safe_log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::SafeLog(x), "safe_log", x, safe_log)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus(x), "softplus", x, softplus)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(Op::Affine(x, scale, shift), "affine", x, |v| scale * v + shift)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(TensorError::Shape {
                op: "softmax",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        if t.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let data = softmax(t.data());
        let shape = t.shape().to_vec();
        self.derived(Op::Softmax(x), "softmax", shape, data, &[x])
    }

    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine", u, v)?;
        let c = cosine(self.value(u).data(), self.value(v).data())?;
        self.derived(Op::Cosine(u, v), "cosine", vec![], vec![c], &[u, v])
    }

    pub fn mean_columns(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(TensorError::Shape {
                op: "mean_pool",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if cols == 0 || rows == 0 {
            return Err(TensorError::EmptyInput { op: "mean_pool" });
        }
        let data = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        self.derived(Op::MeanColumns(m), "mean_pool", vec![rows], data, &[m])
    }

    pub fn select_columns(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(TensorError::Shape {
                op: "select_columns",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(TensorError::Contract(format!(
                "select_columns: index {bad} out of range for {cols} columns"
            )));
        }
        let k = idx.len();
        let mut data = vec![0.0; rows * k];
        for r in 0..rows {
            for (j, &c) in idx.iter().enumerate() {
                data[r * k + j] = t.data()[r * cols + c];
            }
        }
        self.derived(Op::SelectColumns(m, idx.to_vec()), "select_columns", vec![rows, k], data, &[m])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.derived(Op::Sum(x), "sum", vec![], vec![s], &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        // Only report gradients for leaves that asked for them.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(self.nodes[a.0].value.shape(), true).unwrap();
                let (_, n) = mat_dims(self.nodes[b.0].value.shape(), false).unwrap();
                if wants(*a) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let bd = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if wants(*b) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let ad = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::AddColumn(m, v) => {
                if wants(*m) {
                    accumulate(&mut grads[m.0], g.to_vec());
                }
                if wants(*v) {
                    let rows = self.nodes[v.0].value.len();
                    let cols = g.len() / rows.max(1);
                    let d = (0..rows).map(|r| g[r * cols..(r + 1) * cols].iter().sum()).collect();
                    accumulate(&mut grads[v.0], d);
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Exp(x) => {
                let d = g.iter().zip(node.value.data()).map(|(gv, &e)| gv * e).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::SafeLog(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > LOG_EPS { gv / xv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Softplus(x) => {
                let d = g.iter().zip(val(*x)).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Affine(x, scale, _) => {
                accumulate(&mut grads[x.0], g.iter().map(|v| v * scale).collect());
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let inner = dot(g, s);
                let d = s.iter().zip(g).map(|(&si, &gi)| si * (gi - inner)).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Cosine(u, v) => {
                let (ud, vd) = (val(*u), val(*v));
                let nu = dot(ud, ud).sqrt().max(NORM_EPS);
                let nv = dot(vd, vd).sqrt().max(NORM_EPS);
                let c = node.value.item();
                let gs = g[0];
                if wants(*u) {
                    let d = ud
                        .iter()
                        .zip(vd)
                        .map(|(&a, &b)| gs * (b / (nu * nv) - c * a / (nu * nu)))
                        .collect();
                    accumulate(&mut grads[u.0], d);
                }
                if wants(*v) {
                    let d = ud
                        .iter()
                        .zip(vd)
                        .map(|(&a, &b)| gs * (a / (nu * nv) - c * b / (nv * nv)))
                        .collect();
                    accumulate(&mut grads[v.0], d);
                }
            }
            Op::MeanColumns(m) => {
                let shape = self.nodes[m.0].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let inv = 1.0 / cols as f64;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = g[r] * inv;
                    }
                }
                accumulate(&mut grads[m.0], d);
            }
            Op::SelectColumns(m, idx) => {
                let shape = self.nodes[m.0].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let k = idx.len();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (j, &c) in idx.iter().enumerate() {
                        d[r * cols + c] += g[r * k + j];
                    }
                }
                accumulate(&mut grads[m.0], d);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
        }
    }
}

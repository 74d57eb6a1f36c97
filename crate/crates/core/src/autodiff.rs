//! Dense-tensor arithmetic with reverse-mode gradients and an Adam optimizer.
//!
//! A [`Tape`] records every operation of a forward pass in topological order;
//! [`Tape::backward`] replays the record in reverse, accumulating gradients by
//! the chain rule. Tensors are rank-1 or rank-2 with `f64` storage. Scalars
//! are rank-1 tensors of length one.
//!
//! A tape and its tensors form a single-threaded unit of work; distinct tapes
//! may run on distinct threads. Frozen parameter values are plain `Vec<f64>`
//! and safely shareable.

use crate::error::{Error, Result};

/// A dense tensor value: shape, flat row-major storage, and (after a backward
/// pass) an optional gradient of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("Tensor::new", &shape, &[values.len()]));
        }
        check_finite(&values, "Tensor::new")?;
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(values, vec![n]).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(values, vec![rows, cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::vector(vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// NaN/Inf detection: raises an error in debug builds, free in release.
#[inline]
fn check_finite(values: &[f64], context: &str) -> Result<()> {
    #[cfg(debug_assertions)]
    {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
    }
    #[cfg(not(debug_assertions))]
    let _ = (values, context);
    Ok(())
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleByVar { a: Var, s: Var },
    Elementwise { a: Var, kind: Activation },
    Softmax { a: Var, axis: usize },
    MaskedSoftmaxRows { a: Var, allowed: Vec<bool> },
    Concat { a: Var, b: Var, axis: usize },
    StackRows { rows: Vec<Var> },
    Row { a: Var, index: usize },
    Index { a: Var, index: usize },
    MeanRows { a: Var },
    SumRows { a: Var },
    Transpose { a: Var },
    TopKRenorm { a: Var, k: usize },
    NllLoss { p: Var, target: usize },
    MeanStack { items: Vec<Var> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations. Every node appears after all
/// producers of its inputs, so a single reverse sweep implements backprop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot a node as a [`Tensor`], gradient included.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- node creation ------------------------------------------------

    /// Register a tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t.shape, t.values, rg)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, values: &[f64], shape: &[usize]) -> Var {
        self.push(Op::Leaf, shape.to_vec(), values.to_vec(), true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, values: &[f64], shape: &[usize]) -> Var {
        self.push(Op::Leaf, shape.to_vec(), values.to_vec(), false)
    }

    pub fn constant_vector(&mut self, values: &[f64]) -> Var {
        self.push(Op::Leaf, vec![values.len()], values.to_vec(), false)
    }

    // ---- operations ----------------------------------------------------

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[k]x[k,n]` (row vector on the
    /// left) and `[m,k]x[k]` (column vector on the right).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        check_finite(&out, "matmul")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, out_shape, out, rg))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("add", &sa, &sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, sa, out, rg))
    }

    /// Hadamard product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::shape("mul", &sa, &sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, sa, out, rg))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.needs(a);
        self.push(Op::Scale { a, c }, shape, out, rg)
    }

    /// Multiply a tensor by a scalar node (shape `[1]`).
    pub fn scale_by_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by_var", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        check_finite(&out, "scale_by_var")?;
        let rg = self.needs(a) || self.needs(s);
        Ok(self.push(Op::ScaleByVar { a, s }, shape, out, rg))
    }

    /// Pointwise activation. The ReLU subgradient at exactly 0 is 0.
    pub fn elementwise(&mut self, a: Var, kind: Activation) -> Var {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                Activation::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            })
            .collect();
        let rg = self.needs(a);
        self.push(Op::Elementwise { a, kind }, shape, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(a, Activation::Sigmoid)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let mut out = self.value(a).to_vec();
        for_each_lane(&shape, axis, |lane| softmax_lane(&mut out, lane));
        check_finite(&out, "softmax")?;
        let rg = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, shape, out, rg))
    }

    /// Row softmax over a square score matrix, restricted to `allowed`
    /// positions; disallowed positions are exactly zero in the output.
    /// A row with no allowed position is rejected.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("masked_softmax_rows", &shape, &[2]));
        };
        if allowed.len() != rows * cols {
            return Err(Error::shape(
                "masked_softmax_rows",
                &shape,
                &[allowed.len()],
            ));
        }
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let idx: Vec<usize> = (0..cols).filter(|c| allowed[r * cols + c]).collect();
            if idx.is_empty() {
                return Err(Error::data(format!(
                    "masked_softmax_rows: row {r} has no allowed entry"
                )));
            }
            let max = idx
                .iter()
                .map(|&c| av[r * cols + c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &c in &idx {
                let e = (av[r * cols + c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for &c in &idx {
                out[r * cols + c] /= sum;
            }
        }
        check_finite(&out, "masked_softmax_rows")?;
        let rg = self.needs(a);
        Ok(self.push(
            Op::MaskedSoftmaxRows {
                a,
                allowed: allowed.to_vec(),
            },
            shape,
            out,
            rg,
        ))
    }

    /// Concatenate along `axis`. Shapes must agree on every other axis.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (out_shape, out) = match (sa.as_slice(), sb.as_slice(), axis) {
            ([p], [q], 0) => {
                let mut v = self.value(a).to_vec();
                v.extend_from_slice(self.value(b));
                (vec![p + q], v)
            }
            ([m1, d1], [m2, d2], 0) if d1 == d2 => {
                let mut v = self.value(a).to_vec();
                v.extend_from_slice(self.value(b));
                (vec![m1 + m2, *d1], v)
            }
            ([m1, d1], [m2, d2], 1) if m1 == m2 => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut v = Vec::with_capacity(m1 * (d1 + d2));
                for r in 0..*m1 {
                    v.extend_from_slice(&av[r * d1..(r + 1) * d1]);
                    v.extend_from_slice(&bv[r * d2..(r + 1) * d2]);
                }
                (vec![*m1, d1 + d2], v)
            }
            _ => return Err(Error::shape("concat", &sa, &sb)),
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b, axis }, out_shape, out, rg))
    }

    /// Stack `n` vectors of length `d` into an `n x d` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", &[], &[]));
        }
        let d = match self.shape(rows[0]) {
            [d] => *d,
            s => return Err(Error::shape("stack_rows", s, &[1])),
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let s = self.shape(r);
            if s != [d] {
                return Err(Error::shape("stack_rows", s, &[d]));
            }
            out.extend_from_slice(self.value(r));
        }
        let rg = rows.iter().any(|&r| self.needs(r));
        Ok(self.push(
            Op::StackRows {
                rows: rows.to_vec(),
            },
            vec![rows.len(), d],
            out,
            rg,
        ))
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("row", &shape, &[2]));
        };
        if index >= rows {
            return Err(Error::shape("row", &shape, &[index]));
        }
        let out = self.value(a)[index * cols..(index + 1) * cols].to_vec();
        let rg = self.needs(a);
        Ok(self.push(Op::Row { a, index }, vec![cols], out, rg))
    }

    /// Extract element `index` of a vector as a scalar node.
    pub fn index(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [len] = shape[..] else {
            return Err(Error::shape("index", &shape, &[1]));
        };
        if index >= len {
            return Err(Error::shape("index", &shape, &[index]));
        }
        let out = vec![self.value(a)[index]];
        let rg = self.needs(a);
        Ok(self.push(Op::Index { a, index }, vec![1], out, rg))
    }

    /// Arithmetic mean over the rows of a matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, true)
    }

    /// Sum over the rows of a matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, false)
    }

    fn reduce_rows(&mut self, a: Var, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("reduce_rows", &shape, &[2]));
        };
        let av = self.value(a);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += av[r * cols + c];
            }
        }
        if mean {
            for v in &mut out {
                *v /= rows as f64;
            }
        }
        let rg = self.needs(a);
        let op = if mean {
            Op::MeanRows { a }
        } else {
            Op::SumRows { a }
        };
        Ok(self.push(op, vec![cols], out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("transpose", &shape, &[2]));
        };
        let av = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(Op::Transpose { a }, vec![cols, rows], out, rg))
    }

    /// Keep the `k` largest entries of a vector (ties broken toward the lower
    /// index), zero the rest, and renormalize the survivors to sum to 1.
    /// The selection mask is treated as a constant during backprop.
    pub fn topk_renorm(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [len] = shape[..] else {
            return Err(Error::shape("topk_renorm", &shape, &[1]));
        };
        if k == 0 || k > len {
            return Err(Error::Config(format!(
                "topk_renorm: k={k} out of range 1..={len}"
            )));
        }
        let av = self.value(a);
        let kept = top_k_indices(av, k);
        let sum: f64 = kept.iter().map(|&i| av[i]).sum();
        let mut out = vec![0.0; len];
        for &i in &kept {
            out[i] = av[i] / sum;
        }
        check_finite(&out, "topk_renorm")?;
        let rg = self.needs(a);
        Ok(self.push(Op::TopKRenorm { a, k }, shape, out, rg))
    }

    /// Negative log-likelihood of a probability vector at `target`.
    pub fn nll_loss(&mut self, p: Var, target: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        let [len] = shape[..] else {
            return Err(Error::shape("nll_loss", &shape, &[1]));
        };
        if target >= len {
            return Err(Error::shape("nll_loss", &shape, &[target]));
        }
        let pt = self.value(p)[target];
        if pt <= 0.0 {
            return Err(Error::Train(format!(
                "nll_loss: probability {pt} at class {target} is not positive"
            )));
        }
        let out = vec![-pt.ln()];
        let rg = self.needs(p);
        Ok(self.push(Op::NllLoss { p, target }, vec![1], out, rg))
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::shape("mean_stack", &[], &[]));
        }
        let mut acc = 0.0;
        for &it in items {
            if self.value(it).len() != 1 {
                return Err(Error::shape("mean_stack", self.shape(it), &[1]));
            }
            acc += self.value(it)[0];
        }
        let out = vec![acc / items.len() as f64];
        let rg = items.iter().any(|&it| self.needs(it));
        Ok(self.push(
            Op::MeanStack {
                items: items.to_vec(),
            },
            vec![1],
            out,
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Populates gradients for every
    /// node that requires them; unreachable `requires_grad` leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out_grad = self.nodes[id].grad.clone().unwrap();
            self.backward_op(id, &op, &out_grad);
        }

        // Unreachable requires_grad leaves report a zero gradient.
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].values.len();
        debug_assert_eq!(delta.len(), numel);
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.nodes[v.0].grad = Some(delta.to_vec()),
        }
    }

    fn backward_op(&mut self, id: usize, op: &Op, og: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
                    ([m, k], [_, n]) => (*m, *k, *n),
                    ([k], [_, n]) => (1, *k, *n),
                    ([m, k], [_]) => (*m, *k, 1),
                    _ => unreachable!("validated at construction"),
                };
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += og[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * og[i * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, og);
                self.accumulate(*b, og);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = og.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = og.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = og.iter().map(|g| g * c).collect();
                self.accumulate(*a, &da);
            }
            Op::ScaleByVar { a, s } => {
                if self.needs(*a) {
                    let sv = self.value(*s)[0];
                    let da: Vec<f64> = og.iter().map(|g| g * sv).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*s) {
                    let ds: f64 = og.iter().zip(self.value(*a)).map(|(g, x)| g * x).sum();
                    self.accumulate(*s, &[ds]);
                }
            }
            Op::Elementwise { a, kind } => {
                let da: Vec<f64> = match kind {
                    Activation::Relu => og
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Tanh => og
                        .iter()
                        .zip(&self.nodes[id].values)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                    Activation::Sigmoid => og
                        .iter()
                        .zip(&self.nodes[id].values)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                };
                self.accumulate(*a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[id].shape.clone();
                let y = self.nodes[id].values.clone();
                let mut da = vec![0.0; y.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| og[i] * y[i]).sum();
                    for &i in lane {
                        da[i] = y[i] * (og[i] - dot);
                    }
                });
                self.accumulate(*a, &da);
            }
            Op::MaskedSoftmaxRows { a, allowed } => {
                let [rows, cols] = self.nodes[id].shape[..] else {
                    unreachable!()
                };
                let y = self.nodes[id].values.clone();
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let idx: Vec<usize> = (0..cols)
                        .map(|c| r * cols + c)
                        .filter(|&i| allowed[i])
                        .collect();
                    let dot: f64 = idx.iter().map(|&i| og[i] * y[i]).sum();
                    for &i in &idx {
                        da[i] = y[i] * (og[i] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                match (sa.as_slice(), sb.as_slice(), axis) {
                    ([p], [_], 0) | ([p, _], [_, _], 0) => {
                        let na = self.value(*a).len();
                        let _ = p;
                        self.accumulate(*a, &og[..na]);
                        let db = og[na..].to_vec();
                        self.accumulate(*b, &db);
                    }
                    ([m, d1], [_, d2], 1) => {
                        let (m, d1, d2) = (*m, *d1, *d2);
                        let mut da = vec![0.0; m * d1];
                        let mut db = vec![0.0; m * d2];
                        for r in 0..m {
                            let base = r * (d1 + d2);
                            da[r * d1..(r + 1) * d1].copy_from_slice(&og[base..base + d1]);
                            db[r * d2..(r + 1) * d2]
                                .copy_from_slice(&og[base + d1..base + d1 + d2]);
                        }
                        self.accumulate(*a, &da);
                        self.accumulate(*b, &db);
                    }
                    _ => unreachable!("validated at construction"),
                }
            }
            Op::StackRows { rows } => {
                let d = self.nodes[id].shape[1];
                for (r, &row) in rows.iter().enumerate() {
                    self.accumulate(row, &og[r * d..(r + 1) * d]);
                }
            }
            Op::Row { a, index } => {
                let [rows, cols] = self.shape(*a) else {
                    unreachable!()
                };
                let (rows, cols) = (*rows, *cols);
                let mut da = vec![0.0; rows * cols];
                da[index * cols..(index + 1) * cols].copy_from_slice(og);
                self.accumulate(*a, &da);
            }
            Op::Index { a, index } => {
                let len = self.value(*a).len();
                let mut da = vec![0.0; len];
                da[*index] = og[0];
                self.accumulate(*a, &da);
            }
            Op::MeanRows { a } => {
                let [rows, cols] = self.shape(*a) else {
                    unreachable!()
                };
                let (rows, cols) = (*rows, *cols);
                let inv = 1.0 / rows as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = og[c] * inv;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::SumRows { a } => {
                let [rows, cols] = self.shape(*a) else {
                    unreachable!()
                };
                let (rows, cols) = (*rows, *cols);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols..(r + 1) * cols].copy_from_slice(og);
                }
                self.accumulate(*a, &da);
            }
            Op::Transpose { a } => {
                let [rows, cols] = self.shape(*a) else {
                    unreachable!()
                };
                let (rows, cols) = (*rows, *cols);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = og[c * rows + r];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::TopKRenorm { a, k } => {
                let av = self.value(*a).to_vec();
                let kept = top_k_indices(&av, *k);
                let sum: f64 = kept.iter().map(|&i| av[i]).sum();
                let y = &self.nodes[id].values;
                // d a_j = (og_j - sum_i og_i * y_i) / sum, over survivors only
                let dot: f64 = kept.iter().map(|&i| og[i] * y[i]).sum();
                let mut da = vec![0.0; av.len()];
                for &j in &kept {
                    da[j] = (og[j] - dot) / sum;
                }
                self.accumulate(*a, &da);
            }
            Op::NllLoss { p, target } => {
                let pv = self.value(*p).to_vec();
                let mut dp = vec![0.0; pv.len()];
                dp[*target] = -og[0] / pv[*target];
                self.accumulate(*p, &dp);
            }
            Op::MeanStack { items } => {
                let g = og[0] / items.len() as f64;
                for &it in items.iter() {
                    self.accumulate(it, &[g]);
                }
            }
        }
    }
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order
}

/// Visit each 1-D lane of `shape` along `axis`, passing flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, 0) => {
            let lane: Vec<usize> = (0..shape[0]).collect();
            f(&lane);
        }
        (2, 1) => {
            let (rows, cols) = (shape[0], shape[1]);
            for r in 0..rows {
                let lane: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                f(&lane);
            }
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            for c in 0..cols {
                let lane: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                f(&lane);
            }
        }
        _ => unreachable!("softmax axis validated at construction"),
    }
}

fn softmax_lane(values: &mut [f64], lane: &[usize]) {
    let max = lane
        .iter()
        .map(|&i| values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in lane {
        let e = (values[i] - max).exp();
        values[i] = e;
        sum += e;
    }
    for &i in lane {
        values[i] /= sum;
    }
}

/// Per-parameter Adam accumulators with bias correction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

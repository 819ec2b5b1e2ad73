//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to accumulate exact gradients. The primitive set
//! is deliberately small: affine, sigmoid, tanh, elementwise add/mul/sub,
//! concat, slice, mean-reduce, log, square, plus a gradient-reversal
//! connector and a fused Gaussian negative log-likelihood node (its σ²
//! division has no closed composition from the other primitives).
//!
//! All arithmetic is f64. Forward evaluation is deterministic: identical
//! inputs produce bitwise-identical outputs. Gradients accumulate additively
//! into grad buffers; the caller zeroes them between steps.

use crate::error::{Error, Result};

/// A dense tensor: shape, flat row-major values, and an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Gradient buffer, if any backward pass has written into it.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x[n,p] @ w[p,q] (+ b[q] when present).
    Affine { x: TensorId, w: TensorId, b: Option<TensorId> },
    Sigmoid(TensorId),
    Tanh(TensorId),
    Log(TensorId),
    Square(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// Columns of `a` then columns of `b`; leading dimensions must agree.
    Concat { a: TensorId, b: TensorId },
    /// Rectangular region rows r0..r1, cols c0..c1 of a 2-D tensor.
    Slice { x: TensorId, r0: usize, r1: usize, c0: usize, c1: usize },
    /// Mean over all elements, producing a scalar.
    Mean(TensorId),
    /// Identity forward; backward multiplies the incoming gradient by -lambda.
    GradReverse { x: TensorId, lambda: f64 },
    /// Mean over i of 0.5*(ln(max(s_i, floor)) + (t_i - mu_i)^2 / max(s_i, floor)).
    /// Fused: the reciprocal of σ² does not compose from the primitive set.
    GaussianNll { mu: TensorId, sigma2: TensorId, target: Vec<f64>, floor: f64 },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Counters returned by [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes examined by the reverse sweep (always the tape length).
    pub nodes_swept: usize,
    /// Nodes that actually carried a gradient.
    pub nodes_with_grad: usize,
}

/// Records a forward computation as a topologically ordered list of
/// primitive operations; every operation's inputs precede it by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape.iter().product::<usize>(), 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Inserts a leaf node copying the tensor's current values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── Forward primitives ───────────────────────────────────────────

    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.affine_impl(x, w, Some(b))
    }

    /// Affine without the bias term.
    pub fn matmul(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        self.affine_impl(x, w, None)
    }

    fn affine_impl(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let (n, p) = rows_cols(self.shape(x));
        let (wp, q) = {
            let ws = self.shape(w);
            if ws.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "affine: weight must be 2-D",
                    lhs: self.shape(x).to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            (ws[0], ws[1])
        };
        if p != wp {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.nodes[b.0].values.len() != q {
                return Err(Error::ShapeMismatch {
                    op: "affine: bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut out = match b {
            Some(b) => {
                let bv = &self.nodes[b.0].values;
                let mut o = Vec::with_capacity(n * q);
                for _ in 0..n {
                    o.extend_from_slice(bv);
                }
                o
            }
            None => vec![0.0; n * q],
        };
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            for i in 0..n {
                for k in 0..p {
                    let xik = xv[i * p + k];
                    let wrow = &wv[k * q..(k + 1) * q];
                    let orow = &mut out[i * q..(i + 1) * q];
                    for j in 0..q {
                        orow[j] += xik * wrow[j];
                    }
                }
            }
        }
        Ok(self.push(vec![n, q], out, Op::Affine { x, w, b }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> =
            self.nodes[x.0].values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Tanh(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Log(x))
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Square(x))
    }

    fn binary_shapes(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (self.nodes[a.0].values.len(), self.nodes[b.0].values.len());
        if sa == sb {
            Ok(sa.clone())
        } else if lb == 1 {
            Ok(sa.clone())
        } else if la == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
        }
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let shape = self.binary_shapes(op, a, b)?;
        let numel: usize = shape.iter().product();
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let values: Vec<f64> = (0..numel)
            .map(|i| f(av[if av.len() == 1 { 0 } else { i }], bv[if bv.len() == 1 { 0 } else { i }]))
            .collect();
        Ok(self.push(shape, values, mk(a, b)))
    }

    /// Elementwise sum; either side may be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let s = self.scalar(c);
        self.add(a, s).expect("scalar add cannot mismatch")
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let s = self.scalar(c);
        self.mul(a, s).expect("scalar mul cannot mismatch")
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.mul_scalar(a, -1.0)
    }

    /// Joins columns: `[n,p]` and `[n,q]` give `[n,p+q]`.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, pa) = rows_cols(self.shape(a));
        let (nb, pb) = rows_cols(self.shape(b));
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut values = Vec::with_capacity(na * (pa + pb));
        for i in 0..na {
            values.extend_from_slice(&self.nodes[a.0].values[i * pa..(i + 1) * pa]);
            values.extend_from_slice(&self.nodes[b.0].values[i * pb..(i + 1) * pb]);
        }
        Ok(self.push(vec![na, pa + pb], values, Op::Concat { a, b }))
    }

    /// Rectangular slice rows `r0..r1`, cols `c0..c1` of a 2-D tensor.
    pub fn slice(
        &mut self,
        x: TensorId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<TensorId> {
        let (n, p) = rows_cols(self.shape(x));
        let (r0, r1, c0, c1) = (rows.start, rows.end, cols.start, cols.end);
        if r1 > n || c1 > p || r0 >= r1 || c0 >= c1 {
            return Err(Error::contract(format!(
                "slice rows {r0}..{r1}, cols {c0}..{c1} out of range for shape [{n}, {p}]"
            )));
        }
        let mut values = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            values.extend_from_slice(&self.nodes[x.0].values[i * p + c0..i * p + c1]);
        }
        Ok(self.push(vec![r1 - r0, c1 - c0], values, Op::Slice { x, r0, r1, c0, c1 }))
    }

    /// Mean over all elements, producing a `[1]` tensor.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].values;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x))
    }

    /// Identity on values; backward scales the incoming gradient by -lambda.
    pub fn grad_reverse(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        if !(lambda >= 0.0) {
            return Err(Error::config(format!("gradient reversal lambda must be >= 0, got {lambda}")));
        }
        let shape = self.nodes[x.0].shape.clone();
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(shape, values, Op::GradReverse { x, lambda }))
    }

    /// Fused Gaussian negative log-likelihood with the constant term omitted:
    /// mean over i of 0.5*(ln(max(s_i, floor)) + (t_i - mu_i)^2 / max(s_i, floor)).
    pub fn gaussian_nll(
        &mut self,
        mu: TensorId,
        sigma2: TensorId,
        target: &[f64],
        floor: f64,
    ) -> Result<TensorId> {
        let n = self.nodes[mu.0].values.len();
        if self.nodes[sigma2.0].values.len() != n || target.len() != n {
            return Err(Error::ShapeMismatch {
                op: "gaussian_nll",
                lhs: self.shape(mu).to_vec(),
                rhs: self.shape(sigma2).to_vec(),
            });
        }
        if n == 0 {
            return Err(Error::contract("gaussian_nll on empty input"));
        }
        let mut acc = 0.0;
        for i in 0..n {
            let s = self.nodes[sigma2.0].values[i].max(floor);
            let r = target[i] - self.nodes[mu.0].values[i];
            acc += 0.5 * (s.ln() + r * r / s);
        }
        let value = acc / n as f64;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::GaussianNll { mu, sigma2, target: target.to_vec(), floor },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        if delta.len() == g.len() {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        } else {
            // scalar node fed into a broadcast op: reduce by summation
            debug_assert_eq!(g.len(), 1);
            g[0] += delta.iter().sum::<f64>();
        }
    }

    /// Reverse sweep from a scalar `loss` node. Visits each node exactly
    /// once, in reverse topological order.
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardStats> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut nodes_with_grad = 0usize;
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.clone() else { continue };
            nodes_with_grad += 1;
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (n, p) = rows_cols(&self.nodes[x.0].shape);
                    let q = self.nodes[w.0].shape[1];
                    let xv = self.nodes[x.0].values.clone();
                    let wv = self.nodes[w.0].values.clone();
                    // dX[i,k] = sum_j G[i,j] * W[k,j]
                    let mut dx = vec![0.0; n * p];
                    for i2 in 0..n {
                        let grow = &grad[i2 * q..(i2 + 1) * q];
                        for k in 0..p {
                            let wrow = &wv[k * q..(k + 1) * q];
                            let mut s = 0.0;
                            for j in 0..q {
                                s += grow[j] * wrow[j];
                            }
                            dx[i2 * p + k] = s;
                        }
                    }
                    self.add_grad(x, &dx);
                    // dW[k,j] = sum_i X[i,k] * G[i,j]
                    let mut dw = vec![0.0; p * q];
                    for i2 in 0..n {
                        let grow = &grad[i2 * q..(i2 + 1) * q];
                        for k in 0..p {
                            let xik = xv[i2 * p + k];
                            let drow = &mut dw[k * q..(k + 1) * q];
                            for j in 0..q {
                                drow[j] += xik * grow[j];
                            }
                        }
                    }
                    self.add_grad(w, &dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; q];
                        for i2 in 0..n {
                            for j in 0..q {
                                db[j] += grad[i2 * q + j];
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Sigmoid(x) => {
                    let out = &self.nodes[i].values;
                    let dx: Vec<f64> =
                        grad.iter().zip(out).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    self.add_grad(x, &dx);
                }
                Op::Tanh(x) => {
                    let out = &self.nodes[i].values;
                    let dx: Vec<f64> = grad.iter().zip(out).map(|(g, &t)| g * (1.0 - t * t)).collect();
                    self.add_grad(x, &dx);
                }
                Op::Log(x) => {
                    let xv = self.nodes[x.0].values.clone();
                    let dx: Vec<f64> = grad.iter().zip(&xv).map(|(g, &v)| g / v).collect();
                    self.add_grad(x, &dx);
                }
                Op::Square(x) => {
                    let xv = self.nodes[x.0].values.clone();
                    let dx: Vec<f64> = grad.iter().zip(&xv).map(|(g, &v)| g * 2.0 * v).collect();
                    self.add_grad(x, &dx);
                }
                Op::Add(a, b) => {
                    self.add_grad(a, &grad);
                    self.add_grad(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    let da: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, g)| g * bv[if bv.len() == 1 { 0 } else { k }])
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, g)| g * av[if av.len() == 1 { 0 } else { k }])
                        .collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Concat { a, b } => {
                    let (n, pa) = rows_cols(&self.nodes[a.0].shape);
                    let pb = rows_cols(&self.nodes[b.0].shape).1;
                    let w = pa + pb;
                    let mut da = vec![0.0; n * pa];
                    let mut db = vec![0.0; n * pb];
                    for r in 0..n {
                        da[r * pa..(r + 1) * pa].copy_from_slice(&grad[r * w..r * w + pa]);
                        db[r * pb..(r + 1) * pb].copy_from_slice(&grad[r * w + pa..(r + 1) * w]);
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Slice { x, r0, r1, c0, c1 } => {
                    let p = rows_cols(&self.nodes[x.0].shape).1;
                    let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                    let w = c1 - c0;
                    for (ri, r) in (r0..r1).enumerate() {
                        dx[r * p + c0..r * p + c1].copy_from_slice(&grad[ri * w..(ri + 1) * w]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].values.len();
                    let g = grad[0] / n as f64;
                    self.add_grad(x, &vec![g; n]);
                }
                Op::GradReverse { x, lambda } => {
                    let dx: Vec<f64> = grad.iter().map(|g| -lambda * g).collect();
                    self.add_grad(x, &dx);
                }
                Op::GaussianNll { mu, sigma2, target, floor } => {
                    let n = target.len();
                    let g = grad[0] / n as f64;
                    let muv = self.nodes[mu.0].values.clone();
                    let sv = self.nodes[sigma2.0].values.clone();
                    let mut dmu = vec![0.0; n];
                    let mut ds = vec![0.0; n];
                    for k in 0..n {
                        let s = sv[k].max(floor);
                        let r = target[k] - muv[k];
                        dmu[k] = g * (-r / s);
                        // clamped region is flat in sigma2
                        ds[k] = if sv[k] < floor { 0.0 } else { g * 0.5 * (1.0 / s - r * r / (s * s)) };
                    }
                    self.add_grad(mu, &dmu);
                    self.add_grad(sigma2, &ds);
                }
            }
        }
        Ok(BackwardStats { nodes_swept: loss.0 + 1, nodes_with_grad })
    }
}

// ── Gradient verification ────────────────────────────────────────────

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Checks the reverse-mode gradient of a scalar-valued computation against
/// central finite differences at `x`. Returns the max relative error over
/// coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several independent input tensors at once.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |points: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &ids)?;
        if tape.values(out).len() != 1 {
            return Err(Error::contract(format!(
                "grad_check requires a scalar-valued computation, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, ids, out))
    };

    let (mut tape, ids, out) = eval(inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.values(id).len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut points = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for ci in 0..t.numel() {
            let orig = t.values()[ci];
            points[ti].values_mut()[ci] = orig + eps;
            let (tp, _, op) = eval(&points)?;
            let fp = tp.values(op)[0];
            points[ti].values_mut()[ci] = orig - eps;
            let (tm, _, om) = eval(&points)?;
            let fm = tm.values(om)[0];
            points[ti].values_mut()[ci] = orig;
            numeric[ci] = (fp - fm) / (2.0 * eps);
        }
        worst = worst.max(max_rel_err(&analytic[ti], &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn affine_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0]);
    }

    #[test]
    fn affine_zero_weights_pass_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_product() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = tape.constant(vec![2], vec![0.0, 1.0]).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "got: {msg}");
    }

    #[test]
    fn sigmoid_and_tanh_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![0.0, 3f64.ln(), 0.0]).unwrap();
        let s = tape.sigmoid(x);
        let th = tape.tanh(x);
        assert_eq!(tape.values(s)[0], 0.5);
        assert!((tape.values(s)[1] - 0.75).abs() < 1e-15);
        assert_eq!(tape.values(th)[0], 0.0);
    }

    #[test]
    fn concat_rows_and_backward_split() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let b = tape.constant(vec![1, 1], vec![2.0]).unwrap();
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0]);
        let a2 = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b2 = tape.constant(vec![1, 1], vec![3.0]).unwrap();
        let c2 = tape.concat(a2, b2).unwrap();
        assert_eq!(tape.values(c2), &[1.0, 2.0, 3.0]);

        // backward of sum over concat gives unit gradient to both sides
        let m = tape.mean(c);
        let s = tape.mul_scalar(m, 2.0); // mean of 2 elements * 2 == sum
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn concat_leading_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![1, 1], vec![3.0]).unwrap();
        assert!(matches!(tape.concat(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn slice_forward_and_backward_scatter() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = tape.slice(x, 0..2, 1..3).unwrap();
        assert_eq!(tape.values(s), &[2.0, 3.0, 5.0, 6.0]);
        let m = tape.mean(s);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.25, 0.25, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negates_backward() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.5, -2.5]).unwrap();
        let r = tape.grad_reverse(x, 1.0).unwrap();
        assert_eq!(tape.values(r), tape.values(x));
        let m = tape.mean(r);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-0.5, -0.5]);
    }

    #[test]
    fn grad_reverse_zero_lambda_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let r = tape.grad_reverse(x, 0.0).unwrap();
        let m = tape.mean(r);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![1.0]).unwrap();
        assert!(matches!(tape.grad_reverse(x, -0.5), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_use_accumulates_once_per_path() {
        // y = x + x: dy/dx = 2, accumulated as two unit contributions
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![3.0]).unwrap();
        let y = tape.add(x, x).unwrap();
        let stats = tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert_eq!(stats.nodes_swept, 2);
        assert_eq!(stats.nodes_with_grad, 2);
    }

    #[test]
    fn backward_visits_each_node_exactly_once() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.square(x);
        let t = tape.tanh(s);
        let u = tape.mul(t, s).unwrap();
        let m = tape.mean(u);
        let stats = tape.backward(m).unwrap();
        assert_eq!(stats.nodes_swept, tape.len());
        assert_eq!(stats.nodes_with_grad, tape.len());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(vec![2, 2], vec![0.3, -1.7, 2.9, 0.01]).unwrap();
            let w = tape.constant(vec![2, 2], vec![0.5, -0.25, 1.5, 0.75]).unwrap();
            let b = tape.constant(vec![2], vec![0.1, -0.2]).unwrap();
            let a = tape.affine(x, w, b).unwrap();
            let s = tape.sigmoid(a);
            let t = tape.tanh(s);
            let m = tape.mean(t);
            tape.values(m).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_sum_of_squares() {
        // f(x) = sum x^2 == mean(x^2) * n; analytic gradient 2x
        let x = t(vec![3], vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, id| {
                let sq = tape.square(id);
                let m = tape.mean(sq);
                Ok(tape.mul_scalar(m, 3.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn grad_check_mse_of_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            |tape, id| {
                let w = tape.constant(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9])?;
                let b = tape.constant(vec![2], vec![0.05, -0.1])?;
                let y = tape.affine(id, w, b)?;
                let target = tape.constant(vec![2, 2], vec![0.5, -0.5, 1.0, 0.0])?;
                let d = tape.sub(y, target)?;
                let sq = tape.square(d);
                Ok(tape.mean(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn grad_check_each_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sample = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(lo..hi)).collect()
        };

        // sigmoid, tanh, square over a composite
        let x = t(vec![2, 2], sample(4, -2.0, 2.0));
        let err = grad_check(
            |tape, id| {
                let s = tape.sigmoid(id);
                let th = tape.tanh(id);
                let m = tape.mul(s, th)?;
                let sq = tape.square(m);
                Ok(tape.mean(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "sigmoid/tanh/square rel err {err}");

        // log over positive inputs
        let xp = t(vec![3], sample(3, 0.5, 3.0));
        let err = grad_check(
            |tape, id| {
                let l = tape.log(id);
                Ok(tape.mean(l))
            },
            &xp,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "log rel err {err}");

        // add/sub/mul with scalar broadcast
        let xa = t(vec![2, 2], sample(4, -1.0, 1.0));
        let err = grad_check(
            |tape, id| {
                let c = tape.scalar(0.7);
                let a = tape.add(id, c)?;
                let b = tape.sub(a, id)?;
                let m = tape.mul(a, b)?;
                let shifted = tape.add_scalar(m, 2.5);
                let l = tape.log(shifted);
                Ok(tape.mean(l))
            },
            &xa,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "add/sub/mul rel err {err}");

        // concat + slice + affine
        let xc = t(vec![2, 2], sample(4, -1.0, 1.0));
        let err = grad_check(
            |tape, id| {
                let other = tape.constant(vec![2, 1], vec![0.4, -0.6])?;
                let cat = tape.concat(id, other)?;
                let sl = tape.slice(cat, 0..2, 0..3)?;
                let w = tape.constant(vec![3, 1], vec![0.2, -0.8, 0.5])?;
                let b = tape.constant(vec![1], vec![0.1])?;
                let y = tape.affine(sl, w, b)?;
                let sq = tape.square(y);
                Ok(tape.mean(sq))
            },
            &xc,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "concat/slice/affine rel err {err}");
    }

    #[test]
    fn grad_check_gaussian_nll_node() {
        let mu = t(vec![3], vec![0.3, -0.8, 1.4]);
        let err = grad_check_multi(
            |tape, ids| {
                let raw = tape.constant(vec![3], vec![0.2, -0.5, 1.0])?;
                // softplus via -ln(sigmoid(-raw)) keeps sigma2 positive
                let nr = tape.neg(raw);
                let sg = tape.sigmoid(nr);
                let lg = tape.log(sg);
                let sp = tape.neg(lg);
                let sigma2 = tape.add_scalar(sp, 1e-6);
                tape.gaussian_nll(ids[0], sigma2, &[0.0, 0.5, 1.0], 1e-6)
            },
            std::slice::from_ref(&mu),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gaussian_nll dmu rel err {err}");

        // and through sigma2 as the variable
        let raw = t(vec![3], vec![0.2, -0.5, 1.0]);
        let err = grad_check(
            |tape, id| {
                let nr = tape.neg(id);
                let sg = tape.sigmoid(nr);
                let lg = tape.log(sg);
                let sp = tape.neg(lg);
                let sigma2 = tape.add_scalar(sp, 1e-6);
                let mu = tape.constant(vec![3], vec![0.3, -0.8, 1.4])?;
                tape.gaussian_nll(mu, sigma2, &[0.0, 0.5, 1.0], 1e-6)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gaussian_nll dsigma2 rel err {err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar_f() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let res = grad_check(|tape, id| Ok(tape.square(id)), &x, 1e-5);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulation_and_zeroing() {
        let mut p = Tensor::zeros(vec![2]);
        p.accumulate_grad(&[1.0, 2.0]);
        p.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(p.grad().unwrap(), &[1.5, 1.0]);
        p.zero_grad();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }
}

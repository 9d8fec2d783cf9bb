//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every node is a row-major `rows x cols` matrix. Operations append nodes to
//! the tape; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node reachable from the root. Elementwise operations
//! store their local partial derivatives at forward time so backward is a
//! single multiply per input.

use std::rc::Rc;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel index for [`Graph::gather`]: the output element is zero.
pub const ZERO_INDEX: u32 = u32::MAX;

/// Backward rule for operations defined outside this module.
pub trait CustomBackward {
    /// Returns the gradient for each input given the values of the inputs, the
    /// forward output and the gradient flowing into the output.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], out_grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    AddConst(Var),
    Gather(Var, Rc<Vec<u32>>),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    RowSum(Var),
    SquaredErrorMean(Var, Rc<Vec<f64>>),
    Elementwise(Vec<Var>, Vec<Vec<f64>>),
    Custom(Vec<Var>, Box<dyn CustomBackward>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, materialising zeros when unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: strides describe matrices that lie within the given slices; the
    // callers below derive them from node shapes that were checked on creation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input node (parameter, data or constant).
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape does not match data");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(1, 1, vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "node is not a scalar");
        n.value[0]
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            &self.nodes[a.0].value,
            k,
            1,
            &self.nodes[b.0].value,
            m,
            1,
            &mut out,
            0.0,
        );
        self.push(n, m, out, Op::MatMul(a, b))
    }

    /// Adds a `[1,m]` row vector to every row of an `[n,m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.nodes[row.0].value.len(), m, "row broadcast width mismatch");
        let r = &self.nodes[row.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.chunks_mut(m) {
            chunk.iter_mut().zip(r).for_each(|(x, b)| *x += b);
        }
        self.push(n, m, out, Op::AddRow(a, row))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let (n, m) = self.shape(a);
        assert_eq!(
            self.nodes[a.0].value.len(),
            self.nodes[b.0].value.len(),
            "elementwise operands differ in size"
        );
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        (n, m, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (n, m, out) = self.zip_same(a, b, |x, y| x + y);
        self.push(n, m, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (n, m, out) = self.zip_same(a, b, |x, y| x - y);
        self.push(n, m, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (n, m, out) = self.zip_same(a, b, |x, y| x * y);
        self.push(n, m, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push(n, m, out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(c.len(), n * m, "constant size mismatch");
        let out = self.nodes[a.0].value.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        self.push(n, m, out, Op::MulConst(a, c))
    }

    /// Elementwise sum with a constant of the same size.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(c.len(), n * m, "constant size mismatch");
        let out = self.nodes[a.0].value.iter().zip(c).map(|(x, y)| x + y).collect();
        self.push(n, m, out, Op::AddConst(a))
    }

    /// `out[i] = a[idx[i]]` over flattened storage; [`ZERO_INDEX`] yields zero.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index size mismatch");
        let src = &self.nodes[a.0].value;
        let out = idx
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { src[i as usize] })
            .collect();
        self.push(rows, cols, out, Op::Gather(a, idx))
    }

    /// Concatenates the flattened storage of `parts` into a `rows x cols` node.
    pub fn concat(&mut self, parts: &[Var], rows: usize, cols: usize) -> Var {
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        assert_eq!(out.len(), rows * cols, "concat size mismatch");
        self.push(rows, cols, out, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.nodes[a.0].value.clone();
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        self.push(rows, cols, v, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums each row: `[n,m] -> [n,1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = if m == 0 {
            vec![0.0; n]
        } else {
            self.nodes[a.0].value.chunks(m).map(|c| c.iter().sum()).collect()
        };
        self.push(n, 1, out, Op::RowSum(a))
    }

    /// Mean squared error between `a` and a constant target.
    pub fn mse_const(&mut self, a: Var, target: Rc<Vec<f64>>) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.len(), target.len(), "mse target size mismatch");
        let n = v.len().max(1) as f64;
        let s: f64 = v.iter().zip(target.iter()).map(|(x, t)| (x - t) * (x - t)).sum();
        self.push(1, 1, vec![s / n], Op::SquaredErrorMean(a, target))
    }

    /// Elementwise node whose value and local partials were computed by the
    /// caller. All inputs must have the same number of elements as `value`.
    pub fn elementwise(&mut self, inputs: &[Var], value: Vec<f64>, partials: Vec<Vec<f64>>) -> Var {
        assert_eq!(inputs.len(), partials.len());
        let (n, m) = self.shape(inputs[0]);
        for (i, p) in inputs.iter().zip(&partials) {
            assert_eq!(self.nodes[i.0].value.len(), value.len());
            assert_eq!(p.len(), value.len());
        }
        self.push(n, m, value, Op::Elementwise(inputs.to_vec(), partials))
    }

    /// Applies a scalar function returning `(f(x), f'(x))` elementwise.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let (value, d): (Vec<f64>, Vec<f64>) = self.nodes[a.0].value.iter().map(|&x| f(x)).unzip();
        self.elementwise(&[a], value, vec![d])
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        rule: Box<dyn CustomBackward>,
    ) -> Var {
        self.push(rows, cols, value, Op::Custom(inputs.to_vec(), rule))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, |x| (softplus(x), sigmoid(x)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_with_derivative)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = grads[a.0].take().unwrap_or_else(|| vec![0.0; n * k]);
                    // dA = dC * B^T
                    gemm(n, m, k, &g, m, 1, bv, 1, m, &mut da, 1.0);
                    grads[a.0] = Some(da);
                    let mut db = grads[b.0].take().unwrap_or_else(|| vec![0.0; k * m]);
                    // dB = A^T * dC
                    gemm(k, n, m, av, 1, k, &g, m, 1, &mut db, 1.0);
                    grads[b.0] = Some(db);
                }
                Op::AddRow(a, row) => {
                    let m = node.cols;
                    add_into(&mut grads[a.0], &g);
                    let mut dr = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    add_into(&mut grads[row.0], &dr);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::MulConst(a, c) => {
                    let da: Vec<f64> = g.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::AddConst(a) | Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::Gather(a, idx) => {
                    let len = self.nodes[a.0].value.len();
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; len]);
                    for (gi, &j) in g.iter().zip(idx.iter()) {
                        if j != ZERO_INDEX {
                            da[j as usize] += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(&mut grads[p.0], &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    add_into(&mut grads[a.0], &vec![g[0]; len]);
                }
                Op::RowSum(a) => {
                    let (n, m) = self.shape(*a);
                    let mut da = Vec::with_capacity(n * m);
                    for gi in &g {
                        da.extend(std::iter::repeat(*gi).take(m));
                    }
                    add_into(&mut grads[a.0], &da);
                }
                Op::SquaredErrorMean(a, t) => {
                    let av = &self.nodes[a.0].value;
                    let scale = 2.0 * g[0] / av.len().max(1) as f64;
                    let da: Vec<f64> = av.iter().zip(t.iter()).map(|(x, y)| scale * (x - y)).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::Elementwise(inputs, partials) => {
                    for (inp, p) in inputs.iter().zip(partials) {
                        let d: Vec<f64> = g.iter().zip(p).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[inp.0], &d);
                    }
                }
                Op::Custom(inputs, rule) => {
                    let vals: Vec<&[f64]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
                    let ds = rule.backward(&vals, &node.value, &g);
                    for (inp, d) in inputs.iter().zip(ds) {
                        add_into(&mut grads[inp.0], &d);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn gelu_with_derivative(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, d)
}

//! The recording tape and its primitive set.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are methods on the tape that take [`Var`] handles and push a new node;
//! a node keeps its inputs only when at least one of them requires a
//! gradient, otherwise it is stored as a detached constant. Node ids are
//! assigned in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] walks it in reverse.
//!
//! Kinks use the right-hand subgradient: `relu'(0) = 1`, `leaky_relu'(0) = 1`,
//! `elu'(0) = 1`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
    Square,
    Scale(f64),
    Shift(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Unary(Unary, Var),
    Softmax(Var),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    RowNorm(Var),
    Cosine(Var, Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    EdgeAggregate { x: Var, w: Var, src: Rc<[usize]>, dst: Rc<[usize]> },
    Concat(Vec<Var>, Axis),
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if no path reached it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rows() == 1 && b.cols() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Ok(Broadcast::Col)
    } else {
        Err(AutodiffError::shape(op, format!("{:?} with {:?}", a.shape(), b.shape())))
    }
}

#[inline]
fn bidx(kind: Broadcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Row => c,
        Broadcast::Col => r,
        Broadcast::Scalar => 0,
    }
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn reduce_to(kind: Broadcast, g: Tensor, b_rows: usize, b_cols: usize) -> Tensor {
    if kind == Broadcast::Same {
        return g;
    }
    let mut out = Tensor::zeros(b_rows, b_cols);
    let cols = g.cols();
    for r in 0..g.rows() {
        for c in 0..cols {
            out.data_mut()[bidx(kind, cols, r, c)] += g.get(r, c);
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf whose gradient will be accumulated.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), self.rg(&[a]))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != av.len() {
            return Err(AutodiffError::shape(
                "reshape",
                format!("{:?} into [{rows}, {cols}]", av.shape()),
            ));
        }
        let out = Tensor::new(rows, cols, av.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    // ---- elementwise binary with broadcasting of the right operand ----

    fn binary(&self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast_kind(name, &av, &bv)?;
        let cols = av.cols();
        let mut out = Tensor::zeros(av.rows(), cols);
        for r in 0..av.rows() {
            for c in 0..cols {
                let x = av.get(r, c);
                let y = bv.data()[bidx(bc, cols, r, c)];
                let v = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == 0.0 {
                            return Err(AutodiffError::domain("div", "division by zero"));
                        }
                        x / y
                    }
                };
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::Binary(kind, a, b, bc), self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    // ---- elementwise unary ----

    fn unary(&self, kind: Unary, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = match kind {
            Unary::Exp => av.map(f64::exp),
            Unary::Log => {
                if let Some(x) = av.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(AutodiffError::domain("log", format!("log of {x}")));
                }
                av.map(f64::ln)
            }
            Unary::Tanh => av.map(f64::tanh),
            Unary::Relu => av.map(|x| x.max(0.0)),
            Unary::LeakyRelu(s) => av.map(|x| if x >= 0.0 { x } else { s * x }),
            Unary::Elu(alpha) => av.map(|x| if x >= 0.0 { x } else { alpha * x.exp_m1() }),
            Unary::Square => av.map(|x| x * x),
            Unary::Scale(c) => av.map(|x| c * x),
            Unary::Shift(c) => av.map(|x| x + c),
        };
        Ok(self.push(out, Op::Unary(kind, a), self.rg(&[a])))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    /// `max(0, x)`.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a).expect("leaky_relu is total")
    }

    pub fn elu(&self, a: Var, alpha: f64) -> Var {
        self.unary(Unary::Elu(alpha), a).expect("elu is total")
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a).expect("scale is total")
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.unary(Unary::Shift(c), a).expect("shift is total")
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- row-wise reductions and normalisations ----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.push(out, Op::Softmax(a), self.rg(&[a]))
    }

    /// Softmax over groups of rows: row `e` belongs to segment `segments[e]`.
    /// Each column is normalised independently within each segment.
    pub fn segment_softmax(&self, a: Var, segments: Rc<[usize]>, num_segments: usize) -> Result<Var> {
        let av = self.value(a);
        if segments.len() != av.rows() {
            return Err(AutodiffError::shape(
                "segment_softmax",
                format!("{} segment ids for {} rows", segments.len(), av.rows()),
            ));
        }
        if let Some(&s) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(AutodiffError::Argument(format!("segment id {s} >= {num_segments}")));
        }
        let cols = av.cols();
        let mut max = vec![f64::NEG_INFINITY; num_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(av.get(e, c));
            }
        }
        let mut out = Tensor::zeros(av.rows(), cols);
        let mut denom = vec![0.0; num_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let v = (av.get(e, c) - max[s * cols + c]).exp();
                out.set(e, c, v);
                denom[s * cols + c] += v;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let v = out.get(e, c) / denom[s * cols + c];
                out.set(e, c, v);
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, segments, num_segments), self.rg(&[a])))
    }

    /// Euclidean norm of each row, `[n, m] -> [n, 1]`.
    pub fn l2_norm_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> =
            (0..av.rows()).map(|r| av.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        self.push(Tensor::column(&out), Op::RowNorm(a), self.rg(&[a]))
    }

    /// Cosine similarity of corresponding rows, `[n, m] x [n, m] -> [n, 1]`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::shape("cosine", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (x, y) = (av.row_slice(r), bv.row_slice(r));
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(AutodiffError::domain("cosine", format!("zero-norm row {r}")));
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            out.push(dot / (nx * ny));
        }
        Ok(self.push(Tensor::column(&out), Op::Cosine(a, b), self.rg(&[a, b])))
    }

    /// `log Σ_j exp(x_rj)` for each row, `[n, m] -> [n, 1]`.
    pub fn log_sum_exp_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows())
            .map(|r| {
                let row = av.row_slice(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Tensor::column(&out), Op::LogSumExp(a), self.rg(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::Argument("mean of an empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), self.rg(&[a])))
    }

    /// Sum of each row, `[n, m] -> [n, 1]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        self.push(Tensor::column(&out), Op::SumRows(a), self.rg(&[a]))
    }

    // ---- indexing ----

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &src) in index.iter().enumerate() {
            if src >= av.rows() {
                return Err(AutodiffError::Argument(format!("gather index {src} >= {}", av.rows())));
            }
            out.row_slice_mut(i).copy_from_slice(av.row_slice(src));
        }
        Ok(self.push(out, Op::Gather(a, index), self.rg(&[a])))
    }

    /// `out[index[i]] += a[i]`, with `out` having `rows` rows.
    pub fn scatter_add_rows(&self, a: Var, index: Rc<[usize]>, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if index.len() != av.rows() {
            return Err(AutodiffError::shape(
                "scatter_add",
                format!("{} indices for {} rows", index.len(), av.rows()),
            ));
        }
        let cols = av.cols();
        let mut out = Tensor::zeros(rows, cols);
        for (i, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(AutodiffError::Argument(format!("scatter index {dst} >= {rows}")));
            }
            for (o, x) in out.row_slice_mut(dst).iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::ScatterAdd(a, index), self.rg(&[a])))
    }

    /// Weighted message passing over an edge list.
    ///
    /// `x` is `[n, H*f]`, `w` is `[E, H]`. For every edge `e`, column block
    /// `h` of `x[src[e]]` is scaled by `w[e, h]` and added into row `dst[e]`
    /// of the `[rows, H*f]` output. Equivalent to gathering, scaling per block
    /// and scattering, without materialising the `[E, H*f]` messages.
    pub fn edge_aggregate(&self, x: Var, w: Var, src: Rc<[usize]>, dst: Rc<[usize]>, rows: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (edges, heads) = (wv.rows(), wv.cols());
        if src.len() != edges || dst.len() != edges || heads == 0 || xv.cols() % heads != 0 {
            return Err(AutodiffError::shape(
                "edge_aggregate",
                format!("x {:?}, weights {:?}, {} sources, {} targets", xv.shape(), wv.shape(), src.len(), dst.len()),
            ));
        }
        let f = xv.cols() / heads;
        let mut out = Tensor::zeros(rows, xv.cols());
        for e in 0..edges {
            let (s, d) = (src[e], dst[e]);
            if s >= xv.rows() || d >= rows {
                return Err(AutodiffError::Argument(format!("edge {e} ({s} -> {d}) out of range")));
            }
            let xs = xv.row_slice(s);
            let we = wv.row_slice(e);
            let o = out.row_slice_mut(d);
            for h in 0..heads {
                let a = we[h];
                for c in h * f..(h + 1) * f {
                    o[c] += a * xs[c];
                }
            }
        }
        Ok(self.push(out, Op::EdgeAggregate { x, w, src, dst }, self.rg(&[x, w])))
    }

    pub fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Argument("concat of nothing".into()));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let cols = vals[0].cols();
                if vals.iter().any(|v| v.cols() != cols) {
                    return Err(AutodiffError::shape("concat", "column counts differ"));
                }
                let rows = vals.iter().map(|v| v.rows()).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(rows, cols, data)?
            }
            Axis::Cols => {
                let rows = vals[0].rows();
                if vals.iter().any(|v| v.rows() != rows) {
                    return Err(AutodiffError::shape("concat", "row counts differ"));
                }
                let cols = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row_slice(r));
                    }
                }
                Tensor::new(rows, cols, data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), self.rg(parts)))
    }

    // ---- reverse pass ----

    /// Propagates `d loss / d node` from a scalar `loss` back to every node
    /// that requires a gradient. Repeated uses of a value sum their
    /// contributions. Only leaf gradients are retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes
            .get(loss.0)
            .ok_or_else(|| AutodiffError::Argument("loss is not on this tape".into()))?
            .value;
        if lv.shape() != [1, 1] {
            return Err(AutodiffError::Argument(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, gemm(&g, false, bv, true));
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, gemm(av, true, &g, false));
                    }
                }
                Op::Binary(kind, a, b, bc) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let cols = av.cols();
                    let need_a = nodes[a.0].requires_grad;
                    let need_b = nodes[b.0].requires_grad;
                    let mut ga = if need_a { Some(Tensor::zeros(av.rows(), cols)) } else { None };
                    let mut gb_full = if need_b { Some(Tensor::zeros(av.rows(), cols)) } else { None };
                    for r in 0..av.rows() {
                        for c in 0..cols {
                            let gi = g.get(r, c);
                            let x = av.get(r, c);
                            let w = bv.data()[bidx(*bc, cols, r, c)];
                            let (da, db) = match kind {
                                Binary::Add => (gi, gi),
                                Binary::Sub => (gi, -gi),
                                Binary::Mul => (gi * w, gi * x),
                                Binary::Div => (gi / w, -gi * x / (w * w)),
                            };
                            if let Some(t) = ga.as_mut() {
                                t.set(r, c, da);
                            }
                            if let Some(t) = gb_full.as_mut() {
                                t.set(r, c, db);
                            }
                        }
                    }
                    if let Some(t) = ga {
                        accumulate(&mut grads, *a, t);
                    }
                    if let Some(t) = gb_full {
                        accumulate(&mut grads, *b, reduce_to(*bc, t, bv.rows(), bv.cols()));
                    }
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = g;
                    for (i, gi) in ga.data_mut().iter_mut().enumerate() {
                        let xv = x.data()[i];
                        let yv = y.data()[i];
                        *gi *= match kind {
                            Unary::Exp => yv,
                            Unary::Log => 1.0 / xv,
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Relu => {
                                if xv >= 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xv >= 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                            Unary::Elu(alpha) => {
                                if xv >= 0.0 {
                                    1.0
                                } else {
                                    yv + alpha
                                }
                            }
                            Unary::Square => 2.0 * xv,
                            Unary::Scale(c) => *c,
                            Unary::Shift(_) => 1.0,
                        };
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let dot: f64 = ga.row_slice(r).iter().zip(yr).map(|(p, q)| p * q).sum();
                        for (gi, yi) in ga.row_slice_mut(r).iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, segs, nseg) => {
                    let cols = y.cols();
                    let mut dot = vec![0.0; nseg * cols];
                    for (e, &s) in segs.iter().enumerate() {
                        for c in 0..cols {
                            dot[s * cols + c] += g.get(e, c) * y.get(e, c);
                        }
                    }
                    let mut ga = g;
                    for (e, &s) in segs.iter().enumerate() {
                        for c in 0..cols {
                            let v = y.get(e, c) * (ga.get(e, c) - dot[s * cols + c]);
                            ga.set(e, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = y.get(r, 0);
                        if n == 0.0 {
                            continue;
                        }
                        let s = g.get(r, 0) / n;
                        for (o, xi) in ga.row_slice_mut(r).iter_mut().zip(x.row_slice(r)) {
                            *o = s * xi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let (x, z) = (av.row_slice(r), bv.row_slice(r));
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let s = y.get(r, 0);
                        let gr = g.get(r, 0);
                        for c in 0..x.len() {
                            ga.set(r, c, gr * (z[c] / (nx * nz) - s * x[c] / (nx * nx)));
                            gb.set(r, c, gr * (x[c] / (nx * nz) - s * z[c] / (nz * nz)));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Tensor::clone(x);
                    for r in 0..x.rows() {
                        let l = y.get(r, 0);
                        let gr = g.get(r, 0);
                        for v in ga.row_slice_mut(r) {
                            *v = gr * (*v - l).exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = &nodes[a.0].value;
                    accumulate(&mut grads, *a, Tensor::full(x.rows(), x.cols(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = &nodes[a.0].value;
                    let v = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(x.rows(), x.cols(), v));
                }
                Op::SumRows(a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gr = g.get(r, 0);
                        ga.row_slice_mut(r).fill(gr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, gi) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(i)) {
                            *o += gi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for (i, &dst) in idx.iter().enumerate() {
                        ga.row_slice_mut(i).copy_from_slice(g.row_slice(dst));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::EdgeAggregate { x, w, src, dst } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let heads = wv.cols();
                    let f = xv.cols() / heads;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let mut gw = Tensor::zeros(wv.rows(), heads);
                    for e in 0..wv.rows() {
                        let gd = g.row_slice(dst[e]);
                        let xs = xv.row_slice(src[e]);
                        let we = wv.row_slice(e);
                        let gxs = gx.row_slice_mut(src[e]);
                        for h in 0..heads {
                            let mut dot = 0.0;
                            for c in h * f..(h + 1) * f {
                                gxs[c] += we[h] * gd[c];
                                dot += xs[c] * gd[c];
                            }
                            gw.data_mut()[e * heads + h] = dot;
                        }
                    }
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, gx);
                    }
                    if nodes[w.0].requires_grad {
                        accumulate(&mut grads, *w, gw);
                    }
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[p.0].value;
                        let piece = match axis {
                            Axis::Rows => {
                                let start = offset * g.cols();
                                let end = start + pv.len();
                                offset += pv.rows();
                                Tensor::new(pv.rows(), pv.cols(), g.data()[start..end].to_vec())?
                            }
                            Axis::Cols => {
                                let mut t = Tensor::zeros(pv.rows(), pv.cols());
                                for r in 0..pv.rows() {
                                    t.row_slice_mut(r)
                                        .copy_from_slice(&g.row_slice(r)[offset..offset + pv.cols()]);
                                }
                                offset += pv.cols();
                                t
                            }
                        };
                        accumulate(&mut grads, *p, piece);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let x = &nodes[a.0].value;
                    accumulate(&mut grads, *a, Tensor::new(x.rows(), x.cols(), g.into_data())?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitive operations as they are applied. Parameters are
//! borrowed, never copied, so building a graph per sample is cheap. Calling
//! [`Graph::backward`] on a scalar node returns one gradient array per
//! parameter.
//!
//! Every reduction runs in a fixed sequential order, so the same graph on the
//! same inputs always produces the same bits.
//!
//! Primitive set: matmul, transpose, add (with row broadcast), multiply, scale,
//! softmax, log-softmax, log, relu, gelu, rms-norm, row gather, element gather,
//! column slice/concat, reduce-mean and reduce-sum. Each has a
//! finite-difference test below.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Error, Result};

/// Dense row-major array. Only rank 0, 1 and 2 are used by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("array contains non-finite values".into()));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Array::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix; vectors and scalars are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    RmsNorm(usize),
    GatherRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ReduceMean(usize),
    ReduceSum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::RmsNorm(_) => "rms_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ReduceMean(_) => "reduce_mean",
            Op::ReduceSum(_) => "reduce_sum",
        }
    }
}

struct Node {
    op: Op,
    // `None` for parameters, whose values live in the borrowed slice.
    value: Option<Array>,
    needs_grad: bool,
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Recorded computation over a borrowed set of parameter arrays.
pub struct Graph<'p> {
    params: &'p [Array],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Array]) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match &self.nodes[v.0].op {
            Op::Param(p) => &self.params[*p],
            _ => self.nodes[v.0].value.as_ref().expect("non-param node has a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    fn push(&mut self, op: Op, value: Array, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Ok(Var(id))
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Shape(format!("unknown node {}", v.0)));
        }
        Ok(())
    }

    pub fn constant(&mut self, a: Array) -> Result<Var> {
        self.push(Op::Constant, a, false)
    }

    pub fn param(&mut self, index: usize) -> Result<Var> {
        if index >= self.params.len() {
            return Err(Error::Shape(format!("no parameter {index}")));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            needs_grad: true,
        });
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", av.shape, bv.shape)));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&av.data, &bv.data, &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(
            Op::MatMul(a.0, b.0),
            Array {
                shape: vec![m, n],
                data: out,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", av.shape)));
        }
        let (m, n) = (av.shape[0], av.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data[i * n + j];
            }
        }
        let ng = self.ng(a.0);
        self.push(
            Op::Transpose(a.0),
            Array {
                shape: vec![n, m],
                data: out,
            },
            ng,
        )
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = if av.shape == bv.shape {
            av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect()
        } else if bv.shape.len() == 1 && av.shape.len() == 2 && av.shape[1] == bv.shape[0] {
            let c = bv.shape[0];
            av.data.iter().enumerate().map(|(i, x)| x + bv.data[i % c]).collect()
        } else {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape, bv.shape)));
        };
        let shape = av.shape.clone();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::Add(a.0, b.0), Array { shape, data }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Shape(format!("mul {:?} * {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::Mul(a.0, b.0), Array { shape, data }, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let data = av.data.iter().map(|x| x * c).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::Scale(a.0, c), Array { shape, data }, ng)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::Softmax(a.0), Array { shape, data }, ng)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::LogSoftmax(a.0), Array { shape, data }, ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let data = av.data.iter().map(|x| x.ln()).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::Log(a.0), Array { shape, data }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let data = av.data.iter().map(|x| x.max(0.0)).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::Relu(a.0), Array { shape, data }, ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let data = av
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::Gelu(a.0), Array { shape, data }, ng)
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` with no learned gain.
    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(c) {
            let r = rms(row);
            row.iter_mut().for_each(|x| *x /= r);
        }
        let shape = av.shape.clone();
        let ng = self.ng(a.0);
        self.push(Op::RmsNorm(a.0), Array { shape, data }, ng)
    }

    /// Selects rows of a matrix, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.shape.len() != 2 || rows.is_empty() {
            return Err(Error::Shape(format!("gather_rows on {:?}", av.shape)));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= av.shape[0] {
                return Err(Error::Shape(format!("row {r} out of {}", av.shape[0])));
            }
            data.extend_from_slice(av.row(r));
        }
        let ng = self.ng(a.0);
        self.push(
            Op::GatherRows(a.0, rows.to_vec()),
            Array {
                shape: vec![rows.len(), c],
                data,
            },
            ng,
        )
    }

    /// Selects elements by flat row-major index into a vector.
    pub fn gather(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if flat.is_empty() || flat.iter().any(|&i| i >= av.len()) {
            return Err(Error::Shape(format!("gather index out of {}", av.len())));
        }
        let data = flat.iter().map(|&i| av.data[i]).collect();
        let ng = self.ng(a.0);
        self.push(
            Op::Gather(a.0, flat.to_vec()),
            Array {
                shape: vec![flat.len()],
                data,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.shape.len() != 2 || width == 0 || start + width > av.shape[1] {
            return Err(Error::Shape(format!("slice_cols {start}+{width} of {:?}", av.shape)));
        }
        let m = av.shape[0];
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.ng(a.0);
        self.push(
            Op::SliceCols(a.0, start, width),
            Array {
                shape: vec![m, width],
                data,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape.len() != 2 || v.shape[0] != m {
                return Err(Error::Shape(format!("concat_cols with {:?}", v.shape)));
            }
            widths.push(v.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Array {
                shape: vec![m, total],
                data,
            },
            ng,
        )
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s: f64 = av.data.iter().sum();
        let v = s / av.len() as f64;
        let ng = self.ng(a.0);
        self.push(Op::ReduceMean(a.0), Array::scalar(v), ng)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.ng(a.0);
        self.push(Op::ReduceSum(a.0), Array::scalar(s), ng)
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter,
    /// zero-filled for parameters the loss does not touch.
    pub fn backward(&self, loss: Var) -> Result<Vec<Array>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss node has shape {:?}, expected scalar",
                self.value(loss).shape
            )));
        }
        let mut param_grads: Vec<Array> = self.params.iter().map(|p| Array::zeros(&p.shape)).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    node: id,
                    op: node.op.name(),
                });
            }
            let out = self.value(Var(id));
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    for (d, x) in param_grads[*p].data.iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if self.ng(*a) {
                        // dA = dC * B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let bp = &bv.data[p * n..(p + 1) * n];
                                da[i * k + p] = dot(gi, bp);
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av.data[i * k + p];
                                if aip != 0.0 {
                                    axpy(aip, gi, &mut db[p * n..(p + 1) * n]);
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = (out.shape[0], out.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    let bv = self.value(Var(*b));
                    if self.ng(*b) {
                        if bv.shape == out.shape {
                            accumulate(&mut grads, *b, g.clone());
                        } else {
                            let c = bv.len();
                            let mut db = vec![0.0; c];
                            for row in g.chunks(c) {
                                for (d, x) in db.iter_mut().zip(row) {
                                    *d += x;
                                }
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                    if self.ng(*a) {
                        let da = g.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, c) => {
                    let da = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut da = vec![0.0; g.len()];
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let s = dot(gr, yr);
                        for ((d, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gy - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    let mut da = vec![0.0; g.len()];
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = gy - y.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let av = self.value(Var(*a));
                    let da = g.iter().zip(&av.data).map(|(x, y)| x / y).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let av = self.value(Var(*a));
                    let da = g
                        .iter()
                        .zip(&av.data)
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let av = self.value(Var(*a));
                    let da = g
                        .iter()
                        .zip(&av.data)
                        .map(|(gy, &x)| {
                            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::RmsNorm(a) => {
                    let av = self.value(Var(*a));
                    let c = out.cols();
                    let mut da = vec![0.0; g.len()];
                    for (((dr, gr), yr), xr) in da
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data.chunks(c))
                        .zip(av.data.chunks(c))
                    {
                        let r = rms(xr);
                        let m = dot(gr, yr) / c as f64;
                        for ((d, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (gy - y * m) / r;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let av = self.value(Var(*a));
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (gr, &r) in g.chunks(c).zip(rows) {
                        for (d, x) in da[r * c..(r + 1) * c].iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(a, flat) => {
                    let mut da = vec![0.0; self.value(Var(*a)).len()];
                    for (x, &i) in g.iter().zip(flat) {
                        da[i] += x;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, width) => {
                    let av = self.value(Var(*a));
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (r, gr) in g.chunks(*width).enumerate() {
                        da[r * c + start..r * c + start + width].copy_from_slice(gr);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(Var(p)).cols();
                        if self.ng(p) {
                            let mut dp = Vec::with_capacity(out.rows() * w);
                            for gr in g.chunks(total) {
                                dp.extend_from_slice(&gr[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::ReduceMean(a) => {
                    let n = self.value(Var(*a)).len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::ReduceSum(a) => {
                    let n = self.value(Var(*a)).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let oi = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], oi);
            }
        }
    }
}

fn rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    (ms + RMS_EPS).sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter_mut().for_each(|x| *x -= lse);
}

/// Compares an analytic gradient with central differences on a seeded subset
/// of coordinates and returns the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
///
/// At least 64 coordinates are probed (all of them when the point is smaller).
pub fn finite_difference_check<F, G>(
    loss: F,
    grad: G,
    point: &[f64],
    step: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(step > 0.0) {
        return arg(format!("finite-difference step must be positive, got {step}"));
    }
    if point.is_empty() {
        return arg("empty parameter vector");
    }
    let analytic = grad(point)?;
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient length {} != parameter length {}",
            analytic.len(),
            point.len()
        )));
    }
    let n = n_coords.max(64).min(point.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample_indices(&mut rng, point.len(), n).into_vec();
    coords.sort_unstable();

    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for j in coords {
        let orig = probe[j];
        probe[j] = orig + step;
        let up = loss(&probe)?;
        probe[j] = orig - step;
        let down = loss(&probe)?;
        probe[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[j] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Array::new(shape.to_vec(), data).unwrap()
    }

    fn flatten(arrays: &[Array]) -> Vec<f64> {
        arrays.iter().flat_map(|a| a.data().iter().copied()).collect()
    }

    fn unflatten(template: &[Array], flat: &[f64]) -> Vec<Array> {
        let mut off = 0;
        template
            .iter()
            .map(|a| {
                let v = flat[off..off + a.len()].to_vec();
                off += a.len();
                Array::new(a.shape().to_vec(), v).unwrap()
            })
            .collect()
    }

    /// Runs the FD check on a closure that builds a graph from the params.
    fn fd_check<B>(params: Vec<Array>, build: B) -> f64
    where
        B: Fn(&mut Graph) -> Result<Var>,
    {
        let flat = flatten(&params);
        let loss = |x: &[f64]| {
            let ps = unflatten(&params, x);
            let mut g = Graph::new(&ps);
            let l = build(&mut g)?;
            Ok(g.scalar(l))
        };
        let grad = |x: &[f64]| {
            let ps = unflatten(&params, x);
            let mut g = Graph::new(&ps);
            let l = build(&mut g)?;
            Ok(flatten(&g.backward(l)?))
        };
        finite_difference_check(loss, grad, &flat, 1e-5, 64, 7).unwrap()
    }

    #[test]
    fn square_of_three() {
        let params = vec![Array::scalar(3.0)];
        let mut g = Graph::new(&params);
        let x = g.param(0).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar(y), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let params = vec![Array::vector(vec![1.0, 2.0]).unwrap()];
        let mut g = Graph::new(&params);
        let c = g.constant(Array::scalar(5.0)).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let params = vec![Array::zeros(&[2, 3]), Array::zeros(&[2, 3])];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        let b = g.param(1).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_names_the_node() {
        let params = vec![Array::vector(vec![0.0, 1.0]).unwrap()];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        match g.log(a) {
            Err(Error::Numeric { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected numeric error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let params = vec![Array::vector(vec![1.0, 2.0]).unwrap()];
        let mut g = Graph::new(&params);
        let a = g.param(0).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn step_must_be_positive() {
        let r = finite_difference_check(|_| Ok(0.0), |x| Ok(vec![0.0; x.len()]), &[1.0], 0.0, 64, 0);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn quadratic_and_linear_are_exact() {
        let point: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let quad = finite_difference_check(
            |x| Ok(x.iter().map(|v| 0.5 * v * v).sum()),
            |x| Ok(x.to_vec()),
            &point,
            1e-5,
            64,
            1,
        )
        .unwrap();
        assert!(quad < 1e-6, "quadratic rel err {quad}");
        let lin = finite_difference_check(
            |x| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum()),
            |x| Ok((0..x.len()).map(|i| i as f64 + 1.0).collect()),
            &point,
            1e-5,
            64,
            2,
        )
        .unwrap();
        assert!(lin < 1e-8, "linear rel err {lin}");
    }

    // One finite-difference test per primitive.

    #[test]
    fn fd_matmul_transpose_add_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = vec![
            randn(&mut rng, &[3, 4]),
            randn(&mut rng, &[4, 5]),
            randn(&mut rng, &[5]),
        ];
        let err = fd_check(params, |g| {
            let a = g.param(0)?;
            let b = g.param(1)?;
            let bias = g.param(2)?;
            let c = g.matmul(a, b)?;
            let c = g.add(c, bias)?;
            let t = g.transpose(c)?;
            let sq = g.matmul(c, t)?;
            g.reduce_mean(sq)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_softmax_log_mul_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![randn(&mut rng, &[3, 6]), randn(&mut rng, &[3, 6])];
        let err = fd_check(params, |g| {
            let a = g.param(0)?;
            let w = g.param(1)?;
            let p = g.softmax(a)?;
            let lp = g.log(p)?;
            let m = g.mul(lp, w)?;
            let s = g.scale(m, -0.7)?;
            g.reduce_sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_log_softmax_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = vec![randn(&mut rng, &[4, 7])];
        let err = fd_check(params, |g| {
            let a = g.param(0)?;
            let lp = g.log_softmax(a)?;
            let picked = g.gather(lp, &[3, 7 + 1, 14 + 6, 21])?;
            g.reduce_mean(picked)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_relu_gelu_rmsnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = vec![randn(&mut rng, &[4, 5]), randn(&mut rng, &[4, 5])];
        let err = fd_check(params, |g| {
            let a = g.param(0)?;
            let w = g.param(1)?;
            let n = g.rms_norm(a)?;
            let r = g.gelu(n)?;
            let q = g.relu(a)?;
            let m = g.mul(r, w)?;
            let s = g.add(m, q)?;
            let s2 = g.mul(s, s)?;
            g.reduce_sum(s2)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn fd_gather_rows_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = vec![randn(&mut rng, &[6, 4]), randn(&mut rng, &[4, 4])];
        let err = fd_check(params, |g| {
            let e = g.param(0)?;
            let w = g.param(1)?;
            let x = g.gather_rows(e, &[1, 3, 1, 5])?;
            let h = g.matmul(x, w)?;
            let left = g.slice_cols(h, 0, 2)?;
            let right = g.slice_cols(h, 2, 2)?;
            let sw = g.concat_cols(&[right, left])?;
            let p = g.mul(sw, h)?;
            g.reduce_mean(p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = vec![randn(&mut rng, &[3, 3]), randn(&mut rng, &[3, 3])];
        let build_one = |g: &mut Graph, which: usize| -> Result<Var> {
            let a = g.param(0)?;
            let b = g.param(1)?;
            let x = if which == 0 { g.matmul(a, b)? } else { g.mul(a, b)? };
            let y = g.softmax(x)?;
            g.reduce_sum(y)
        };
        let mut g = Graph::new(&params);
        let l0 = build_one(&mut g, 0).unwrap();
        let g0 = g.backward(l0).unwrap();
        let mut g = Graph::new(&params);
        let l1 = build_one(&mut g, 1).unwrap();
        let g1 = g.backward(l1).unwrap();

        let mut g = Graph::new(&params);
        let a = build_one(&mut g, 0).unwrap();
        let b = build_one(&mut g, 1).unwrap();
        let sa = g.gather(a, &[0]).unwrap();
        let sb = g.gather(b, &[0]).unwrap();
        let sum = g.add(sa, sb).unwrap();
        let total = g.reduce_sum(sum).unwrap();
        let gs = g.backward(total).unwrap();
        for p in 0..2 {
            for ((x, y), z) in g0[p].data().iter().zip(g1[p].data()).zip(gs[p].data()) {
                assert!((x + y - z).abs() <= 1e-14 * (1.0 + z.abs()));
            }
        }
    }
}

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// General matrix product of [m, k] by [k, n]. Degenerate dimensions
    /// cover matrix-vector (n = 1), vector-matrix (m = 1), and outer
    /// products (k = 1).
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Element-wise multiply by a single-element node, broadcast over `a`.
    MulScalar {
        a: NodeId,
        s: NodeId,
    },
    /// `mul * a + add` with constant coefficients.
    Affine {
        a: NodeId,
        mul: T,
    },
    Tanh {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    /// Softmax over a vector with max subtraction for stability.
    Softmax {
        a: NodeId,
    },
    /// Natural log of max(x, floor). The clamp keeps the loss finite when a
    /// probability underflows; clamped entries get zero gradient.
    LogClamped {
        a: NodeId,
        floor: T,
    },
    /// Concatenation of flattened inputs, also used to stack rows.
    Concat {
        parts: Vec<NodeId>,
    },
    /// Contiguous view of `len` elements starting at flat `offset`.
    Slice {
        a: NodeId,
        offset: usize,
        len: usize,
    },
    /// Column-wise mean over the rows of a matrix.
    MeanRows {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    /// Sum of all elements, producing a single-element vector.
    SumAll {
        a: NodeId,
    },
    /// Cosine similarity of a query vector against each row of a matrix.
    CosineRows {
        query: NodeId,
        rows: NodeId,
        slots: usize,
        width: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Named parameter gradients produced by a backward pass. Parameters that do
/// not influence the loss get explicit zero gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }
}

/// Expression tape. Operations evaluate eagerly and record enough structure
/// to replay the chain rule in reverse. Evaluation order is the recording
/// order, so identical graphs produce bit-identical values and gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite node value");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn tensor(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a node. The returned reference lives as long as the graph.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.tensor(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Records a leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vector(&mut self, data: Vec<T>) -> Result<NodeId> {
        Ok(self.constant(Tensor::vector(data)?))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(T::of(v)))
    }

    /// Records a named leaf whose gradient the backward pass reports.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if !ta.is_matrix() || !tb.is_matrix() {
            return Err(Error::invalid(format!(
                "matmul needs matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dims differ: {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let value = Tensor::matrix(m, n, matmul_data(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }))
    }

    /// Matrix [m, k] times vector [k], producing a vector [m].
    pub fn matvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (self.tensor(a), self.tensor(v));
        if !ta.is_matrix() || !tv.is_vector() || ta.cols() != tv.rows() {
            return Err(Error::invalid(format!(
                "matvec of {:?} and {:?}",
                ta.shape(),
                tv.shape()
            )));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let value = Tensor::vector(matmul_data(ta.data(), tv.data(), m, k, 1))?;
        Ok(self.push(value, Op::Matmul { a, b: v, m, k, n: 1 }))
    }

    /// Row vector [k] times matrix [k, n], producing a vector [n].
    pub fn vecmat(&mut self, v: NodeId, a: NodeId) -> Result<NodeId> {
        let (tv, ta) = (self.tensor(v), self.tensor(a));
        if !tv.is_vector() || !ta.is_matrix() || tv.rows() != ta.rows() {
            return Err(Error::invalid(format!(
                "vecmat of {:?} and {:?}",
                tv.shape(),
                ta.shape()
            )));
        }
        let (k, n) = (ta.rows(), ta.cols());
        let value = Tensor::vector(matmul_data(tv.data(), ta.data(), 1, k, n))?;
        Ok(self.push(value, Op::Matmul { a: v, b: a, m: 1, k, n }))
    }

    /// Outer product of vectors [m] and [n], producing a matrix [m, n].
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let (tu, tv) = (self.tensor(u), self.tensor(v));
        if !tu.is_vector() || !tv.is_vector() {
            return Err(Error::invalid(format!(
                "outer product of {:?} and {:?}",
                tu.shape(),
                tv.shape()
            )));
        }
        let (m, n) = (tu.rows(), tv.rows());
        let value = Tensor::matrix(m, n, matmul_data(tu.data(), tv.data(), m, 1, n))?;
        Ok(self.push(value, Op::Matmul { a: u, b: v, m, k: 1, n }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "add of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "mul of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Broadcast multiply of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (ta, ts) = (self.tensor(a), self.tensor(s));
        if ts.numel() != 1 {
            return Err(Error::invalid(format!(
                "mul_scalar needs a single-element scale, got {:?}",
                ts.shape()
            )));
        }
        let sv = ts.data()[0];
        let data = ta.data().iter().map(|&x| x * sv).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::MulScalar { a, s }))
    }

    /// Element-wise `mul * a + add` with f64 constants.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let (mul, add) = (T::of(mul), T::of(add));
        let ta = self.tensor(a);
        let data = ta.data().iter().map(|&x| mul * x + add).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Affine { a, mul }))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Tanh { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        let data = ta.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Sigmoid { a }))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        if !ta.is_vector() {
            return Err(Error::invalid(format!(
                "softmax needs a vector, got {:?}",
                ta.shape()
            )));
        }
        let data = super::softmax(ta.data())?;
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::Softmax { a }))
    }

    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        if !(floor > 0.0) {
            return Err(Error::invalid("log clamp floor must be positive"));
        }
        let floor = T::of(floor);
        let ta = self.tensor(a);
        let data = ta.data().iter().map(|&x| x.max(floor).ln()).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::LogClamped { a, floor }))
    }

    /// Concatenates inputs (flattened) into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.tensor(p).data());
        }
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_rows of zero parts"));
        }
        let cols = self.tensor(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let t = self.tensor(p);
            if !t.is_vector() || t.numel() != cols {
                return Err(Error::invalid(format!(
                    "stack_rows part of shape {:?}, want [{cols}]",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(parts.len(), cols, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Contiguous slice of `len` flat elements starting at `offset`.
    pub fn slice(&mut self, a: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        let ta = self.tensor(a);
        if len == 0 || offset + len > ta.numel() {
            return Err(Error::invalid(format!(
                "slice [{offset}, {}) of {} elements",
                offset + len,
                ta.numel()
            )));
        }
        let value = Tensor::vector(ta.data()[offset..offset + len].to_vec())?;
        Ok(self.push(value, Op::Slice { a, offset, len }))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let ta = self.tensor(a);
        if !ta.is_matrix() || i >= ta.rows() {
            return Err(Error::invalid(format!("row {i} of shape {:?}", ta.shape())));
        }
        let cols = ta.cols();
        self.slice(a, i * cols, cols)
    }

    /// Column-wise mean over rows: [n, d] reduces to [d].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        if !ta.is_matrix() {
            return Err(Error::invalid(format!(
                "mean_rows needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for (d, &x) in data.iter_mut().zip(ta.row(r).iter()) {
                *d += x;
            }
        }
        let denom = T::of(rows as f64);
        for d in &mut data {
            *d = *d / denom;
        }
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::MeanRows { a, rows, cols }))
    }

    /// Sum of all elements as a single-element vector.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        let mut total = T::zero();
        for &x in ta.data() {
            total += x;
        }
        let value = Tensor::scalar(total);
        Ok(self.push(value, Op::SumAll { a }))
    }

    /// Cosine similarity of `query` [w] against each row of `rows` [s, w],
    /// producing [s]. Zero-norm pairs yield zero similarity and pass no
    /// gradient, matching the standalone `cosine_similarity`.
    pub fn cosine_rows(&mut self, query: NodeId, rows: NodeId) -> Result<NodeId> {
        let (tq, tr) = (self.tensor(query), self.tensor(rows));
        if !tq.is_vector() || !tr.is_matrix() || tq.numel() != tr.cols() {
            return Err(Error::invalid(format!(
                "cosine_rows of {:?} against {:?}",
                tq.shape(),
                tr.shape()
            )));
        }
        let (slots, width) = (tr.rows(), tr.cols());
        let mut data = Vec::with_capacity(slots);
        for i in 0..slots {
            data.push(super::cosine_similarity(tq.data(), tr.row(i))?);
        }
        let value = Tensor::vector(data)?;
        Ok(self.push(
            value,
            Op::CosineRows {
                query,
                rows,
                slots,
                width,
            },
        ))
    }

    /// Reverse-mode sweep from a single-element `loss` node. Returns one
    /// gradient tensor per registered parameter, zero-filled when the
    /// parameter does not reach the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.tensor(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..self.nodes.len()).rev() {
            let d = match grads[idx].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Keep the buffer so parameter gradients survive.
                    grads[idx] = Some(d);
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = self.tensor(*a).data();
                    let bv = self.tensor(*b).data();
                    {
                        // dA[i, kk] += sum_j d[i, j] * B[kk, j]
                        let ga = grad_slot(&mut grads, *a, m * k);
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = T::zero();
                                for j in 0..n {
                                    acc += d[i * n + j] * bv[kk * n + j];
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                    }
                    // dB[kk, j] += sum_i A[i, kk] * d[i, j]
                    let gb = grad_slot(&mut grads, *b, k * n);
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc += av[i * k + kk] * d[i * n + j];
                            }
                            gb[kk * n + j] += acc;
                        }
                    }
                }
                Op::Add { a, b } => {
                    {
                        let ga = grad_slot(&mut grads, *a, d.len());
                        for (g, &x) in ga.iter_mut().zip(d.iter()) {
                            *g += x;
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, d.len());
                    for (g, &x) in gb.iter_mut().zip(d.iter()) {
                        *g += x;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.tensor(*a).data();
                    let bv = self.tensor(*b).data();
                    {
                        let ga = grad_slot(&mut grads, *a, d.len());
                        for i in 0..d.len() {
                            ga[i] += d[i] * bv[i];
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, d.len());
                    for i in 0..d.len() {
                        gb[i] += d[i] * av[i];
                    }
                }
                Op::MulScalar { a, s } => {
                    let sv = self.tensor(*s).data()[0];
                    let av = self.tensor(*a).data();
                    {
                        let ga = grad_slot(&mut grads, *a, d.len());
                        for i in 0..d.len() {
                            ga[i] += d[i] * sv;
                        }
                    }
                    let gs = grad_slot(&mut grads, *s, 1);
                    let mut acc = T::zero();
                    for i in 0..d.len() {
                        acc += d[i] * av[i];
                    }
                    gs[0] += acc;
                }
                Op::Affine { a, mul } => {
                    let mul = *mul;
                    let ga = grad_slot(&mut grads, *a, d.len());
                    for (g, &x) in ga.iter_mut().zip(d.iter()) {
                        *g += mul * x;
                    }
                }
                Op::Tanh { a } => {
                    let y = node.value.data();
                    let ga = grad_slot(&mut grads, *a, d.len());
                    for i in 0..d.len() {
                        ga[i] += d[i] * (T::one() - y[i] * y[i]);
                    }
                }
                Op::Sigmoid { a } => {
                    let y = node.value.data();
                    let ga = grad_slot(&mut grads, *a, d.len());
                    for i in 0..d.len() {
                        ga[i] += d[i] * y[i] * (T::one() - y[i]);
                    }
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let mut dot = T::zero();
                    for i in 0..d.len() {
                        dot += d[i] * y[i];
                    }
                    let ga = grad_slot(&mut grads, *a, d.len());
                    for i in 0..d.len() {
                        ga[i] += y[i] * (d[i] - dot);
                    }
                }
                Op::LogClamped { a, floor } => {
                    let floor = *floor;
                    let xv = self.tensor(*a).data();
                    let ga = grad_slot(&mut grads, *a, d.len());
                    for i in 0..d.len() {
                        if xv[i] > floor {
                            ga[i] += d[i] / xv[i];
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.tensor(p).numel();
                        let gp = grad_slot(&mut grads, p, len);
                        for i in 0..len {
                            gp[i] += d[offset + i];
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, offset, len } => {
                    let total = self.tensor(*a).numel();
                    let ga = grad_slot(&mut grads, *a, total);
                    for i in 0..*len {
                        ga[offset + i] += d[i];
                    }
                }
                Op::MeanRows { a, rows, cols } => {
                    let scale = T::one() / T::of(*rows as f64);
                    let ga = grad_slot(&mut grads, *a, rows * cols);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] += d[c] * scale;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let total = self.tensor(*a).numel();
                    let ga = grad_slot(&mut grads, *a, total);
                    for g in ga.iter_mut() {
                        *g += d[0];
                    }
                }
                Op::CosineRows {
                    query,
                    rows,
                    slots,
                    width,
                } => {
                    let (slots, width) = (*slots, *width);
                    let qv = self.tensor(*query).data();
                    let rv = self.tensor(*rows).data();
                    let y = node.value.data();
                    let mut qn = T::zero();
                    for &x in qv {
                        qn += x * x;
                    }
                    let qn = qn.sqrt();
                    // Accumulate locally first: query and row gradients
                    // interleave across slots otherwise.
                    let mut gq = vec![T::zero(); width];
                    let mut gr = vec![T::zero(); slots * width];
                    for i in 0..slots {
                        let m = &rv[i * width..(i + 1) * width];
                        let mut mn = T::zero();
                        for &x in m {
                            mn += x * x;
                        }
                        let mn = mn.sqrt();
                        if qn == T::zero() || mn == T::zero() {
                            continue;
                        }
                        let di = d[i];
                        let ci = y[i];
                        let inv = T::one() / (qn * mn);
                        for j in 0..width {
                            gq[j] += di * (m[j] * inv - ci * qv[j] / (qn * qn));
                            gr[i * width + j] += di * (qv[j] * inv - ci * m[j] / (mn * mn));
                        }
                    }
                    {
                        let slot = grad_slot(&mut grads, *query, width);
                        for i in 0..width {
                            slot[i] += gq[i];
                        }
                    }
                    let slot = grad_slot(&mut grads, *rows, slots * width);
                    for i in 0..slots * width {
                        slot[i] += gr[i];
                    }
                }
            }
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.tensor(*id).shape().to_vec();
            let tensor = match grads[id.0].take() {
                Some(g) => Tensor::from_raw(shape, g),
                None => Tensor::zeros(&shape),
            };
            map.insert(name.clone(), tensor);
        }
        Ok(Gradients { map })
    }
}

/// Returns the gradient accumulation buffer for `id`, allocating zeros on
/// first touch.
fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); len]);
    }
    slot.as_mut().unwrap()
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-major [m, k] times [k, n].
fn matmul_data<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(g: &mut Graph<f64>, name: &str, data: Vec<f64>) -> NodeId {
        let t = Tensor::vector(data).unwrap();
        g.param(name, &t).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut g = Graph::<f64>::new();
        let a = g
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g
            .constant(Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        // Row 0: [1*7+2*9+3*11, 1*8+2*10+3*12] = [58, 64]
        // Row 1: [4*7+5*9+6*11, 4*8+5*10+6*12] = [139, 154]
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn vecmat_is_weighted_row_sum() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::vector(vec![0.25, 0.75]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![4.0, 0.0, 0.0, 8.0]).unwrap());
        let out = g.vecmat(w, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 6.0]);
    }

    #[test]
    fn outer_product_covers_rank_one_case() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::vector(vec![3.0, 4.0, 5.0]).unwrap());
        let m = g.outer(u, v).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 3]);
        assert_eq!(g.value(m).data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn shape_mismatches_are_invalid_arguments() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let v = g.constant(Tensor::vector(vec![0.0; 2]).unwrap());
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, v).is_err());
        assert!(g.mul(a, v).is_err());
        assert!(g.matvec(a, v).is_err());
        assert!(g.cosine_rows(v, a).is_err());
        assert!(g.slice(v, 1, 2).is_err());
        assert!(g.softmax(a).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
        let s = g.sum_all(x).unwrap();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![1.0, -2.0, 3.0]);
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![1.0, 2.0]);
        let _unused = vec_param(&mut g, "unused", vec![5.0]);
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // loss = sum(x) + sum(x .* x); d/dx = 1 + 2x.
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![1.0, -3.0]);
        let s1 = g.sum_all(x).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum_all(sq).unwrap();
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[3.0, -5.0]);
    }

    #[test]
    fn softmax_gradient_matches_closed_form() {
        // loss = softmax(x)[0]. d/dx_j = y_0 * (delta_0j - y_j).
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![0.2, -0.4, 0.9]);
        let y = g.softmax(x).unwrap();
        let yv: Vec<f64> = g.value(y).data().to_vec();
        let l = g.slice(y, 0, 1).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.get("x").unwrap().data();
        for j in 0..3 {
            let expect = yv[0] * (if j == 0 { 1.0 } else { 0.0 } - yv[j]);
            assert!((gx[j] - expect).abs() < 1e-14, "j={j}: {} vs {expect}", gx[j]);
        }
    }

    #[test]
    fn log_clamp_floors_value_and_zeroes_gradient() {
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![0.5, 0.0]);
        let l = g.log_clamped(x, 1e-12).unwrap();
        assert!((g.value(l).data()[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((g.value(l).data()[1] - 1e-12f64.ln()).abs() < 1e-9);
        let s = g.sum_all(l).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.get("x").unwrap().data();
        assert!((gx[0] - 2.0).abs() < 1e-15);
        assert_eq!(gx[1], 0.0);
    }

    #[test]
    fn slice_gradient_scatters_into_place() {
        let mut g = Graph::<f64>::new();
        let x = vec_param(&mut g, "x", vec![1.0, 2.0, 3.0, 4.0]);
        let mid = g.slice(x, 1, 2).unwrap();
        assert_eq!(g.value(mid).data(), &[2.0, 3.0]);
        let s = g.sum_all(mid).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_routes_gradients_back_to_parts() {
        let mut g = Graph::<f64>::new();
        let a = vec_param(&mut g, "a", vec![1.0]);
        let b = vec_param(&mut g, "b", vec![2.0, 3.0]);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = g.constant_vector(vec![10.0, 20.0, 30.0]).unwrap();
        let p = g.mul(c, w).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[10.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[20.0, 30.0]);
    }

    #[test]
    fn cosine_rows_matches_standalone_function() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::vector(vec![1.0, 2.0, 2.0]).unwrap());
        let m = g.constant(
            Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 2.0, 4.0, 4.0]).unwrap(),
        );
        let c = g.cosine_rows(q, m).unwrap();
        let got = g.value(c).data();
        // |q| = 3. Row 0: dot = 1, |m| = 1, cos = 1/3. Row 1: parallel, cos = 1.
        assert!((got[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rows_zero_row_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let q = vec_param(&mut g, "q", vec![1.0, 2.0]);
        let m = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let c = g.cosine_rows(q, m).unwrap();
        assert_eq!(g.value(c).data()[0], 0.0);
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get("q").unwrap().all_finite());
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::scalar(1.0);
        g.param("w", &t).unwrap();
        assert!(g.param("w", &t).is_err());
    }

    #[test]
    fn forward_values_are_bit_identical_across_builds() {
        let build = || {
            let mut g = Graph::<f64>::new();
            let x = g
                .constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.7]).unwrap());
            let m = g.constant(
                Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.13 - 0.5).collect())
                    .unwrap(),
            );
            let h = g.vecmat(x, m).unwrap();
            let t = g.tanh(h).unwrap();
            let sm = g.softmax(t).unwrap();
            g.value(sm).to_le_bytes()
        };
        assert_eq!(build(), build());
    }
}

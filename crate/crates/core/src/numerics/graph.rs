use super::{NumericsError, Tensor};
use crate::geom::{nearest_neighbors, Point3};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
        len: usize,
    },
    Relu(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    MaxAxis {
        src: Var,
        argmax: Vec<usize>,
    },
    Mean(Var),
    Sum(Var),
    Square(Var),
    Sqrt(Var),
    L2Normalize {
        src: Var,
        eps: f64,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    QuatToMat(Var),
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Matmul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Concat(v) | ConcatRows(v) => v.clone(),
            Chamfer { a, b, .. } => vec![*a, *b],
            Scale(a, _)
            | Relu(a)
            | Softmax(a)
            | MaskedSoftmax(a)
            | Mean(a)
            | Sum(a)
            | Square(a)
            | Sqrt(a)
            | Transpose(a)
            | Reshape(a)
            | QuatToMat(a) => vec![*a],
            Slice { src, .. }
            | LayerNorm { src, .. }
            | MaxAxis { src, .. }
            | L2Normalize { src, .. }
            | GatherRows { src, .. } => vec![*src],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-use reverse-mode tape. Nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c = beta·c + a·b` with `a` logically `[m, k]` and `b` logically `[k, n]`;
/// the `*_t` flags say the storage is transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slices cover the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_points(t: &Tensor) -> Vec<Point3> {
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
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

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` when nothing flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.val(a).data(),
            false,
            self.val(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.item();
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().map(|x| f(*x, y)).collect(),
            )
        } else if ta.len() == 1 {
            let x = ta.item();
            Tensor::new(
                tb.shape().to_vec(),
                tb.data().iter().map(|y| f(x, *y)).collect(),
            )
        } else {
            Err(shape_err(name, ta.shape(), tb.shape()))
        }
    }

    /// Elementwise sum; identical shapes or one scalar operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts
            .first()
            .ok_or(NumericsError::Domain("concat of nothing".into()))?;
        let outer = self.val(first).rows();
        let mut lead = self.shape(first).to_vec();
        let mut width = 0;
        for &p in parts {
            let t = self.val(p);
            if t.rows() != outer || t.shape().len() != lead.len() {
                return Err(shape_err("concat", self.shape(first), t.shape()));
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(outer * width);
        for r in 0..outer {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        *lead.last_mut().expect("rank >= 1") = width;
        let t = Tensor::new(lead, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts
            .first()
            .ok_or(NumericsError::Domain("concat_rows of nothing".into()))?;
        let cols = self.val(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.val(src);
        let (outer, last) = t.split_last();
        if start + len > last || len == 0 {
            return Err(shape_err("slice", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(outer * len);
        for r in 0..outer {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Slice { src, start, len }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    fn softmax_rows(t: &Tensor, mask: Option<&[bool]>) -> Vec<f64> {
        let (outer, last) = t.split_last();
        let mut out = vec![0.0; t.len()];
        for r in 0..outer {
            let row = t.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * last + j]);
            let mx = (0..last)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for j in 0..last {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[r * last + j] = e;
                    s += e;
                }
            }
            for v in &mut out[r * last..(r + 1) * last] {
                *v /= s;
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let data = Self::softmax_rows(t, None);
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Softmax over the last dimension restricted to entries where `mask` is
    /// true; masked entries are exactly zero. Fully masked rows are all zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let t = self.val(a);
        if mask.len() != t.len() {
            return Err(shape_err("masked_softmax", t.shape(), &[mask.len()]));
        }
        let data = Self::softmax_rows(t, Some(mask));
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskedSoftmax(a)))
    }

    /// Zero-mean unit-variance normalization over the last dimension (no affine).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.val(a);
        let (outer, last) = t.split_last();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(outer);
        for r in 0..outer {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..last {
                out[r * last + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LayerNorm { src: a, inv_std })
    }

    /// Max over `axis`; the gradient goes to the first maximal index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.val(a);
        let shape = t.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_axis", shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let d = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = d[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        bi = l;
                    }
                }
                out.push(best);
                argmax.push((o * len + bi) * inner + i);
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != axis)
            .map(|(_, s)| *s)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::MaxAxis { src: a, argmax }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row-wise `x / (‖x‖ + eps)` over the last dimension.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.val(a);
        let (outer, last) = t.split_last();
        let mut out = vec![0.0; t.len()];
        for r in 0..outer {
            let row = t.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
            for j in 0..last {
                out[r * last + j] = row[j] / n;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::L2Normalize { src: a, eps })
    }

    /// Rows of a 2-D tensor picked (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.val(a);
        if t.shape().len() != 2 {
            return Err(shape_err("gather_rows", t.shape(), &[idx.len()]));
        }
        let rows = t.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", t.shape(), &[bad]));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                src: a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `[1, C]` (or `[C]`) repeated into `[n, C]`; explicit form of row broadcasting.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, NumericsError> {
        let a = if self.shape(a).len() == 1 {
            let c = self.shape(a)[0];
            self.reshape(a, &[1, c])?
        } else {
            a
        };
        if self.shape(a)[0] != 1 {
            return Err(shape_err("repeat_rows", self.shape(a), &[n]));
        }
        self.gather_rows(a, &vec![0; n])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.val(a);
        if t.shape().len() != 2 {
            return Err(shape_err("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.val(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rotation matrix `[3, 3]` of a quaternion `(w, x, y, z)` given as 4 values.
    /// Assumes unit norm; no renormalization happens here.
    pub fn quat_to_mat(&mut self, q: Var) -> Result<Var, NumericsError> {
        let t = self.val(q);
        if t.len() != 4 {
            return Err(shape_err("quat_to_mat", t.shape(), &[4]));
        }
        let d = t.data();
        let m = crate::geom::quat_to_matrix(&[d[0], d[1], d[2], d[3]]);
        let mut out = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                out.push(m[(r, c)]);
            }
        }
        let t = Tensor::new(vec![3, 3], out)?;
        Ok(self.push(t, Op::QuatToMat(q)))
    }

    /// Chamfer distance between two `[P, 3]` point sets (mean-reduced directed terms).
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols() != 3 || tb.cols() != 3 || ta.is_empty() || tb.is_empty() {
            return Err(shape_err("chamfer", ta.shape(), tb.shape()));
        }
        let (pa, pb) = (as_points(ta), as_points(tb));
        let (nn_ab, d_ab) = nearest_neighbors(&pa, &pb);
        let (nn_ba, d_ba) = nearest_neighbors(&pb, &pa);
        let v =
            d_ab.iter().sum::<f64>() / pa.len() as f64 + d_ba.iter().sum::<f64>() / pb.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Chamfer { a, b, nn_ab, nn_ba }))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        if self.val(loss).len() != 1 {
            return Err(NumericsError::Domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(dg) {
                            *a += d;
                        }
                    }
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_broadcast(&self, target: Var, g: Vec<f64>) -> Vec<f64> {
        if self.val(target).len() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let expand = |v: Var| -> Vec<f64> {
                    if self.val(v).len() == 1 && g.len() != 1 {
                        vec![g.iter().sum()]
                    } else {
                        g.to_vec()
                    }
                };
                if self.needs(*a) {
                    res.push((*a, expand(*a)));
                }
                if self.needs(*b) {
                    res.push((*b, expand(*b).into_iter().map(|x| sign * x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let at = |t: &Tensor, j: usize| if t.len() == 1 { t.item() } else { t.data()[j] };
                if self.needs(*a) {
                    let d: Vec<f64> = (0..g.len()).map(|j| g[j] * at(tb, j)).collect();
                    res.push((*a, self.reduce_broadcast(*a, d)));
                }
                if self.needs(*b) {
                    let d: Vec<f64> = (0..g.len()).map(|j| g[j] * at(ta, j)).collect();
                    res.push((*b, self.reduce_broadcast(*b, d)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Concat(parts) => {
                let (outer, width) = out.split_last();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            d.extend_from_slice(&g[r * width + off..r * width + off + w]);
                        }
                        res.push((p, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.needs(p) {
                        res.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Slice { src, start, len } => {
                let (outer, last) = self.val(*src).split_last();
                let mut d = vec![0.0; outer * last];
                for r in 0..outer {
                    d[r * last + start..r * last + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                res.push((*src, d));
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                res.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Square(a) => {
                let x = self.val(*a).data();
                res.push((*a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect()));
            }
            Op::Sqrt(a) => {
                res.push((
                    *a,
                    g.iter()
                        .zip(out.data())
                        .map(|(g, y)| g / (2.0 * y))
                        .collect(),
                ));
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let (outer, last) = out.split_last();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..outer {
                    let s = r * last;
                    let dot: f64 = (0..last).map(|j| g[s + j] * y[s + j]).sum();
                    for j in 0..last {
                        d[s + j] = y[s + j] * (g[s + j] - dot);
                    }
                }
                res.push((*a, d));
            }
            Op::LayerNorm { src, inv_std } => {
                let (outer, last) = out.split_last();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                let n = last as f64;
                for r in 0..outer {
                    let s = r * last;
                    let mg = (0..last).map(|j| g[s + j]).sum::<f64>() / n;
                    let mgy = (0..last).map(|j| g[s + j] * y[s + j]).sum::<f64>() / n;
                    for j in 0..last {
                        d[s + j] = inv_std[r] * (g[s + j] - mg - y[s + j] * mgy);
                    }
                }
                res.push((*src, d));
            }
            Op::MaxAxis { src, argmax } => {
                let mut d = vec![0.0; self.val(*src).len()];
                for (gi, &ai) in g.iter().zip(argmax) {
                    d[ai] += gi;
                }
                res.push((*src, d));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                res.push((*a, vec![g[0]; n]));
            }
            Op::L2Normalize { src, eps } => {
                let x = self.val(*src);
                let (outer, last) = x.split_last();
                let mut d = vec![0.0; x.len()];
                for r in 0..outer {
                    let row = x.row(r);
                    let s = r * last;
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let den = norm + eps;
                    let xg: f64 = (0..last).map(|j| row[j] * g[s + j]).sum();
                    for j in 0..last {
                        d[s + j] = g[s + j] / den;
                        if norm > 0.0 {
                            d[s + j] -= row[j] * xg / (den * den * norm);
                        }
                    }
                }
                res.push((*src, d));
            }
            Op::GatherRows { src, idx } => {
                let t = self.val(*src);
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g[k * cols + c];
                    }
                }
                res.push((*src, d));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                res.push((*a, d));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::QuatToMat(q) => {
                let v = self.val(*q).data();
                let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
                // d R[r][c] / d (w, x, y, z), row-major over the 3x3 entries
                let jac: [[f64; 4]; 9] = [
                    [0.0, 0.0, -4.0 * y, -4.0 * z],
                    [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
                    [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
                    [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
                    [0.0, -4.0 * x, 0.0, -4.0 * z],
                    [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
                    [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
                    [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
                    [0.0, -4.0 * x, -4.0 * y, 0.0],
                ];
                let mut d = vec![0.0; 4];
                for (e, row) in jac.iter().enumerate() {
                    for k in 0..4 {
                        d[k] += g[e] * row[k];
                    }
                }
                res.push((*q, d));
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                let (na, nb) = (ta.len() / 3, tb.len() / 3);
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                let ca = 2.0 * g[0] / na as f64;
                for (i, &j) in nn_ab.iter().enumerate() {
                    for k in 0..3 {
                        let diff = ta[i * 3 + k] - tb[j * 3 + k];
                        da[i * 3 + k] += ca * diff;
                        db[j * 3 + k] -= ca * diff;
                    }
                }
                let cb = 2.0 * g[0] / nb as f64;
                for (j, &i) in nn_ba.iter().enumerate() {
                    for k in 0..3 {
                        let diff = tb[j * 3 + k] - ta[i * 3 + k];
                        db[j * 3 + k] += cb * diff;
                        da[i * 3 + k] -= cb * diff;
                    }
                }
                if self.needs(*a) {
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    res.push((*b, db));
                }
            }
        }
        res
    }
}

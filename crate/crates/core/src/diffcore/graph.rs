use super::tensor::{matmul_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    MulBroadcast(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Vec<T>),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather { table: NodeId, ids: Vec<usize> },
    Reshape(NodeId),
    Permute { a: NodeId, map: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    L2Normalize { a: NodeId, eps: T, norms: Vec<T> },
    WeightedLse { a: NodeId, w: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::MaskedSoftmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::WeightedLse { .. } => "weighted_lse",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications in topological order so that a single
/// reverse sweep yields every gradient.
///
/// Nodes are append-only; an operation can only reference nodes that already
/// exist, which makes the recording order a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// For each position of the permuted output, the flat index it reads from.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(self.shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.shape_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let m = self.value(a).rows();
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, trans_b);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, ng))
    }

    /// Batched `a[bt, m, k] · b[bt, k, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[bt, m, k] · b[bt, n, k]ᵀ`.
    pub fn bmm_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.shape_err("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(self.shape_err("bmm", format!("inner dims differ: {:?} x {:?}", sa, sb)));
        }
        let mut out = vec![T::zero(); bt * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..bt {
                matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    trans_b,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![bt, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    fn unary(&mut self, a: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn check_suffix(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || sb.iter().product::<usize>() == 0
        {
            return Err(self.shape_err(op, format!("{:?} does not broadcast onto {:?}", sb, sa)));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, position table).
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_suffix("add_broadcast", a, b)?;
        let bv = self.value(b).data();
        let p = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bv[i % p])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBroadcast(a, b), ng))
    }

    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_suffix("mul_broadcast", a, b)?;
        let bv = self.value(b).data();
        let p = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * bv[i % p])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Elementwise product with a constant of equal length (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<T>) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(self.shape_err(
                "mul_const",
                format!("{} factors for {} values", c.len(), self.value(a).len()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&c)
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulConst(a, c), ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x <= T::zero()) {
            return Err(Error::invalid(format!(
                "log of non-positive value {} at node {}",
                bad,
                self.nodes.len()
            )));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mask = vec![true; self.value(a).len()];
        self.masked_softmax(a, &mask)
    }

    /// Softmax over the last axis restricted to entries whose mask is true.
    /// Masked entries get probability exactly zero and pass no gradient; a
    /// fully masked row yields zeros.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let x = self.value(a);
        if mask.len() != x.len() || x.rank() == 0 {
            return Err(self.shape_err(
                "softmax",
                format!("mask of {} for shape {:?}", mask.len(), x.shape()),
            ));
        }
        let d = x.last_dim();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let mrow = &mask[r * d..(r + 1) * d];
            let mut mx = T::neg_infinity();
            for (v, m) in row.iter().zip(mrow) {
                if *m && *v > mx {
                    mx = *v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let orow = &mut out[r * d..(r + 1) * d];
            let mut s = T::zero();
            for ((o, v), m) in orow.iter_mut().zip(row).zip(mrow) {
                if *m {
                    *o = (*v - mx).exp();
                    s = s + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / s;
            }
        }
        let shape = x.shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax(a), ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(self.shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {}",
                    self.shape(gain),
                    self.shape(bias),
                    d
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, v| s + *v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean))
                / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows of `table` (viewed as `[rows, last_dim]`): embedding lookup.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.last_dim());
        if let Some(bad) = ids.iter().find(|i| **i >= rows) {
            return Err(self.shape_err("gather", format!("row {} of {}", bad, rows)));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(self.shape_err("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(self.shape_err("permute", format!("perm {:?} for {:?}", perm, shape)));
        }
        let map = permute_map(&shape, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { a, map }, ng))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            return Err(self.shape_err("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", format!("axis {} for {:?}", axis, base)));
        }
        for &i in inputs {
            let s = self.shape(i);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (x, y))| ax == axis || x == y);
            if !ok {
                return Err(self.shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = inputs.iter().map(|&i| self.shape(i)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &i in inputs {
                let chunk = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.value(i).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let ng = self.ng(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().fold(T::zero(), |s, v| s + *v);
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(self.shape_err("mean", "empty tensor".into()));
        }
        let s = self.value(a).data().iter().fold(T::zero(), |s, v| s + *v);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(a), ng))
    }

    /// Rows over the last axis divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: NodeId, eps: T) -> NodeId {
        let v = self.value(a);
        let d = v.last_dim();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let n = row.iter().fold(T::zero(), |s, x| s + *x * *x).sqrt();
            norms.push(n);
            let s = if n >= eps { n } else { eps };
            out.extend(row.iter().map(|x| *x / s));
        }
        debug_assert_eq!(out.len(), norms.len() * d);
        let shape = v.shape().to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { a, eps, norms }, ng)
    }

    /// Row-wise `log Σ_c w[r,c] · exp(a[r,c])` for a constant non-negative
    /// weight matrix. Zero-weight entries are excluded outright, so they add
    /// nothing to the value and receive exactly zero gradient.
    pub fn weighted_lse(&mut self, a: NodeId, w: Vec<T>) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 || w.len() != x.len() {
            return Err(self.shape_err(
                "weighted_lse",
                format!("weights of {} for shape {:?}", w.len(), x.shape()),
            ));
        }
        if let Some(bad) = w.iter().find(|v| **v < T::zero() || !v.is_finite()) {
            return Err(Error::invalid(format!("weighted_lse weight {}", bad)));
        }
        let c = x.last_dim();
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let wr = &w[r * c..(r + 1) * c];
            let mut mx = T::neg_infinity();
            for (v, wv) in row.iter().zip(wr) {
                if *wv > T::zero() && *v > mx {
                    mx = *v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::invalid(format!(
                    "weighted_lse row {} has no positive weight",
                    r
                )));
            }
            let mut s = T::zero();
            for (v, wv) in row.iter().zip(wr) {
                if *wv > T::zero() {
                    s = s + *wv * (*v - mx).exp();
                }
            }
            out.push(mx + s.ln());
        }
        let rows = x.rows();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::WeightedLse { a, w }, ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalar(root.0, rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.last_dim();
                let m = av.rows();
                let n = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ (or dC · B when B is stored transposed)
                    matmul_into(g, bv.data(), ga, m, n, k, !*trans_b);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        matmul_tn_into(g, av.data(), gb, m, n, k);
                    } else {
                        matmul_tn_into(av.data(), g, gb, m, k, n);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for t in 0..bt {
                        matmul_into(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            !*trans_b,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for t in 0..bt {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let asl = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            matmul_tn_into(gs, asl, out, m, n, k);
                        } else {
                            matmul_tn_into(asl, gs, out, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(ga) = self.acc(grads, *id) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x = *x - *y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] = gb[j] + g[j] * av[j];
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let p = gb.len();
                    for (j, v) in g.iter().enumerate() {
                        gb[j % p] = gb[j % p] + *v;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let p = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * bv[j % p];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        gb[j % p] = gb[j % p] + g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y * *c);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * c[j];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if av[j] > T::zero() {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * gelu_grad(av[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * out[j];
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] / av[j];
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                let d = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..node.value.rows() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = y.iter().zip(gr).fold(T::zero(), |s, (p, q)| s + *p * *q);
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[r * d + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let v = inv / dn * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for j in 0..g.len() {
                        gg[j % d] = gg[j % d] + g[j] * xhat[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for j in 0..g.len() {
                        gb[j % d] = gb[j % d] + g[j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y);
                }
            }
            Op::Permute { a, map } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] = ga[src] + g[o];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let chunk = self.shape(id)[*axis] * inner;
                    if let Some(gi) = self.acc(grads, id) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            let dst = &mut gi[o * chunk..(o + 1) * chunk];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x = *x + *y);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0] / n);
                }
            }
            Op::L2Normalize { a, eps, norms } => {
                let d = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &n) in norms.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        if n >= *eps {
                            let dot = y.iter().zip(gr).fold(T::zero(), |s, (p, q)| s + *p * *q);
                            for j in 0..d {
                                ga[r * d + j] = ga[r * d + j] + (gr[j] - y[j] * dot) / n;
                            }
                        } else {
                            for j in 0..d {
                                ga[r * d + j] = ga[r * d + j] + gr[j] / *eps;
                            }
                        }
                    }
                }
            }
            Op::WeightedLse { a, w } => {
                let x = self.value(*a);
                let c = x.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        for j in 0..c {
                            let wv = w[r * c + j];
                            if wv > T::zero() {
                                let p = wv * (row[j] - out[r]).exp();
                                ga[r * c + j] = ga[r * c + j] + g[r] * p;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Name of the primitive that produced a node.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `id`; `None` for constants or
    /// nodes the root does not depend on.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but zero-filled for nodes without a gradient.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

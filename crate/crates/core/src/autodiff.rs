//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already a topological order and `backward` walks it in reverse. Values are
//! held by the graph; user code manipulates copyable [`Var`] handles.
//!
//! Broadcasting is limited to one operand holding a single element. Every
//! other shape disagreement is an error.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: Conv2dSpec,
    },
    AddRowBias(usize, usize),
    Relu(usize),
    ClampMin(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        input: usize,
        axis: usize,
    },
    GlobalAvgPool(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients of every `requires_grad` leaf, keyed by leaf label.
///
/// Unlabelled leaves are keyed `leaf#<index>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        self.leaf_grads.push(None);
        Var {
            graph: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached {
                node: format!("graph {} node #{}", v.graph, v.index),
            });
        }
        Ok(v.index)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Leaf node. Gradients accumulate into it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value, true);
        self.nodes[v.index].label = Some(name.into());
        v
    }

    /// Copy of `v`'s value as a fresh constant: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("foreign Var");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.index)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_shape(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>> {
        let (sa, sb) = (self.node(a).value.shape(), self.node(b).value.shape());
        if sa == sb || self.node(b).value.numel() == 1 {
            Ok(sa.to_vec())
        } else if self.node(a).value.numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let shape = self.binary_shape(name, ia, ib)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.node(ia).value.data(), self.node(ib).value.data());
        let data: Vec<f64> = (0..n)
            .map(|k| f(da[if da.len() == 1 { 0 } else { k }], db[if db.len() == 1 { 0 } else { k }]))
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, data)?, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.node(i).value.map(f);
        let rg = self.rg(i);
        Ok(self.push(value, op(i), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.node(i).value.map(|v| v * c);
        let rg = self.rg(i);
        Ok(self.push(value, Op::MulScalar(i, c), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    /// `max(x, c)` elementwise; the subgradient at `x == c` is 0.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.node(i).value.map(|v| if v > c { v } else { c });
        let rg = self.rg(i);
        Ok(self.push(value, Op::ClampMin(i, c), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    /// Natural log. Rejects non-positive inputs; add a smoothing epsilon upstream.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        if let Some((index, &value)) = self
            .node(i)
            .value
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(Error::NonPositiveLog { index, value });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        if let Some(&v) = self.node(i).value.data().iter().find(|v| **v < 0.0) {
            return Err(Error::NonFinite(format!("sqrt of negative value {v}")));
        }
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.node(i).value.data().iter().sum();
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(s), Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.node(i).value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(s), Op::Mean(i), rg))
    }

    /// Sum over one axis; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.node(i).value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.node(i).value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(i);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::SumAxis { input: i, axis },
            rg,
        ))
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.node(i).value;
        let (b, c, h, w) = t.dims4().ok_or_else(|| Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "global_avg_pool expects (B, C, H, W)".into(),
        })?;
        let hw = h * w;
        let out: Vec<f64> = t
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(i);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(i), rg))
    }

    // ---- structure --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let base = self.node(*first).value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in &idx {
            let s = self.node(p).value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in &idx {
                let t = &self.node(p).value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = idx.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: idx, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.node(i).value.reshape(shape)?;
        let rg = self.rg(i);
        Ok(self.push(value, Op::Reshape(i), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (m, k) = ta.dims2().ok_or_else(mismatch)?;
        let (k2, n) = tb.dims2().ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(ia, ib), rg))
    }

    /// `(B, N) + (N)` row-wise bias.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.node(ix).value, &self.node(ib).value);
        let (rows, cols) = match tx.dims2() {
            Some((r, c)) if tb.shape() == [c] => (r, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_row_bias",
                    left: tx.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::AddRowBias(ix, ib), rg))
    }

    /// 2-D cross-correlation over `(B, Cin, H, W)` with weights `(Cout, Cin, KH, KW)`
    /// and optional per-output-channel bias. Padding is zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let ii = self.check(input)?;
        let iw = self.check(weight)?;
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (tx, tw) = (&self.node(ii).value, &self.node(iw).value);
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: tx.shape().to_vec(),
            right: tw.shape().to_vec(),
        };
        let (_, cin, h, w) = tx.dims4().ok_or_else(mismatch)?;
        let (cout, cin2, kh, kw) = tw.dims4().ok_or_else(mismatch)?;
        if cin != cin2 || spec.stride == 0 || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw
        {
            return Err(mismatch());
        }
        if let Some(ib) = ib {
            let bs = self.node(ib).value.shape();
            if bs != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![cout],
                    right: bs.to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(tx.shape(), tw.shape(), spec);
        let out = conv2d_forward(
            tx.data(),
            tw.data(),
            ib.map(|b| self.node(b).value.data()),
            &geom,
        );
        let rg = self.rg(ii) || self.rg(iw) || ib.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![geom.b, geom.cout, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                spec,
            },
            rg,
        ))
    }

    // ---- row-wise softmax -------------------------------------------------

    fn rows_of(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.node(i).value;
        t.dims2().ok_or_else(|| Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a (rows, cols) tensor"),
        })
    }

    /// Softmax along the last axis of a `(rows, cols)` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let (rows, cols) = self.rows_of(i, "softmax_rows")?;
        let src = self.node(i).value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(&src[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::SoftmaxRows(i), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let (rows, cols) = self.rows_of(i, "log_softmax_rows")?;
        let src = self.node(i).value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::LogSoftmaxRows(i), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`]. The
    /// returned map holds the accumulated gradient of every `requires_grad`
    /// leaf (zeros for leaves the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        let root = self.check(loss)?;
        let lv = &self.node(root).value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.rg(i) {
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(self.gradient_map())
    }

    fn gradient_map(&self) -> GradientMap {
        let mut map = GradientMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let key = node.label.clone().unwrap_or_else(|| format!("leaf#{i}"));
                let g = self.leaf_grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                map.insert(key, g);
            }
        }
        map
    }

    fn backprop_node(&mut self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let mut send = |j: usize, t: Tensor| {
            if nodes[j].requires_grad {
                accumulate(&mut grads[j], t);
            }
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => accumulate(&mut self.leaf_grads[i], g),
            Op::Add(a, b) => {
                send(*a, reduce_to(&g, val(*a)));
                send(*b, reduce_to(&g, val(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(&g, val(*a)));
                send(*b, reduce_to(&g.map(|v| -v), val(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g_zip(&g, vb, |gv, bv| gv * bv);
                let gb = g_zip(&g, va, |gv, av| gv * av);
                send(*a, reduce_to(&ga, va));
                send(*b, reduce_to(&gb, vb));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g_zip(&g, vb, |gv, bv| gv / bv);
                // d(a/b)/db = -a / b^2 = -out / b
                let out = &nodes[i].value;
                let mut gb = g_zip(&g, vb, |gv, bv| -gv / bv);
                for (x, o) in gb.data_mut().iter_mut().zip(out.data()) {
                    *x *= o;
                }
                send(*a, reduce_to(&ga, va));
                send(*b, reduce_to(&gb, vb));
            }
            Op::AddScalar(a) => send(*a, g),
            Op::MulScalar(a, c) => send(*a, g.map(|v| v * c)),
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = va.dims2().unwrap();
                let n = vb.dims2().unwrap().1;
                if nodes[*a].requires_grad {
                    let ga = matmul_nt(gd, vb.data(), m, n, k);
                    send(*a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if nodes[*b].requires_grad {
                    let gb = matmul_tn(va.data(), gd, m, k, n);
                    send(*b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (vx, vw) = (val(*input), val(*weight));
                let geom = ConvGeom::new(vx.shape(), vw.shape(), *spec);
                if nodes[*input].requires_grad {
                    let gx = conv2d_grad_input(gd, vw.data(), &geom);
                    send(*input, Tensor::new(vx.shape().to_vec(), gx).unwrap());
                }
                if nodes[*weight].requires_grad {
                    let gw = conv2d_grad_weight(gd, vx.data(), &geom);
                    send(*weight, Tensor::new(vw.shape().to_vec(), gw).unwrap());
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; geom.cout];
                    let plane = geom.ho * geom.wo;
                    for (k, chunk) in gd.chunks_exact(plane).enumerate() {
                        gb[k % geom.cout] += chunk.iter().sum::<f64>();
                    }
                    send(*b, Tensor::new(vec![geom.cout], gb).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                let cols = val(*b).numel();
                let mut gb = vec![0.0; cols];
                for row in gd.chunks_exact(cols) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(*b, Tensor::new(vec![cols], gb).unwrap());
                send(*x, g);
            }
            Op::Relu(a) => send(*a, g_zip(&g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::ClampMin(a, c) => {
                let c = *c;
                send(*a, g_zip(&g, val(*a), |gv, x| if x > c { gv } else { 0.0 }))
            }
            Op::Exp(a) => send(*a, g_zip(&g, &nodes[i].value, |gv, y| gv * y)),
            Op::Log(a) => send(*a, g_zip(&g, val(*a), |gv, x| gv / x)),
            Op::Sqrt(a) => send(*a, g_zip(&g, &nodes[i].value, |gv, y| gv * 0.5 / y)),
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                send(*a, Tensor::full(val(*a).shape(), gd[0] / n))
            }
            Op::SumAxis { input, axis } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        out[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                send(*input, Tensor::new(shape.to_vec(), out).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape();
                let hw = shape[2] * shape[3];
                let mut out = Vec::with_capacity(val(*a).numel());
                for &gv in gd {
                    out.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                send(*a, Tensor::new(shape.to_vec(), out).unwrap());
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    let mut out = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        out.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    send(p, Tensor::new(ps.to_vec(), out).unwrap());
                }
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape()).unwrap()),
            Op::SoftmaxRows(a) => {
                let y = &nodes[i].value;
                let (rows, cols) = y.dims2().unwrap();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y.data()[s.clone()], &gd[s.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out[s].iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, Tensor::new(vec![rows, cols], out).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let y = &nodes[i].value;
                let (rows, cols) = y.dims2().unwrap();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y.data()[s.clone()], &gd[s.clone()]);
                    let gsum: f64 = gr.iter().sum();
                    for ((o, yv), gv) in out[s].iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                send(*a, Tensor::new(vec![rows, cols], out).unwrap());
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// `f(g, other)` elementwise where `other` may be a broadcast scalar.
fn g_zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let od = other.data();
    let data = g
        .data()
        .iter()
        .enumerate()
        .map(|(k, &gv)| f(gv, od[if od.len() == 1 { 0 } else { k }]))
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

/// Undo scalar broadcasting: sum the upstream gradient when `target` is a single element.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if target.numel() == 1 && g.numel() != 1 {
        Tensor::new(target.shape().to_vec(), vec![g.data().iter().sum()]).unwrap()
    } else if g.shape() != target.shape() {
        g.reshape(target.shape()).unwrap()
    } else {
        g.clone()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

// ---- dense kernels ---------------------------------------------------------

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m x n) * b^T` where `b` is `(k x n)`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` where `a` is `(m x k)` and `g` is `(m x n)`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, kh, kw) = (w[0], w[2], w[3]);
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        Self {
            b,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        }
    }

    /// Output index range `lo..hi` whose input coordinate `o*stride + k - pad` lies in `0..len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // o*s + k >= pad  =>  o >= ceil((pad - k) / s)
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // o*s + k - pad <= len - 1  =>  o <= (len - 1 + pad - k) / s
        let hi = if len + self.pad > k {
            ((len - 1 + self.pad - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Input patches laid out as a `(cin*kh*kw, b*ho*wo)` row-major matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.b * g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * n];
    for ic in 0..g.cin {
        for ky in 0..g.kh {
            let (i0, i1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (j0, j1) = g.valid(kx, g.w, g.wo);
                let row = &mut cols[((ic * g.kh + ky) * g.kw + kx) * n..][..n];
                for bi in 0..g.b {
                    let xin = &x[(bi * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                    for i in i0..i1 {
                        let yy = i * g.stride + ky - g.pad;
                        let dst = &mut row[(bi * g.ho + i) * g.wo..][..g.wo];
                        for j in j0..j1 {
                            dst[j] = xin[yy * g.w + j * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch matrix back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.b * g.ho * g.wo;
    let mut x = vec![0.0; g.b * g.cin * g.h * g.w];
    for ic in 0..g.cin {
        for ky in 0..g.kh {
            let (i0, i1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (j0, j1) = g.valid(kx, g.w, g.wo);
                let row = &cols[((ic * g.kh + ky) * g.kw + kx) * n..][..n];
                for bi in 0..g.b {
                    let xin = &mut x[(bi * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                    for i in i0..i1 {
                        let yy = i * g.stride + ky - g.pad;
                        let src = &row[(bi * g.ho + i) * g.wo..][..g.wo];
                        for j in j0..j1 {
                            xin[yy * g.w + j * g.stride + kx - g.pad] += src[j];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(b, cout, ho*wo)` to `(cout, b*ho*wo)`.
fn batch_to_channel_major(v: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; v.len()];
    for bi in 0..g.b {
        for oc in 0..g.cout {
            out[(oc * g.b + bi) * plane..][..plane].copy_from_slice(&v[(bi * g.cout + oc) * plane..][..plane]);
        }
    }
    out
}

fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let n = g.b * plane;
    let k = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.b * g.cout * plane];
    let mut acc = vec![0.0; n];
    for oc in 0..g.cout {
        acc.fill(0.0);
        for (kk, &wv) in wt[oc * k..(oc + 1) * k].iter().enumerate() {
            for (a, c) in acc.iter_mut().zip(&cols[kk * n..(kk + 1) * n]) {
                *a += wv * c;
            }
        }
        let b0 = bias.map_or(0.0, |b| b[oc]);
        for bi in 0..g.b {
            let dst = &mut out[(bi * g.cout + oc) * plane..][..plane];
            for (d, a) in dst.iter_mut().zip(&acc[bi * plane..(bi + 1) * plane]) {
                *d = b0 + a;
            }
        }
    }
    out
}

fn conv2d_grad_input(gout: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.b * g.ho * g.wo;
    let k = g.cin * g.kh * g.kw;
    let gt = batch_to_channel_major(gout, g);
    let mut gcols = vec![0.0; k * n];
    for oc in 0..g.cout {
        let grow = &gt[oc * n..(oc + 1) * n];
        for (kk, &wv) in wt[oc * k..(oc + 1) * k].iter().enumerate() {
            for (c, gv) in gcols[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                *c += wv * gv;
            }
        }
    }
    col2im(&gcols, g)
}

fn conv2d_grad_weight(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.b * g.ho * g.wo;
    let k = g.cin * g.kh * g.kw;
    let gt = batch_to_channel_major(gout, g);
    let cols = im2col(x, g);
    let mut gw = vec![0.0; g.cout * k];
    for oc in 0..g.cout {
        let grow = &gt[oc * n..(oc + 1) * n];
        for kk in 0..k {
            gw[oc * k + kk] = grow.iter().zip(&cols[kk * n..(kk + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    gw
}

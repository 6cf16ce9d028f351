//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and enough context to
//! push gradients to its parents. A tape belongs to one forward/backward pass
//! and is not shared across threads; the values it produces are plain
//! [`Tensor`]s and can go anywhere.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{
    axis_extents, broadcast_binary, gemm, inverse_perm, permute, sum_to_shape, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Snap(usize),
    Sqrt(usize),
    Exp(usize),
    Abs(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Sum {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    Softmax {
        a: usize,
        axis: usize,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    CausalConv {
        x: usize,
        w: usize,
        b: Option<usize>,
        dilation: usize,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: usize,
    },
    Dropout {
        a: usize,
        mask: Rc<Vec<f64>>,
    },
    Gather {
        a: usize,
        rows: Rc<Vec<usize>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Snap(a) | Sqrt(a) | Exp(a) | Abs(a) | Gelu(a) | Sigmoid(a)
            | Tanh(a) | SumAll(a) | Reshape(a) => vec![*a],
            Matmul { a, b, .. } => vec![*a, *b],
            Sum { a, .. } | Softmax { a, .. } | Permute { a, .. } | Slice { a, .. } => vec![*a],
            Dropout { a, .. } | Gather { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
            CausalConv { x, w, b, .. } | ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Depthwise { x, w, b } => vec![*x, *w, *b],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Number of recorded ops that read `v`.
    pub fn consumers(&self, v: Var<'_>) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.op.inputs().contains(&v.id))
            .count()
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var<'_>) -> Result<Grads> {
        let seed = self.value_of(out.id);
        if seed.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                seed.shape()
            )));
        }
        self.backward_with(out, Tensor::ones(seed.shape()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var<'_>, seed: Tensor) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[out.id].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: seed.shape().to_vec(),
                rhs: nodes[out.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.id + 1];
        grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, sum_to_shape(g, val(nodes, a).shape()));
            accumulate(grads, nodes, b, sum_to_shape(g, val(nodes, b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, sum_to_shape(g, val(nodes, a).shape()));
            let gb = sum_to_shape(g, val(nodes, b).shape()).map(|v| -v);
            accumulate(grads, nodes, b, gb);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(nodes, a), val(nodes, b));
            if nodes[a].requires_grad {
                let ga = broadcast_binary(g, vb, "mul", |x, y| x * y).expect("broadcast");
                accumulate(grads, nodes, a, sum_to_shape(&ga, va.shape()));
            }
            if nodes[b].requires_grad {
                let gb = broadcast_binary(g, va, "mul", |x, y| x * y).expect("broadcast");
                accumulate(grads, nodes, b, sum_to_shape(&gb, vb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(nodes, a), val(nodes, b));
            if nodes[a].requires_grad {
                let ga = broadcast_binary(g, vb, "div", |x, y| x / y).expect("broadcast");
                accumulate(grads, nodes, a, sum_to_shape(&ga, va.shape()));
            }
            if nodes[b].requires_grad {
                // d(a/b)/db = -out/b
                let q = broadcast_binary(out, vb, "div", |o, y| -o / y).expect("broadcast");
                let gb = zip_map(g, &q, |x, y| x * y);
                accumulate(grads, nodes, b, sum_to_shape(&gb, vb.shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, a, g.map(|v| -v)),
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(grads, nodes, a, g.clone()),
        Op::Snap(a) => accumulate(grads, nodes, a, g.clone()),
        Op::Sqrt(a) => accumulate(grads, nodes, a, zip_map(g, out, |x, y| x * 0.5 / y)),
        Op::Exp(a) => accumulate(grads, nodes, a, zip_map(g, out, |x, y| x * y)),
        Op::Abs(a) => {
            let ga = zip_map(g, val(nodes, a), |x, y| {
                if y > 0.0 {
                    x
                } else if y < 0.0 {
                    -x
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, a, ga);
        }
        Op::Gelu(a) => {
            accumulate(grads, nodes, a, zip_map(g, val(nodes, a), |x, y| x * gelu_grad(y)));
        }
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, a, zip_map(g, out, |x, s| x * s * (1.0 - s)));
        }
        Op::Tanh(a) => {
            accumulate(grads, nodes, a, zip_map(g, out, |x, t| x * (1.0 - t * t)));
        }
        Op::Matmul { a, b, trans_b } => {
            let (va, vb) = (val(nodes, a), val(nodes, b));
            let (ga, gb) = matmul_backward(va, vb, trans_b, g, nodes[a].requires_grad, nodes[b].requires_grad);
            if let Some(ga) = ga {
                accumulate(grads, nodes, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Sum { a, axis } => {
            let va = val(nodes, a);
            let (outer, n, inner) = va.axis_extents(axis);
            let mut ga = Tensor::zeros(va.shape());
            let gd = g.data();
            let d = ga.data_mut();
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::SumAll(a) => {
            let va = val(nodes, a);
            accumulate(grads, nodes, a, Tensor::full(va.shape(), g.data()[0]));
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = out.axis_extents(axis);
            let mut ga = Tensor::zeros(out.shape());
            let (p, gd) = (out.data(), g.data());
            let d = ga.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for j in 0..n {
                        let k = (o * n + j) * inner + i;
                        dot += p[k] * gd[k];
                    }
                    for j in 0..n {
                        let k = (o * n + j) * inner + i;
                        d[k] = p[k] * (gd[k] - dot);
                    }
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::Reshape(a) => {
            let ga = g.clone().reshape(val(nodes, a).shape()).expect("reshape");
            accumulate(grads, nodes, a, ga);
        }
        Op::Permute { a, ref perm } => {
            accumulate(grads, nodes, a, permute(g, &inverse_perm(perm)));
        }
        Op::Slice { a, axis, start } => {
            if !nodes[a].requires_grad {
                return;
            }
            // Added in place so many slices of one tensor share a buffer.
            let va = val(nodes, a);
            let (outer, n, inner) = va.axis_extents(axis);
            let len = g.shape()[axis];
            let d = grads[a].get_or_insert_with(|| Tensor::zeros(va.shape())).data_mut();
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * n + start) * inner;
                for (x, y) in d[dst..dst + len * inner].iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        Op::Concat { ref parts, axis } => {
            let (outer, total, inner) = g.axis_extents(axis);
            let mut offset = 0;
            for &p in parts {
                let vp = val(nodes, p);
                let len = vp.shape()[axis];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(vp.numel());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[s..s + len * inner]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(vp.shape(), gp).expect("concat"));
                }
                offset += len;
            }
        }
        Op::CausalConv { x, w, b, dilation } => {
            let (vx, vw) = (val(nodes, x), val(nodes, w));
            let (gx, gw, gb) = causal_conv_backward(vx, vw, dilation, g);
            accumulate(grads, nodes, x, gx);
            accumulate(grads, nodes, w, gw);
            if let Some(b) = b {
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::ConvTranspose { x, w, b, stride } => {
            let (vx, vw) = (val(nodes, x), val(nodes, w));
            let (gx, gw, gb) = conv_transpose_backward(vx, vw, stride, g);
            accumulate(grads, nodes, x, gx);
            accumulate(grads, nodes, w, gw);
            if let Some(b) = b {
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Depthwise { x, w, b } => {
            let (vx, vw) = (val(nodes, x), val(nodes, w));
            let (nb, c, l) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let mut gx = Tensor::zeros(vx.shape());
            let mut gw = Tensor::zeros(vw.shape());
            let mut gbias = Tensor::zeros(vw.shape());
            for n in 0..nb {
                for ch in 0..c {
                    let base = (n * c + ch) * l;
                    let wv = vw.data()[ch];
                    for t in 0..l {
                        let gv = g.data()[base + t];
                        gx.data_mut()[base + t] = gv * wv;
                        gw.data_mut()[ch] += gv * vx.data()[base + t];
                        gbias.data_mut()[ch] += gv;
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
            accumulate(grads, nodes, w, gw);
            accumulate(grads, nodes, b, gbias);
        }
        Op::Dropout { a, ref mask } => {
            let data = g.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
            accumulate(grads, nodes, a, Tensor::new(g.shape(), data).expect("dropout"));
        }
        Op::Gather { a, ref rows } => {
            let va = val(nodes, a);
            let d = va.shape()[1];
            let mut ga = Tensor::zeros(va.shape());
            let gd = ga.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                for (dst, src) in gd[r * d..(r + 1) * d].iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                    *dst += src;
                }
            }
            accumulate(grads, nodes, a, ga);
        }
    }
}

/// Batch layout of a matmul: `a` is `[batch.., m, k]`, `b` is `[k, n]`
/// (shared) or `[batch.., k, n]`, either optionally stored transposed.
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(mismatch());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_b = b.len() == 2;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_b,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([d.m, d.n]);
    let mut out = Tensor::zeros(&shape);
    if d.shared_b {
        gemm(d.batch * d.m, d.k, d.n, a.data(), false, b.data(), trans_b, out.data_mut(), false);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                &a.data()[i * sa..(i + 1) * sa],
                false,
                &b.data()[i * sb..(i + 1) * sb],
                trans_b,
                &mut out.data_mut()[i * sc..(i + 1) * sc],
                false,
            );
        }
    }
    Ok(out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_b: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = matmul_dims(a.shape(), b.shape(), trans_b).expect("validated in forward");
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    if d.shared_b {
        let rows = d.batch * d.m;
        if let Some(ga) = ga.as_mut() {
            // dA = G · op(B)^T
            gemm(rows, d.n, d.k, g.data(), false, b.data(), !trans_b, ga.data_mut(), false);
        }
        if let Some(gb) = gb.as_mut() {
            if trans_b {
                // B stored [n,k]: dB = G^T · A
                gemm(d.n, rows, d.k, g.data(), true, a.data(), false, gb.data_mut(), false);
            } else {
                gemm(d.k, rows, d.n, a.data(), true, g.data(), false, gb.data_mut(), false);
            }
        }
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let gi = &g.data()[i * sc..(i + 1) * sc];
            let ai = &a.data()[i * sa..(i + 1) * sa];
            let bi = &b.data()[i * sb..(i + 1) * sb];
            if let Some(ga) = ga.as_mut() {
                gemm(d.m, d.n, d.k, gi, false, bi, !trans_b, &mut ga.data_mut()[i * sa..(i + 1) * sa], false);
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb.data_mut()[i * sb..(i + 1) * sb];
                if trans_b {
                    gemm(d.n, d.m, d.k, gi, true, ai, false, dst, false);
                } else {
                    gemm(d.k, d.m, d.n, ai, true, gi, false, dst, false);
                }
            }
        }
    }
    (ga, gb)
}

fn conv_dims(x: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[0], w.shape()[2]))
}

/// `y[n,o,t] = b[o] + Σ_i Σ_k w[o,i,k] · x[n,i,t − d·k]`, zero for negative time.
fn causal_conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, d: usize) -> Result<Tensor> {
    let (nb, cin, l, cout, k) = conv_dims(x, w, "causal_conv")?;
    if w.shape()[1] != cin || b.is_some_and(|b| b.shape() != [cout]) {
        return Err(Error::ShapeMismatch {
            op: "causal_conv",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[nb, cout, l]);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for n in 0..nb {
        for o in 0..cout {
            let yrow = &mut yd[(n * cout + o) * l..(n * cout + o + 1) * l];
            if let Some(b) = b {
                yrow.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for i in 0..cin {
                let xrow = &xd[(n * cin + i) * l..(n * cin + i + 1) * l];
                for kk in 0..k {
                    let wv = wd[(o * cin + i) * k + kk];
                    let shift = d * kk;
                    for t in shift..l {
                        yrow[t] += wv * xrow[t - shift];
                    }
                }
            }
        }
    }
    Ok(y)
}

fn causal_conv_backward(x: &Tensor, w: &Tensor, d: usize, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (nb, cin, l, cout, k) = conv_dims(x, w, "causal_conv").expect("validated");
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for n in 0..nb {
        for o in 0..cout {
            let grow = &gd[(n * cout + o) * l..(n * cout + o + 1) * l];
            gb.data_mut()[o] += grow.iter().sum::<f64>();
            for i in 0..cin {
                let xbase = (n * cin + i) * l;
                for kk in 0..k {
                    let widx = (o * cin + i) * k + kk;
                    let shift = d * kk;
                    let mut acc = 0.0;
                    for t in shift..l {
                        acc += grow[t] * xd[xbase + t - shift];
                        gx.data_mut()[xbase + t - shift] += grow[t] * wd[widx];
                    }
                    gw.data_mut()[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed 1-D convolution: `x` is `[N, Cin, L]`, `w` is `[Cin, Cout, K]`,
/// output length `(L − 1)·stride + K`.
fn conv_transpose_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (nb, cin, l, wcin, k) = conv_dims(x, w, "conv_transpose")?;
    let cout = w.shape()[1];
    if wcin != cin || stride == 0 || b.is_some_and(|b| b.shape() != [cout]) {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let lout = (l - 1) * stride + k;
    let mut y = Tensor::zeros(&[nb, cout, lout]);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for n in 0..nb {
        for o in 0..cout {
            let ybase = (n * cout + o) * lout;
            if let Some(b) = b {
                yd[ybase..ybase + lout].iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for i in 0..cin {
                for t in 0..l {
                    let xv = xd[(n * cin + i) * l + t];
                    for kk in 0..k {
                        yd[ybase + t * stride + kk] += xv * wd[(i * cout + o) * k + kk];
                    }
                }
            }
        }
    }
    Ok(y)
}

fn conv_transpose_backward(x: &Tensor, w: &Tensor, stride: usize, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (nb, cin, l, _, k) = conv_dims(x, w, "conv_transpose").expect("validated");
    let cout = w.shape()[1];
    let lout = (l - 1) * stride + k;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for n in 0..nb {
        for o in 0..cout {
            let gbase = (n * cout + o) * lout;
            gb.data_mut()[o] += gd[gbase..gbase + lout].iter().sum::<f64>();
            for i in 0..cin {
                for t in 0..l {
                    let xi = (n * cin + i) * l + t;
                    for kk in 0..k {
                        let gv = gd[gbase + t * stride + kk];
                        let wi = (i * cout + o) * k + kk;
                        gx.data_mut()[xi] += gv * wd[wi];
                        gw.data_mut()[wi] += gv * xd[xi];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let v = broadcast_binary(&self.value(), &other.value(), name, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, op, rg))
    }

    pub fn add(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "add", |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "sub", |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "mul", |a, b| a * b, Op::Mul(self.id, o.id))
    }

    /// Elementwise division. Fails if any divisor is exactly zero; guard
    /// with an epsilon first where zeros are possible.
    pub fn div(&self, o: Var<'t>) -> Result<Var<'t>> {
        if o.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::DivisionByZero("div"));
        }
        self.binary(o, "div", |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id))
    }

    /// Rounds every value to the nearest multiple of `step` (a power of two
    /// keeps this exact). The gradient passes straight through.
    pub fn snap(&self, step: f64) -> Var<'t> {
        self.unary(self.value().map(|v| (v / step).round() * step), Op::Snap(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::NonFinite("sqrt of a negative value".into()));
        }
        Ok(self.unary(v.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(self.value().map(gelu), Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    /// `self @ w`, batched over leading axes; `w` may be a shared 2-D matrix.
    pub fn matmul(&self, w: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(w, false)
    }

    /// `self @ wᵀ` where `w` is stored `[.., n, k]`.
    pub fn matmul_t(&self, w: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(w, true)
    }

    fn matmul_impl(&self, w: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let v = matmul_forward(&self.value(), &w.value(), trans_b)?;
        let rg = self.requires_grad() || w.requires_grad();
        Ok(self.tape.push(
            v,
            Op::Matmul {
                a: self.id,
                b: w.id,
                trans_b,
            },
            rg,
        ))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::invalid(format!("{op}: axis {axis} out of range for shape {s:?}")));
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "sum")?;
        let v = self.value();
        let (outer, n, inner) = v.axis_extents(axis);
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let mut out = Tensor::zeros(&shape);
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    d[o * inner + i] += v.data()[base + i];
                }
            }
        }
        Ok(self.unary(out, Op::Sum { a: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Population variance along `axis`, keeping the axis.
    pub fn var_axis(&self, axis: usize) -> Result<Var<'t>> {
        let mu = self.mean_axis(axis)?;
        self.sub(mu)?.square().mean_axis(axis)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Softmax along `axis`. Entries equal to `-inf` receive zero weight.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "softmax")?;
        let v = self.value();
        let (outer, n, inner) = v.axis_extents(axis);
        let mut out = Tensor::zeros(v.shape());
        let src = v.data();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(Error::invalid("softmax over a fully masked row"));
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    d[idx(j)] /= z;
                }
            }
        }
        Ok(self.unary(out, Op::Softmax { a: self.id, axis }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("permute: {perm:?} is not a permutation of rank {}", s.len())));
        }
        let v = permute(&self.value(), perm);
        Ok(self.unary(
            v,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "slice")?;
        let v = self.value();
        let (outer, n, inner) = v.axis_extents(axis);
        if start + len > n {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        Ok(self.unary(
            Tensor::new(&shape, data)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rows of a `[n, d]` matrix by index, giving `[rows.len(), d]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid(format!("gather_rows needs a matrix, got {:?}", v.shape())));
        }
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
        }
        Ok(self.unary(
            Tensor::new(&[rows.len(), d], data)?,
            Op::Gather {
                a: self.id,
                rows: Rc::new(rows.to_vec()),
            },
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        first.check_axis(axis, "concat")?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        for v in &vals[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Causal dilated 1-D convolution over `[N, Cin, L]` with kernel
    /// `[Cout, Cin, K]`; output length equals input length.
    pub fn causal_conv1d(&self, w: Var<'t>, b: Option<Var<'t>>, dilation: usize) -> Result<Var<'t>> {
        let bv = b.map(|b| b.value());
        let y = causal_conv_forward(&self.value(), &w.value(), bv.as_deref(), dilation.max(1))?;
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            y,
            Op::CausalConv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                dilation: dilation.max(1),
            },
            rg,
        ))
    }

    /// Transposed 1-D convolution over `[N, Cin, L]` with kernel `[Cin, Cout, K]`.
    pub fn conv_transpose1d(&self, w: Var<'t>, b: Option<Var<'t>>, stride: usize) -> Result<Var<'t>> {
        let bv = b.map(|b| b.value());
        let y = conv_transpose_forward(&self.value(), &w.value(), bv.as_deref(), stride)?;
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            y,
            Op::ConvTranspose {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
            },
            rg,
        ))
    }

    /// Depthwise 1×1 convolution over `[N, C, L]`: `y[n,c,:] = w[c]·x[n,c,:] + b[c]`.
    pub fn depthwise_conv1x1(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (wv, bv) = (w.value(), b.value());
        if x.rank() != 3 || wv.shape() != [x.shape()[1]] || bv.shape() != wv.shape() {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv1x1",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (c, l) = (x.shape()[1], x.shape()[2]);
        let y = Tensor::from_fn(x.shape(), |i| {
            let ch = (i / l) % c;
            wv.data()[ch] * x.data()[i] + bv.data()[ch]
        });
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            y,
            Op::Depthwise {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 || !training {
            return Ok(*self);
        }
        let v = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.unary(
            Tensor::new(v.shape(), data)?,
            Op::Dropout {
                a: self.id,
                mask: Rc::new(mask),
            },
        ))
    }
}

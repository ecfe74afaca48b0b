use std::cell::RefCell;
use std::fmt;

use rand::Rng;

use super::kernels::{self, add_into, around};
use super::{Float, Result, Tensor, TensorError};

type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
}

enum Op<F> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        trans_b: bool,
        alpha: F,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Binary {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: F,
    },
    AddScalar {
        x: NodeId,
    },
    Swap {
        x: NodeId,
        a1: usize,
        a2: usize,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: NodeId,
        outer: usize,
        n_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Expand {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Reduce {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
        mean: bool,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
        log: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        outer: usize,
        c: usize,
        inner: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    ChannelAffine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        outer: usize,
        c: usize,
        inner: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        batch: usize,
        cin: usize,
        cout: usize,
        lin: usize,
        lout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<F>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        scale: F,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
        cols: usize,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Swap { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Expand { .. } => "expand",
            Op::Reduce { .. } => "reduce",
            Op::Unary { .. } => "unary",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Conv1d { .. } => "conv1d",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Tape of recorded operations.
///
/// A graph is confined to one thread; separate graphs may run concurrently.
/// Gradients are retained for leaves only.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    released: RefCell<bool>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Float> {
    graph: &'g Graph<F>,
    id: NodeId,
}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract { op, msg: msg.into() }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            released: RefCell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and intermediate buffer.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        *self.released.borrow_mut() = false;
    }

    pub fn leaf(&self, t: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.leaf(t, false)
    }

    pub fn param(&self, t: Tensor<F>) -> Var<'_, F> {
        self.leaf(t, true)
    }

    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn check_live(&self) -> Result<()> {
        if *self.released.borrow() {
            Err(contract("graph", "graph buffers were released by backward_and_release"))
        } else {
            Ok(())
        }
    }

    /// Resets every accumulated gradient.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires grad.
    /// Calling twice without [`Graph::zero_grad`] doubles the gradients.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        self.run_backward(loss.id, false)
    }

    /// Like [`Graph::backward`], but frees each forward buffer once it is no
    /// longer needed. The graph cannot be differentiated again afterwards.
    pub fn backward_and_release(&self, loss: Var<'_, F>) -> Result<()> {
        self.run_backward(loss.id, true)
    }

    fn run_backward(&self, loss: NodeId, release: bool) -> Result<()> {
        self.check_live()?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss].value.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss].shape),
            ));
        }
        if !nodes[loss].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss + 1);
        grads.resize_with(loss + 1, || None);
        grads[loss] = Some(vec![F::one()]);
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[i].op {
                match &mut nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backward_node(&nodes, i, &g, &mut |id, v| {
                match &mut grads[id] {
                    Some(acc) => add_into(acc, &v),
                    slot => *slot = Some(v),
                }
            });
            if release {
                nodes[i].value = Vec::new();
                if let Op::Conv1d { cols, .. } = &mut nodes[i].op {
                    *cols = Vec::new();
                }
            }
        }
        if release {
            *self.released.borrow_mut() = true;
        }
        Ok(())
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, xs: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        self.check_live()?;
        let first = xs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let nodes = self.nodes.borrow();
        let s0 = nodes[first.id].shape.clone();
        if axis >= s0.len() {
            return Err(contract("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for x in xs {
            let s = &nodes[x.id].shape;
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &s0, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = around(&s0, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &sz) in xs.iter().zip(&sizes) {
                let v = &nodes[x.id].value;
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ids: Vec<NodeId> = xs.iter().map(|x| x.id).collect();
        let rg = ids.iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: ids,
                sizes,
                outer,
                inner,
            },
            rg,
        ))
    }
}

fn backward_node<F: Float>(
    nodes: &[Node<F>],
    i: NodeId,
    g: &[F],
    emit: &mut dyn FnMut(NodeId, Vec<F>),
) {
    let need = |id: NodeId| nodes[id].requires_grad;
    let val = |id: NodeId| &nodes[id].value[..];
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_shared,
            trans_b,
            alpha,
        } => {
            let (av, bv) = (val(a), val(b));
            // b laid out [k,n] (or [n,k] when trans_b)
            let (brs, bcs) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
            if need(a) {
                let mut da = vec![F::zero(); batch * m * k];
                for bi in 0..batch {
                    let boff = if b_shared { 0 } else { bi * k * n };
                    // da = g * b^T : [m,n] x [n,k]
                    F::gemm(
                        m,
                        n,
                        k,
                        alpha,
                        &g[bi * m * n..],
                        n as isize,
                        1,
                        &bv[boff..],
                        bcs,
                        brs,
                        F::zero(),
                        &mut da[bi * m * k..],
                        k as isize,
                        1,
                    );
                }
                emit(a, da);
            }
            if need(b) {
                let per = k * n;
                let mut db = vec![F::zero(); if b_shared { per } else { batch * per }];
                for bi in 0..batch {
                    let off = if b_shared { 0 } else { bi * per };
                    let beta = if b_shared && bi > 0 { F::one() } else { F::zero() };
                    // db = a^T * g : [k,m] x [m,n] (stored transposed when trans_b)
                    let (rsc, csc) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
                    F::gemm(
                        k,
                        m,
                        n,
                        alpha,
                        &av[bi * m * k..],
                        1,
                        k as isize,
                        &g[bi * m * n..],
                        n as isize,
                        1,
                        beta,
                        &mut db[off..],
                        rsc,
                        csc,
                    );
                }
                emit(b, db);
            }
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            if need(x) {
                let mut dx = vec![F::zero(); rows * din];
                F::gemm(
                    rows,
                    dout,
                    din,
                    F::one(),
                    g,
                    dout as isize,
                    1,
                    val(w),
                    1,
                    dout as isize,
                    F::zero(),
                    &mut dx,
                    din as isize,
                    1,
                );
                emit(x, dx);
            }
            if need(w) {
                let mut dw = vec![F::zero(); din * dout];
                F::gemm(
                    din,
                    rows,
                    dout,
                    F::one(),
                    val(x),
                    1,
                    din as isize,
                    g,
                    dout as isize,
                    1,
                    F::zero(),
                    &mut dw,
                    dout as isize,
                    1,
                );
                emit(w, dw);
            }
            if let Some(b) = b {
                if need(b) {
                    let mut db = vec![F::zero(); dout];
                    for r in 0..rows {
                        add_into(&mut db, &g[r * dout..(r + 1) * dout]);
                    }
                    emit(b, db);
                }
            }
        }
        &Op::Binary { kind, a, b } => {
            let period = nodes[b].value.len();
            if need(a) {
                let da = match kind {
                    BinKind::Add | BinKind::Sub => g.to_vec(),
                    BinKind::Mul => {
                        let bv = val(b);
                        g.iter().enumerate().map(|(j, &gv)| gv * bv[j % period]).collect()
                    }
                };
                emit(a, da);
            }
            if need(b) {
                let mut db = vec![F::zero(); period];
                match kind {
                    BinKind::Add => g.chunks(period).for_each(|c| add_into(&mut db, c)),
                    BinKind::Sub => g.chunks(period).for_each(|c| {
                        for (d, v) in db.iter_mut().zip(c) {
                            *d -= *v;
                        }
                    }),
                    BinKind::Mul => {
                        let av = val(a);
                        for (j, &gv) in g.iter().enumerate() {
                            db[j % period] += gv * av[j];
                        }
                    }
                }
                emit(b, db);
            }
        }
        &Op::Scale { x, c } => emit(x, g.iter().map(|&v| v * c).collect()),
        &Op::AddScalar { x } => emit(x, g.to_vec()),
        &Op::Swap { x, a1, a2 } => {
            // gradient flows back through the same axis swap on the output shape
            emit(x, kernels::swap_axes(g, &node.shape, a1, a2));
        }
        &Op::Reshape { x } => emit(x, g.to_vec()),
        Op::Concat {
            inputs,
            sizes,
            outer,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&id, &sz) in inputs.iter().zip(sizes) {
                if need(id) {
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&g[s..s + sz * inner]);
                    }
                    emit(id, d);
                }
                offset += sz;
            }
        }
        &Op::Slice {
            x,
            outer,
            n_in,
            start,
            len,
            inner,
        } => {
            let mut d = vec![F::zero(); outer * n_in * inner];
            for o in 0..outer {
                let s = (o * n_in + start) * inner;
                d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            emit(x, d);
        }
        &Op::Expand { x, outer, n, inner } => {
            let mut d = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let s = (o * n + j) * inner;
                    add_into(&mut d[o * inner..(o + 1) * inner], &g[s..s + inner]);
                }
            }
            emit(x, d);
        }
        &Op::Reduce {
            x,
            outer,
            n,
            inner,
            mean,
        } => {
            let scale = if mean { F::one() / F::cst(n as f64) } else { F::one() };
            let mut d = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let s = (o * n + j) * inner;
                    for r in 0..inner {
                        d[s + r] = g[o * inner + r] * scale;
                    }
                }
            }
            emit(x, d);
        }
        &Op::Unary { kind, x } => {
            let y = &node.value;
            let d: Vec<F> = match kind {
                UnaryKind::Relu => g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > F::zero() { gv } else { F::zero() })
                    .collect(),
                UnaryKind::Sigmoid => g.iter().zip(y).map(|(&gv, &s)| gv * s * (F::one() - s)).collect(),
                UnaryKind::Exp => g.iter().zip(y).map(|(&gv, &e)| gv * e).collect(),
                UnaryKind::Log => g.iter().zip(val(x)).map(|(&gv, &xv)| gv / xv).collect(),
                UnaryKind::Abs => g
                    .iter()
                    .zip(val(x))
                    .map(|(&gv, &xv)| {
                        if xv > F::zero() {
                            gv
                        } else if xv < F::zero() {
                            -gv
                        } else {
                            F::zero()
                        }
                    })
                    .collect(),
            };
            emit(x, d);
        }
        &Op::Softmax {
            x,
            outer,
            n,
            inner,
            log,
        } => {
            let y = &node.value;
            let mut d = vec![F::zero(); y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * n * inner + r;
                    if log {
                        // dx = g - softmax * sum(g)
                        let mut gs = F::zero();
                        for j in 0..n {
                            gs += g[base + j * inner];
                        }
                        for j in 0..n {
                            let p = y[base + j * inner].exp();
                            d[base + j * inner] = g[base + j * inner] - p * gs;
                        }
                    } else {
                        // dx = y * (g - <g, y>)
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            d[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            emit(x, d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            n,
            mean,
            rstd,
        } => {
            let (xv, gm) = (val(*x), val(*gamma));
            let n = *n;
            let rows = xv.len() / n;
            let nf = F::cst(n as f64);
            let mut dx = vec![F::zero(); xv.len()];
            let mut dg = vec![F::zero(); n];
            let mut db = vec![F::zero(); n];
            for r in 0..rows {
                let row = r * n;
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for j in 0..n {
                    let xh = (xv[row + j] - mean[r]) * rstd[r];
                    let gv = g[row + j];
                    dg[j] += gv * xh;
                    db[j] += gv;
                    let dxh = gv * gm[j];
                    s1 += dxh;
                    s2 += dxh * xh;
                }
                for j in 0..n {
                    let xh = (xv[row + j] - mean[r]) * rstd[r];
                    let dxh = g[row + j] * gm[j];
                    dx[row + j] = rstd[r] * (dxh - s1 / nf - xh * s2 / nf);
                }
            }
            if need(*x) {
                emit(*x, dx);
            }
            if need(*gamma) {
                emit(*gamma, dg);
            }
            if need(*beta) {
                emit(*beta, db);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            outer,
            c,
            inner,
            mean,
            rstd,
        } => {
            let (outer, c, inner) = (*outer, *c, *inner);
            let (xv, gm) = (val(*x), val(*gamma));
            let count = F::cst((outer * inner) as f64);
            let mut s1 = vec![F::zero(); c];
            let mut s2 = vec![F::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for r in 0..inner {
                        let xh = (xv[base + r] - mean[ch]) * rstd[ch];
                        s1[ch] += g[base + r];
                        s2[ch] += g[base + r] * xh;
                    }
                }
            }
            if need(*x) {
                let mut dx = vec![F::zero(); xv.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = gm[ch] * rstd[ch] / count;
                        for r in 0..inner {
                            let xh = (xv[base + r] - mean[ch]) * rstd[ch];
                            dx[base + r] = k * (count * g[base + r] - s1[ch] - xh * s2[ch]);
                        }
                    }
                }
                emit(*x, dx);
            }
            if need(*gamma) {
                emit(*gamma, s2);
            }
            if need(*beta) {
                emit(*beta, s1);
            }
        }
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            outer,
            c,
            inner,
            mean,
            rstd,
        } => {
            let (outer, c, inner) = (*outer, *c, *inner);
            let (xv, gm) = (val(*x), val(*gamma));
            let mut dx = vec![F::zero(); xv.len()];
            let mut dg = vec![F::zero(); c];
            let mut db = vec![F::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for r in 0..inner {
                        let gv = g[base + r];
                        dx[base + r] = gv * gm[ch] * rstd[ch];
                        dg[ch] += gv * (xv[base + r] - mean[ch]) * rstd[ch];
                        db[ch] += gv;
                    }
                }
            }
            if need(*x) {
                emit(*x, dx);
            }
            if need(*gamma) {
                emit(*gamma, dg);
            }
            if need(*beta) {
                emit(*beta, db);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            batch,
            cin,
            cout,
            lin,
            lout,
            k,
            stride,
            pad,
            cols,
        } => {
            let (batch, cin, cout, lout) = (*batch, *cin, *cout, *lout);
            let width = cin * k;
            if need(*w) {
                let mut dw = vec![F::zero(); cout * width];
                for bi in 0..batch {
                    // dw += g_b [cout, lout] * cols_b [lout, width]
                    F::gemm(
                        cout,
                        lout,
                        width,
                        F::one(),
                        &g[bi * cout * lout..],
                        lout as isize,
                        1,
                        &cols[bi * lout * width..],
                        width as isize,
                        1,
                        F::one(),
                        &mut dw,
                        width as isize,
                        1,
                    );
                }
                emit(*w, dw);
            }
            if need(*b) {
                let mut db = vec![F::zero(); cout];
                for bi in 0..batch {
                    for co in 0..cout {
                        let s = (bi * cout + co) * lout;
                        for v in &g[s..s + lout] {
                            db[co] += *v;
                        }
                    }
                }
                emit(*b, db);
            }
            if need(*x) {
                let mut dcols = vec![F::zero(); batch * lout * width];
                for bi in 0..batch {
                    // dcols_b [lout, width] = g_b^T [lout, cout] * w [cout, width]
                    F::gemm(
                        lout,
                        cout,
                        width,
                        F::one(),
                        &g[bi * cout * lout..],
                        1,
                        lout as isize,
                        val(*w),
                        width as isize,
                        1,
                        F::zero(),
                        &mut dcols[bi * lout * width..],
                        width as isize,
                        1,
                    );
                }
                emit(*x, kernels::col2im(&dcols, batch, cin, *lin, *k, *stride, *pad, lout));
            }
        }
        Op::Dropout { x, keep, scale } => emit(
            *x,
            g.iter()
                .zip(keep)
                .map(|(&a, &k)| if k { a * *scale } else { F::zero() })
                .collect(),
        ),
        Op::Gather { x, idx, cols } => {
            let mut d = vec![F::zero(); idx.len() * cols];
            for (r, &c) in idx.iter().enumerate() {
                d[r * cols + c] = g[r];
            }
            emit(*x, d);
        }
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<F> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node value matches its shape")
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> F {
        self.graph.nodes.borrow()[self.id].value[0]
    }

    /// Accumulated gradient (leaves only), if backward reached this node.
    pub fn grad(&self) -> Option<Tensor<F>> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    /// Name of the operation that produced this node.
    pub fn op_name(&self) -> &'static str {
        self.graph.nodes.borrow()[self.id].op.name()
    }

    fn unary_map(self, kind: UnaryKind, f: impl Fn(F) -> F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        let out: Vec<F> = n.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::Unary { kind, x: self.id }, rg))
    }

    pub fn relu(self) -> Result<Self> {
        self.unary_map(UnaryKind::Relu, |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary_map(UnaryKind::Sigmoid, |v| F::one() / (F::one() + (-v).exp()))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary_map(UnaryKind::Exp, |v| v.exp())
    }

    pub fn log(self) -> Result<Self> {
        self.unary_map(UnaryKind::Log, |v| v.ln())
    }

    pub fn abs(self) -> Result<Self> {
        self.unary_map(UnaryKind::Abs, |v| v.abs())
    }

    pub fn scale(self, c: F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        let out = n.value.iter().map(|&v| v * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::Scale { x: self.id, c }, rg))
    }

    pub fn add_scalar(self, c: F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        let out = n.value.iter().map(|&v| v + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::AddScalar { x: self.id }, rg))
    }

    fn binary(self, other: Self, kind: BinKind) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let (sa, sb) = (&nodes[self.id].shape, &nodes[other.id].shape);
        // rhs may only be expanded over leading dimensions
        let suffix = |big: &[usize], small: &[usize]| {
            small.len() <= big.len() && big[big.len() - small.len()..] == *small
        };
        let (a, b) = if suffix(sa, sb) {
            (self.id, other.id)
        } else if kind != BinKind::Sub && suffix(sb, sa) {
            (other.id, self.id)
        } else {
            let op = match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
            };
            return Err(shape_err(op, sa, sb));
        };
        let (av, bv) = (&nodes[a].value, &nodes[b].value);
        let period = bv.len();
        let out: Vec<F> = match kind {
            BinKind::Add => av.iter().enumerate().map(|(j, &x)| x + bv[j % period]).collect(),
            BinKind::Sub => av.iter().enumerate().map(|(j, &x)| x - bv[j % period]).collect(),
            BinKind::Mul => av.iter().enumerate().map(|(j, &x)| x * bv[j % period]).collect(),
        };
        let shape = nodes[a].shape.clone();
        let rg = nodes[a].requires_grad || nodes[b].requires_grad;
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum; `other` may be expanded over leading dimensions.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Mul)
    }

    /// Matrix product over the last two axes. `other` is either `[k, n]`
    /// (shared across the batch) or carries the same leading axes as `self`.
    pub fn matmul(self, other: Self) -> Result<Self> {
        self.matmul_impl(other, false, F::one())
    }

    /// `alpha * self · otherᵀ` over the last two axes.
    pub fn matmul_nt(self, other: Self, alpha: F) -> Result<Self> {
        self.matmul_impl(other, true, alpha)
    }

    fn matmul_impl(self, other: Self, trans_b: bool, alpha: F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let (sa, sb) = (nodes[self.id].shape.clone(), nodes[other.id].shape.clone());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if kb != k || (!b_shared && lead_a != lead_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
        let mut out = vec![F::zero(); batch * m * n];
        let (brs, bcs) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
        if b_shared && !trans_b {
            F::gemm(batch * m, k, n, alpha, av, k as isize, 1, bv, brs, bcs, F::zero(), &mut out, n as isize, 1);
        } else {
            for bi in 0..batch {
                let boff = if b_shared { 0 } else { bi * k * n };
                F::gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &av[bi * m * k..],
                    k as isize,
                    1,
                    &bv[boff..],
                    brs,
                    bcs,
                    F::zero(),
                    &mut out[bi * m * n..],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
                alpha,
            },
            rg,
        ))
    }

    /// `self · w + b` applied to the last axis: `[..., din] x [din, dout]`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let sx = nodes[self.id].shape.clone();
        let sw = &nodes[w.id].shape;
        let din = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[0] != din {
            return Err(shape_err("linear", &sx, sw));
        }
        let dout = sw[1];
        if let Some(b) = b {
            if nodes[b.id].shape != [dout] {
                return Err(shape_err("linear bias", sw, &nodes[b.id].shape));
            }
        }
        let rows = nodes[self.id].value.len() / din;
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bv = &nodes[b.id].value;
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(
            rows,
            din,
            dout,
            F::one(),
            &nodes[self.id].value,
            din as isize,
            1,
            &nodes[w.id].value,
            dout as isize,
            1,
            beta,
            &mut out,
            dout as isize,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = dout;
        let rg = nodes[self.id].requires_grad
            || nodes[w.id].requires_grad
            || b.is_some_and(|b| nodes[b.id].requires_grad);
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    /// Swaps two axes (materialized).
    pub fn transpose(self, a1: usize, a2: usize) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if a1 >= s.len() || a2 >= s.len() {
            return Err(contract("transpose", format!("axes ({a1},{a2}) out of range for {s:?}")));
        }
        if a1 == a2 {
            drop(nodes);
            return Ok(self);
        }
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let out = kernels::swap_axes(&nodes[self.id].value, &s, lo, hi);
        let mut shape = s;
        shape.swap(lo, hi);
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::Swap { x: self.id, a1: lo, a2: hi }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(shape_err("reshape", &n.shape, shape));
        }
        let (out, rg) = (n.value.clone(), n.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape.to_vec(), out, Op::Reshape { x: self.id }, rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(contract(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n_in, inner) = around(&s, axis);
        let v = &nodes[self.id].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let a = (o * n_in + start) * inner;
            out.extend_from_slice(&v[a..a + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Slice {
                x: self.id,
                outer,
                n_in,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand(self, axis: usize, n: usize) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if axis >= s.len() || s[axis] != 1 || n == 0 {
            return Err(contract("expand", format!("axis {axis} of {s:?} must have size 1")));
        }
        let (outer, _, inner) = around(&s, axis);
        let v = &nodes[self.id].value;
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&v[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = n;
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Expand {
                x: self.id,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if axis >= s.len() {
            return Err(contract("reduce", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = around(&s, axis);
        let v = &nodes[self.id].value;
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let a = (o * n + j) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &v[a..a + inner]);
            }
        }
        if mean {
            let inv = F::one() / F::cst(n as f64);
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            shape,
            out,
            Op::Reduce {
                x: self.id,
                outer,
                n,
                inner,
                mean,
            },
            rg,
        ))
    }

    /// Sum over `axis` (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        self.reduce(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.reduce(axis, true)
    }

    /// Sum of every element, as a scalar of shape `[1]`.
    pub fn sum(self) -> Result<Self> {
        let n = self.graph.nodes.borrow()[self.id].value.len();
        self.reshape(&[n])?.reduce(0, false)
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.graph.nodes.borrow()[self.id].value.len();
        self.reshape(&[n])?.reduce(0, true)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if axis >= s.len() {
            return Err(contract("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let v = &nodes[self.id].value;
        if v.iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let (outer, n, inner) = around(&s, axis);
        let out = kernels::softmax(v, outer, n, inner, log);
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            s,
            out,
            Op::Softmax {
                x: self.id,
                outer,
                n,
                inner,
                log,
            },
            rg,
        ))
    }

    /// Normalized exponentials along `axis`, with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Self> {
        self.softmax_impl(axis, true)
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        let n = *s.last().expect("rank >= 1");
        if nodes[gamma.id].shape != [n] || nodes[beta.id].shape != [n] {
            return Err(shape_err("layer_norm", &s, &nodes[gamma.id].shape));
        }
        let (xv, gv, bv) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
        let rows = xv.len() / n;
        let (mean, _, rstd) = kernels::channel_stats(xv, 1, rows, n, eps);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            for j in 0..n {
                let i = r * n + j;
                out[i] = (xv[i] - mean[r]) * rstd[r] * gv[j] + bv[j];
            }
        }
        let rg = self.graph_rg(&nodes, &[self.id, gamma.id, beta.id]);
        drop(nodes);
        Ok(self.graph.push(
            s,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                n,
                mean,
                rstd,
            },
            rg,
        ))
    }

    fn graph_rg(&self, nodes: &[Node<F>], ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn channel_layout(s: &[usize], gamma: &[usize]) -> Result<(usize, usize, usize)> {
        if s.len() < 2 || gamma != [s[1]] {
            return Err(shape_err("batch_norm", s, gamma));
        }
        let outer = s[0];
        let c = s[1];
        let inner = s[2..].iter().product();
        Ok((outer, c, inner))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    /// Returns the output plus the batch mean and biased variance per channel.
    pub fn batch_norm(self, gamma: Self, beta: Self, eps: F) -> Result<(Self, Vec<F>, Vec<F>)> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        let (outer, c, inner) = Self::channel_layout(&s, &nodes[gamma.id].shape)?;
        if outer < 2 {
            return Err(contract(
                "batch_norm",
                "batch statistics need at least 2 samples; use running statistics for batch size 1",
            ));
        }
        let xv = &nodes[self.id].value;
        let (mean, var, rstd) = kernels::channel_stats(xv, outer, c, inner, eps);
        let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for r in 0..inner {
                    out[base + r] = (xv[base + r] - mean[ch]) * rstd[ch] * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.graph_rg(&nodes, &[self.id, gamma.id, beta.id]);
        drop(nodes);
        let var_out = self.graph.push(
            s,
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                outer,
                c,
                inner,
                mean: mean.clone(),
                rstd,
            },
            rg,
        );
        Ok((var_out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(self, gamma: Self, beta: Self, mean: &[F], var: &[F], eps: F) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        let (outer, c, inner) = Self::channel_layout(&s, &nodes[gamma.id].shape)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", &[c], &[mean.len(), var.len()]));
        }
        let rstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for r in 0..inner {
                    out[base + r] = (xv[base + r] - mean[ch]) * rstd[ch] * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.graph_rg(&nodes, &[self.id, gamma.id, beta.id]);
        drop(nodes);
        Ok(self.graph.push(
            s,
            out,
            Op::ChannelAffine {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                outer,
                c,
                inner,
                mean: mean.to_vec(),
                rstd,
            },
            rg,
        ))
    }

    /// 1-D convolution: `[B, Cin, L] * [Cout, Cin, K] + b -> [B, Cout, L']`.
    pub fn conv1d(self, w: Self, b: Self, stride: usize, pad: usize) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let sx = nodes[self.id].shape.clone();
        let sw = nodes[w.id].shape.clone();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || nodes[b.id].shape != [sw[0]] {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (batch, cin, lin) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if stride == 0 || lin + 2 * pad < k {
            return Err(contract("conv1d", format!("length {lin} too short for kernel {k}, padding {pad}")));
        }
        let lout = (lin + 2 * pad - k) / stride + 1;
        let width = cin * k;
        let cols = kernels::im2col(&nodes[self.id].value, batch, cin, lin, k, stride, pad, lout);
        let (wv, bv) = (&nodes[w.id].value, &nodes[b.id].value);
        let mut out = vec![F::zero(); batch * cout * lout];
        for bi in 0..batch {
            let o = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            for co in 0..cout {
                o[co * lout..(co + 1) * lout].fill(bv[co]);
            }
            // out_b [cout, lout] = w [cout, width] * cols_b^T [width, lout]
            F::gemm(
                cout,
                width,
                lout,
                F::one(),
                wv,
                width as isize,
                1,
                &cols[bi * lout * width..],
                1,
                width as isize,
                F::one(),
                o,
                lout as isize,
                1,
            );
        }
        let rg = self.graph_rg(&nodes, &[self.id, w.id, b.id]);
        drop(nodes);
        Ok(self.graph.push(
            vec![batch, cout, lout],
            out,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                b: b.id,
                batch,
                cin,
                cout,
                lin,
                lout,
                k,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract("dropout", format!("probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        let scale = F::cst(1.0 / (1.0 - p));
        // one 32-bit draw per element, dropped when below p * 2^32
        let cut = (p * 4_294_967_296.0) as u64;
        let mut bits = vec![0u32; n.value.len()];
        rng.fill(&mut bits[..]);
        let keep: Vec<bool> = bits.iter().map(|&b| u64::from(b) >= cut).collect();
        let out = n
            .value
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { F::zero() })
            .collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(nodes);
        Ok(self.graph.push(shape, out, Op::Dropout { x: self.id, keep, scale }, rg))
    }

    /// Picks `self[r, idx[r]]` from a `[rows, cols]` matrix.
    pub fn gather(self, idx: &[usize]) -> Result<Self> {
        self.graph.check_live()?;
        let nodes = self.graph.nodes.borrow();
        let s = nodes[self.id].shape.clone();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err("gather", &s, &[idx.len()]));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(contract("gather", format!("index {bad} out of range for {cols} columns")));
        }
        let v = &nodes[self.id].value;
        let out = idx.iter().enumerate().map(|(r, &c)| v[r * cols + c]).collect();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x: self.id,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }
}

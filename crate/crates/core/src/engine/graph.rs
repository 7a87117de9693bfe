use std::cell::RefCell;

use super::kernels::{self, ConvDims, Extent3, UpDims};
use super::{EngineError, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom node: maps the upstream gradient to
/// one gradient per input, in input order.
pub type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    UpConv { x: Var, w: Var, b: Option<Var>, dims: UpDims },
    AvgPool { x: Var, planes: usize, sp: Extent3, f: Extent3 },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Scale { x: Var, c: f64 },
    Offset(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SoftmaxChannels(Var),
    Concat { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Broadcast { x: Var },
    Reshape(Var),
    GlobalAvgPool(Var),
    Custom { inputs: Vec<Var>, vjp: Vjp },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. A fresh graph is built for every forward pass; nodes
/// are appended in application order, which is also a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn spatial3(shape: &[usize]) -> Extent3 {
    let sp = &shape[2..];
    let mut e = [1; 3];
    e[3 - sp.len()..].copy_from_slice(sp);
    e
}

fn shape_err(op: &'static str, detail: String) -> EngineError {
    EngineError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, EngineError> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, op, rg))
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    // ---- spatial primitives ----------------------------------------------

    /// Same-padded stride-1 convolution. `x: [N, Cin, S...]`,
    /// `w: [Cout, Cin, K...]` with odd kernel extents, `b: [Cout]`.
    pub fn conv(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let srank = xs.len().saturating_sub(2);
        if !(1..=3).contains(&srank) || ws.len() != xs.len() {
            return Err(shape_err("conv", format!("input {xs:?} / kernel {ws:?} rank mismatch")));
        }
        if ws[1] != xs[1] {
            return Err(shape_err("conv", format!("kernel expects {} input channels, input has {}", ws[1], xs[1])));
        }
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(shape_err("conv", format!("kernel extents {:?} must be odd", &ws[2..])));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(shape_err("conv", format!("bias {bs:?} does not match {} output channels", ws[0])));
            }
        }
        let dims = ConvDims {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            sp: spatial3(&xs),
            k: spatial3(&ws),
        };
        let out = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|b| nodes[b.0].value.data());
            kernels::conv_forward(nodes[x.0].value.data(), nodes[w.0].value.data(), bias, dims)
        };
        let mut os = xs.clone();
        os[1] = ws[0];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv", Tensor::new(os, out)?, Op::Conv { x, w, b, dims }, &inputs)
    }

    /// Transposed convolution with kernel equal to stride (factor-`k`
    /// upsampling). `w: [Cin, Cout, K...]`.
    pub fn conv_transpose(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let srank = xs.len().saturating_sub(2);
        if !(1..=3).contains(&srank) || ws.len() != xs.len() || ws[0] != xs[1] {
            return Err(shape_err("conv_transpose", format!("input {xs:?} incompatible with kernel {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("conv_transpose", format!("bias must have {} entries", ws[1])));
            }
        }
        let dims = UpDims {
            n: xs[0],
            cin: xs[1],
            cout: ws[1],
            sp: spatial3(&xs),
            f: spatial3(&ws),
        };
        let out = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|b| nodes[b.0].value.data());
            kernels::upconv_forward(nodes[x.0].value.data(), nodes[w.0].value.data(), bias, dims)
        };
        let mut os = xs.clone();
        os[1] = ws[1];
        for (o, k) in os[2..].iter_mut().zip(&ws[2..]) {
            *o *= k;
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv_transpose", Tensor::new(os, out)?, Op::UpConv { x, w, b, dims }, &inputs)
    }

    /// Average pooling by `factor` along every spatial axis.
    pub fn avg_pool(&self, x: Var, factor: usize) -> Result<Var, EngineError> {
        let xs = self.shape(x);
        if xs.len() < 3 || xs.len() > 5 {
            return Err(shape_err("avg_pool", format!("expected [N, C, S...], got {xs:?}")));
        }
        if factor == 0 || xs[2..].iter().any(|d| d % factor != 0) {
            return Err(shape_err("avg_pool", format!("spatial extents {:?} not divisible by {factor}", &xs[2..])));
        }
        let sp = spatial3(&xs);
        let mut f = [1; 3];
        for a in f.iter_mut().skip(5 - xs.len()) {
            *a = factor;
        }
        let planes = xs[0] * xs[1];
        let out = self.with_value(x, |t| kernels::avg_pool_forward(t.data(), planes, sp, f));
        let mut os = xs.clone();
        for d in &mut os[2..] {
            *d /= factor;
        }
        self.record("avg_pool", Tensor::new(os, out)?, Op::AvgPool { x, planes, sp, f }, &[x])
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear", format!("bias must have {} entries", ws[0])));
            }
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
            let bv = b.map(|b| nodes[b.0].value.data());
            let mut out = vec![0.0; n * fout];
            for i in 0..n {
                for o in 0..fout {
                    let dot: f64 = xv[i * fin..][..fin].iter().zip(&wv[o * fin..][..fin]).map(|(a, c)| a * c).sum();
                    out[i * fout + o] = dot + bv.map_or(0.0, |bv| bv[o]);
                }
            }
            out
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, &inputs)
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(&self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, EngineError> {
        let out = self.with_value(x, |t| t.map(f));
        self.record(name, out, op, &[x])
    }

    pub fn relu(&self, x: Var) -> Result<Var, EngineError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, EngineError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&self, x: Var) -> Result<Var, EngineError> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&self, x: Var) -> Result<Var, EngineError> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var, EngineError> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var, EngineError> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.unary("scale", x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.unary("add_scalar", x, |v| v + c, Op::Offset(x))
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, EngineError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(shape_err(name, format!("operands {:?} and {:?} differ", ta.shape(), tb.shape())));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.record(name, out, op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Max-shifted softmax along axis 1.
    pub fn softmax_channels(&self, x: Var) -> Result<Var, EngineError> {
        let out = self.with_value(x, |t| {
            let s = t.shape();
            if s.len() < 2 {
                return Err(shape_err("softmax_channels", format!("need a channel axis, got {s:?}")));
            }
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let mut out = t.clone();
            let d = out.data_mut();
            for b in 0..n {
                for p in 0..inner {
                    let idx = |ch: usize| (b * c + ch) * inner + p;
                    let m = (0..c).map(|ch| d[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for ch in 0..c {
                        let e = (d[idx(ch)] - m).exp();
                        d[idx(ch)] = e;
                        z += e;
                    }
                    for ch in 0..c {
                        d[idx(ch)] /= z;
                    }
                }
            }
            Ok(out)
        })?;
        self.record("softmax_channels", out, Op::SoftmaxChannels(x), &[x])
    }

    // ---- structural ------------------------------------------------------

    /// Concatenate along axis 1; all other extents must agree.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var, EngineError> {
        if parts.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if first.len() < 2 {
                return Err(shape_err("concat_channels", format!("need a channel axis, got {first:?}")));
            }
            let inner: usize = first[2..].iter().product();
            let mut total_c = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(shape_err("concat_channels", format!("{s:?} incompatible with {first:?}")));
                }
                total_c += s[1];
            }
            let n = first[0];
            let mut data = Vec::with_capacity(n * total_c * inner);
            for b in 0..n {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[b * c * inner..][..c * inner]);
                }
            }
            let mut shape = first;
            shape[1] = total_c;
            Tensor::new(shape, data)?
        };
        self.record("concat_channels", out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var, EngineError> {
        let out = self.with_value(x, |t| {
            let s = t.shape();
            if s.len() < 2 || len == 0 || start + len > s[1] {
                return Err(shape_err("slice_channels", format!("channels {start}..{} out of {s:?}", start + len)));
            }
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let mut data = Vec::with_capacity(n * len * inner);
            for b in 0..n {
                data.extend_from_slice(&t.data()[(b * c + start) * inner..][..len * inner]);
            }
            let mut shape = s.to_vec();
            shape[1] = len;
            Tensor::new(shape, data)
        })?;
        self.record("slice_channels", out, Op::SliceChannels { x, start }, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var, EngineError> {
        let v = self.with_value(x, |t| t.data().iter().sum::<f64>());
        self.record("sum", Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var, EngineError> {
        let v = self.with_value(x, |t| t.data().iter().sum::<f64>() / t.numel() as f64);
        self.record("mean", Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// `log Σ exp(x)` over all entries, max-shifted.
    pub fn log_sum_exp(&self, x: Var) -> Result<Var, EngineError> {
        let v = self.with_value(x, |t| log_sum_exp(t.data()));
        self.record("log_sum_exp", Tensor::scalar(v), Op::LogSumExp(x), &[x])
    }

    /// Expand unit extents to `shape` (ranks must match).
    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let out = self.with_value(x, |t| {
            let s = t.shape();
            if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
                return Err(shape_err("broadcast", format!("cannot expand {s:?} to {shape:?}")));
            }
            let strides = broadcast_strides(s);
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for_each_index(shape, |idx| {
                let off: usize = idx.iter().zip(&strides).map(|(i, st)| i * st).sum();
                data.push(t.data()[off]);
            });
            Tensor::new(shape.to_vec(), data)
        })?;
        self.record("broadcast", out, Op::Broadcast { x }, &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        self.record("reshape", out, Op::Reshape(x), &[x])
    }

    /// Mean over all spatial positions: `[N, C, S...] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, EngineError> {
        let out = self.with_value(x, |t| {
            let s = t.shape();
            if s.len() < 3 {
                return Err(shape_err("global_avg_pool", format!("expected [N, C, S...], got {s:?}")));
            }
            let inner: usize = s[2..].iter().product();
            let data = t.data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
            Tensor::new(vec![s[0], s[1]], data)
        })?;
        self.record("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// Node with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&self, name: &'static str, inputs: &[Var], value: Tensor, vjp: Vjp) -> Result<Var, EngineError> {
        self.record(name, value, Op::Custom { inputs: inputs.to_vec(), vjp }, inputs)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse sweep from scalar `loss`. Every trainable leaf gets a gradient;
    /// leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, EngineError> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(EngineError::InvalidArgument("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(EngineError::InvalidArgument(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shapes[loss.0], 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = local_grads(&nodes, node, &g)?;
            // Keep the gradient of interior nodes available to callers.
            grads[id] = Some(g);
            for (parent, pg) in contributions {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, EngineError> {
    let val = |v: Var| &nodes[v.0].value;
    let same = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
    let zip_map = |v: Var, f: &dyn Fn(f64, f64) -> f64| {
        same(v, val(v).data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect())
    };
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Conv { x, w, b, dims } => {
            let mut r = vec![];
            if nodes[x.0].requires_grad {
                r.push((*x, same(*x, kernels::conv_backward_input(g.data(), val(*w).data(), *dims))?));
            }
            if nodes[w.0].requires_grad {
                r.push((*w, same(*w, kernels::conv_backward_weight(g.data(), val(*x).data(), *dims))?));
            }
            if let Some(b) = b {
                r.push((*b, same(*b, kernels::channel_sums(g.data(), dims.n, dims.cout, kernels::volume(dims.sp)))?));
            }
            r
        }
        Op::UpConv { x, w, b, dims } => {
            let mut r = vec![];
            if nodes[x.0].requires_grad {
                r.push((*x, same(*x, kernels::upconv_backward_input(g.data(), val(*w).data(), *dims))?));
            }
            if nodes[w.0].requires_grad {
                r.push((*w, same(*w, kernels::upconv_backward_weight(g.data(), val(*x).data(), *dims))?));
            }
            if let Some(b) = b {
                let oplane = kernels::volume(dims.sp) * kernels::volume(dims.f);
                r.push((*b, same(*b, kernels::channel_sums(g.data(), dims.n, dims.cout, oplane))?));
            }
            r
        }
        Op::AvgPool { x, planes, sp, f } => {
            vec![(*x, same(*x, kernels::avg_pool_backward(g.data(), *planes, *sp, *f))?)]
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, fin) = (xv.shape()[0], xv.shape()[1]);
            let fout = wv.shape()[0];
            let gd = g.data();
            let mut gx = vec![0.0; n * fin];
            let mut gw = vec![0.0; fout * fin];
            for i in 0..n {
                for o in 0..fout {
                    let go = gd[i * fout + o];
                    for k in 0..fin {
                        gx[i * fin + k] += go * wv.data()[o * fin + k];
                        gw[o * fin + k] += go * xv.data()[i * fin + k];
                    }
                }
            }
            let mut r = vec![(*x, same(*x, gx)?), (*w, same(*w, gw)?)];
            if let Some(b) = b {
                let mut gb = vec![0.0; fout];
                for i in 0..n {
                    for o in 0..fout {
                        gb[o] += gd[i * fout + o];
                    }
                }
                r.push((*b, same(*b, gb)?));
            }
            r
        }
        Op::Relu(x) => vec![(*x, zip_map(*x, &|v, gv| if v > 0.0 { gv } else { 0.0 })?)],
        Op::Sigmoid(x) => {
            let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
            vec![(*x, same(*x, data)?)]
        }
        Op::Softplus(x) => vec![(*x, zip_map(*x, &|v, gv| gv * sigmoid(v))?)],
        Op::Exp(x) => {
            let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y).collect();
            vec![(*x, same(*x, data)?)]
        }
        Op::Log(x) => vec![(*x, zip_map(*x, &|v, gv| gv / v)?)],
        Op::Clamp { x, lo, hi } => {
            vec![(*x, zip_map(*x, &|v, gv| if v >= *lo && v <= *hi { gv } else { 0.0 })?)]
        }
        Op::Scale { x, c } => vec![(*x, g.map(|gv| gv * c))],
        Op::Offset(x) => vec![(*x, g.clone())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let ga = val(*b).data().iter().zip(g.data()).map(|(y, gv)| y * gv).collect();
            let gb = val(*a).data().iter().zip(g.data()).map(|(x, gv)| x * gv).collect();
            vec![(*a, same(*a, ga)?), (*b, same(*b, gb)?)]
        }
        Op::SoftmaxChannels(x) => {
            let s = out.shape();
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let (y, gd) = (out.data(), g.data());
            let mut gx = vec![0.0; y.len()];
            for b in 0..n {
                for p in 0..inner {
                    let idx = |ch: usize| (b * c + ch) * inner + p;
                    let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * y[idx(ch)]).sum();
                    for ch in 0..c {
                        gx[idx(ch)] = y[idx(ch)] * (gd[idx(ch)] - dot);
                    }
                }
            }
            vec![(*x, same(*x, gx)?)]
        }
        Op::Concat { parts } => {
            let s = out.shape();
            let (n, total_c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let mut r = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for p in parts {
                let c = val(*p).shape()[1];
                let mut data = Vec::with_capacity(n * c * inner);
                for b in 0..n {
                    data.extend_from_slice(&g.data()[(b * total_c + offset) * inner..][..c * inner]);
                }
                r.push((*p, same(*p, data)?));
                offset += c;
            }
            r
        }
        Op::SliceChannels { x, start } => {
            let xs = val(*x).shape();
            let (n, c) = (xs[0], xs[1]);
            let len = out.shape()[1];
            let inner: usize = xs[2..].iter().product();
            let mut data = vec![0.0; val(*x).numel()];
            for b in 0..n {
                data[(b * c + start) * inner..][..len * inner].copy_from_slice(&g.data()[b * len * inner..][..len * inner]);
            }
            vec![(*x, same(*x, data)?)]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
        }
        Op::LogSumExp(x) => {
            let l = out.item();
            vec![(*x, val(*x).map(|v| g.item() * (v - l).exp()))]
        }
        Op::Broadcast { x } => {
            let xs = val(*x).shape();
            let strides = broadcast_strides(xs);
            let mut data = vec![0.0; val(*x).numel()];
            let mut k = 0;
            for_each_index(out.shape(), |idx| {
                let off: usize = idx.iter().zip(&strides).map(|(i, st)| i * st).sum();
                data[off] += g.data()[k];
                k += 1;
            });
            vec![(*x, same(*x, data)?)]
        }
        Op::Reshape(x) => vec![(*x, g.clone().reshaped(val(*x).shape().to_vec())?)],
        Op::GlobalAvgPool(x) => {
            let xs = val(*x).shape();
            let inner: usize = xs[2..].iter().product();
            let mut data = Vec::with_capacity(val(*x).numel());
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv / inner as f64, inner));
            }
            vec![(*x, same(*x, data)?)]
        }
        Op::Custom { inputs, vjp } => {
            let gs = vjp(g);
            if gs.len() != inputs.len() {
                return Err(EngineError::InvalidState(format!(
                    "custom node returned {} gradients for {} inputs",
                    gs.len(),
                    inputs.len()
                )));
            }
            inputs.iter().copied().zip(gs).collect()
        }
    })
}

/// Row-major strides with zero stride on unit (broadcast) axes.
fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0; shape.len()];
    for _ in 0..n {
        f(&idx);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

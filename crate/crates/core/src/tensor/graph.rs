use crate::error::{contract, Error, Result};
use crate::quant::{quantize_point, WEIGHT_MAX_EPS};

use super::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits `(col_index, input_offset)` for every in-bounds tap of one sample.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for y in 0..self.oh {
                        let iy = (y * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for x in 0..self.ow {
                            let ix = (x * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * plane + y * self.ow + x,
                                (c * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|ci, xi| cols[ci] = sample[xi]);
    }

    fn col2im<T: Real>(&self, cols: &[T], sample_grad: &mut [T]) {
        self.for_each_tap(|ci, xi| sample_grad[xi] += cols[ci]);
    }
}

struct QuantWeightsSaved<T> {
    tanh: Vec<T>,
    /// 1 where the straight-through path is open, 0 where the output clipped.
    pass: Vec<T>,
    dk: Vec<T>,
    max: T,
    argmax: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Reshape(usize),
    MatMul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
        inner: usize,
    },
    ScaleChannels {
        x: usize,
        scale: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Relu(usize),
    Clip01(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    QuantWeights {
        w: usize,
        bits: usize,
        index: usize,
        saved: Option<QuantWeightsSaved<T>>,
    },
    QuantActivations {
        a: usize,
        bits: usize,
        index: usize,
        pass: Vec<T>,
        dk: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records forward operations in execution order; [`Graph::backward`]
/// replays them in reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn val(&self, v: usize) -> &Tensor<T> {
        &self.nodes[v].value
    }

    /// Records a leaf; it takes part in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a copy of a parameter tensor as a gradient-carrying leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let copy = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad: true,
        };
        self.push(copy, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    /// Gradient of the last backward pass; `None` for nodes that do not
    /// require gradients.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&self, x: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        self.val(x).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a.0, b.0)?;
        let mut out = self.val(a.0).clone();
        for (o, &y) in out.data.iter_mut().zip(&self.val(b.0).data) {
            *o += y;
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a.0, b.0)?;
        let mut out = self.val(a.0).clone();
        for (o, &y) in out.data.iter_mut().zip(&self.val(b.0).data) {
            *o *= y;
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.unary(x.0, |v| v * c);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).data.iter().copied().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.val(x.0).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.val(x.0).shape();
        let lead = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![lead, rest])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.val(a.0).data,
            false,
            &self.val(b.0).data,
            false,
            T::zero(),
            &mut out.data,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[batch, c, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.val(x.0).shape(), self.val(bias.0).shape());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(dim_err("add_bias", sx, sb));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.val(x.0).clone();
        let b = &self.val(bias.0).data;
        for (i, chunk) in out.data.chunks_mut(inner).enumerate() {
            let bc = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                inner,
            },
            rg,
        ))
    }

    /// Multiplies axis 1 of `x` (`[batch, c, ...]`) by `scale[c]`.
    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (sx, ss) = (self.val(x.0).shape(), self.val(scale.0).shape());
        if sx.len() < 2 || ss.len() != 1 || sx[1] != ss[0] {
            return Err(dim_err("scale_channels", sx, ss));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.val(x.0).clone();
        let sc = &self.val(scale.0).data;
        for (i, chunk) in out.data.chunks_mut(inner).enumerate() {
            let c = sc[i % channels];
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let rg = self.rg(x.0) || self.rg(scale.0);
        Ok(self.push(
            out,
            Op::ScaleChannels {
                x: x.0,
                scale: scale.0,
                inner,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x: [n, cin, h, w]` with `w: [cout, cin, kh, kw]`
    /// and zero padding, lowered to one GEMM per sample.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.val(x.0).shape(), self.val(w.0).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(dim_err("conv2d", sx, sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(dim_err("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, plane) = (geom.patch(), geom.out_plane());
        let keep_cols = self.rg(w.0);
        let mut cols = vec![
            T::zero();
            if keep_cols {
                batch * patch * plane
            } else {
                patch * plane
            }
        ];
        let mut out = Tensor::zeros([batch, cout, geom.oh, geom.ow]);
        let xs = &self.val(x.0).data;
        let ws = &self.val(w.0).data;
        let sample = cin * h * wd;
        for n in 0..batch {
            let col = if keep_cols {
                &mut cols[n * patch * plane..(n + 1) * patch * plane]
            } else {
                &mut cols[..]
            };
            geom.im2col(&xs[n * sample..(n + 1) * sample], col);
            T::gemm(
                cout,
                patch,
                plane,
                ws,
                false,
                col,
                false,
                T::zero(),
                &mut out.data[n * cout * plane..(n + 1) * cout * plane],
            );
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.val(x.0).shape();
        if sx.len() != 4 || !sx[2].is_multiple_of(2) || !sx[3].is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "maxpool2 needs [n, c, even h, even w], got {sx:?}"
            )));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([sx[0], sx[1], oh, ow]);
        let mut argmax = vec![0u32; nc * oh * ow];
        let xs = &self.val(x.0).data;
        for p in 0..nc {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out.data[o] = xs[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::MaxPool2 { x: x.0, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.unary(x.0, |v| v.max(T::zero()));
        let rg = self.rg(x.0);
        self.push(out, Op::Relu(x.0), rg)
    }

    /// `clip(x, 0, 1)`, the bounded nonlinearity of the quantized network.
    pub fn clip01(&mut self, x: Var) -> Var {
        let out = self.unary(x.0, |v| v.max(T::zero()).min(T::one()));
        let rg = self.rg(x.0);
        self.push(out, Op::Clip01(x.0), rg)
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.val(logits.0).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = self.val(logits.0).data.clone();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
            loss -= row[label].ln();
        }
        let loss = loss / T::lit(batch as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn bit_width(&self, bits: usize, index: usize) -> Result<T> {
        let b = &self.val(bits).data;
        let k = *b
            .get(index)
            .ok_or_else(|| contract(format!("bit index {index} out of {} layers", b.len())))?;
        if !(k > T::zero()) || !k.is_finite() {
            return Err(contract(format!("layer {index} has non-positive bit width {k}")));
        }
        Ok(k)
    }

    /// DoReFa weight quantization with the width read from `bits[index]`.
    /// Gradients reach both `w` and `bits`.
    pub fn quantize_weights(&mut self, w: Var, bits: Var, index: usize) -> Result<Var> {
        let k = self.bit_width(bits.0, index)?;
        let wv = self.val(w.0);
        let tanh: Vec<T> = wv.data.iter().map(|x| x.tanh()).collect();
        let (argmax, max) = tanh
            .iter()
            .map(|t| t.abs())
            .enumerate()
            .fold((0, T::zero()), |best, (i, a)| if a > best.1 { (i, a) } else { best });
        let rg = self.rg(w.0) || self.rg(bits.0);
        if max < T::lit(WEIGHT_MAX_EPS) {
            let out = Tensor::zeros(wv.shape());
            let op = Op::QuantWeights {
                w: w.0,
                bits: bits.0,
                index,
                saved: None,
            };
            return Ok(self.push(out, op, rg));
        }
        let (half, two) = (T::lit(0.5), T::lit(2.0));
        let n = tanh.len();
        let mut out = Tensor::zeros(wv.shape());
        let mut pass = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        for i in 0..n {
            let r = (tanh[i] / (two * max) + half).max(T::zero()).min(T::one());
            let q = quantize_point(r, k);
            out.data[i] = two * q.value - T::one();
            pass[i] = if q.clipped { T::zero() } else { T::one() };
            dk[i] = q.dk;
        }
        let op = Op::QuantWeights {
            w: w.0,
            bits: bits.0,
            index,
            saved: Some(QuantWeightsSaved {
                tanh,
                pass,
                dk,
                max,
                argmax,
            }),
        };
        Ok(self.push(out, op, rg))
    }

    /// Clip-to-`[0, 1]` activation quantization with the width read from `bits[index]`.
    pub fn quantize_activations(&mut self, a: Var, bits: Var, index: usize) -> Result<Var> {
        let k = self.bit_width(bits.0, index)?;
        let av = self.val(a.0);
        let n = av.numel();
        let mut out = Tensor::zeros(av.shape());
        let mut pass = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        for (i, &x) in av.data.iter().enumerate() {
            let inside = x >= T::zero() && x <= T::one();
            let q = quantize_point(x.max(T::zero()).min(T::one()), k);
            out.data[i] = q.value;
            pass[i] = if inside && !q.clipped { T::one() } else { T::zero() };
            dk[i] = q.dk;
        }
        let rg = self.rg(a.0) || self.rg(bits.0);
        let op = Op::QuantActivations {
            a: a.0,
            bits: bits.0,
            index,
            pass,
            dk,
        };
        Ok(self.push(out, op, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of earlier passes
    /// are discarded; every gradient-carrying node ends up with a buffer
    /// (all zeros if the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(contract("loss is not a node of this graph"));
        }
        if self.val(loss.0).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss.0).shape()
            )));
        }
        self.grads = (0..n).map(|_| None).collect();
        if !self.rg(loss.0) {
            return self.fill_zero_grads();
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        self.fill_zero_grads()
    }

    fn fill_zero_grads(&mut self) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }
}

/// Returns the gradient buffer of `idx` if it participates in backward.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], idx: usize) -> Option<&'a mut [T]> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let value = |j: usize| &nodes[j].value.data;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(s) = slot(nodes, grads, p) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::Mul(a, b) => {
            for (p, other) in [(*a, *b), (*b, *a)] {
                let ov = value(other);
                if let Some(s) = slot(nodes, grads, p) {
                    for ((s, &g), &o) in s.iter_mut().zip(g).zip(ov) {
                        *s += g * o;
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c);
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[*a].requires_grad {
                let bv = value(*b);
                let s = slot(nodes, grads, *a).expect("requires grad");
                // dA = dC * B^T
                T::gemm(m, n, k, g, false, bv, true, T::one(), s);
            }
            if nodes[*b].requires_grad {
                let av = value(*a);
                let s = slot(nodes, grads, *b).expect("requires grad");
                // dB = A^T * dC
                T::gemm(k, m, n, av, true, g, false, T::one(), s);
            }
        }
        Op::AddBias { x, bias, inner } => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
            let channels = nodes[*bias].value.numel();
            if let Some(s) = slot(nodes, grads, *bias) {
                for (j, chunk) in g.chunks(*inner).enumerate() {
                    s[j % channels] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        Op::ScaleChannels { x, scale, inner } => {
            let channels = nodes[*scale].value.numel();
            let sc = value(*scale);
            if let Some(s) = slot(nodes, grads, *x) {
                for (j, (sc_chunk, g_chunk)) in s.chunks_mut(*inner).zip(g.chunks(*inner)).enumerate() {
                    let c = sc[j % channels];
                    sc_chunk.iter_mut().zip(g_chunk).for_each(|(s, &g)| *s += g * c);
                }
            }
            let xs = value(*x);
            if let Some(s) = slot(nodes, grads, *scale) {
                for (j, (x_chunk, g_chunk)) in xs.chunks(*inner).zip(g.chunks(*inner)).enumerate() {
                    s[j % channels] += x_chunk.iter().zip(g_chunk).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (patch, plane) = (geom.patch(), geom.out_plane());
            let out_sample = geom.cout * plane;
            if nodes[*w].requires_grad {
                let s = slot(nodes, grads, *w).expect("requires grad");
                for n in 0..geom.batch {
                    T::gemm(
                        geom.cout,
                        plane,
                        patch,
                        &g[n * out_sample..(n + 1) * out_sample],
                        false,
                        &cols[n * patch * plane..(n + 1) * patch * plane],
                        true,
                        T::one(),
                        s,
                    );
                }
            }
            if nodes[*x].requires_grad {
                let wv = value(*w);
                let in_sample = geom.cin * geom.h * geom.w;
                let mut dcols = vec![T::zero(); patch * plane];
                let s = slot(nodes, grads, *x).expect("requires grad");
                for n in 0..geom.batch {
                    T::gemm(
                        patch,
                        geom.cout,
                        plane,
                        wv,
                        true,
                        &g[n * out_sample..(n + 1) * out_sample],
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    geom.col2im(&dcols, &mut s[n * in_sample..(n + 1) * in_sample]);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (&src, &g) in argmax.iter().zip(g) {
                    s[src as usize] += g;
                }
            }
        }
        Op::Relu(x) => {
            let xv = value(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, &g), &v) in s.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *s += g;
                    }
                }
            }
        }
        Op::Clip01(x) => {
            let xv = value(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, &g), &v) in s.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() && v < T::one() {
                        *s += g;
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let classes = nodes[*logits].value.shape()[1];
            let scale = g[0] / T::lit(labels.len() as f64);
            if let Some(s) = slot(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        s[r * classes + c] += (probs[r * classes + c] - onehot) * scale;
                    }
                }
            }
        }
        Op::QuantWeights { w, bits, index, saved } => {
            let Some(sv) = saved else { return };
            let two = T::lit(2.0);
            if let Some(s) = slot(nodes, grads, *bits) {
                let dk: T = g.iter().zip(&sv.dk).map(|(&g, &d)| two * g * d).sum();
                s[*index] += dk;
            }
            if let Some(s) = slot(nodes, grads, *w) {
                // out = 2 q(r) - 1, r = t / (2m) + 1/2, m = |t[argmax]|, t = tanh(w)
                let inv = T::one() / (two * sv.max);
                let mut dmax = T::zero();
                let mut dt: Vec<T> = Vec::with_capacity(g.len());
                for ((&g, &p), &t) in g.iter().zip(&sv.pass).zip(&sv.tanh) {
                    let dr = two * g * p;
                    dt.push(dr * inv);
                    dmax -= dr * t * inv / sv.max;
                }
                let ta = sv.tanh[sv.argmax];
                dt[sv.argmax] += if ta >= T::zero() { dmax } else { -dmax };
                for ((s, d), &t) in s.iter_mut().zip(dt).zip(&sv.tanh) {
                    *s += d * (T::one() - t * t);
                }
            }
        }
        Op::QuantActivations {
            a,
            bits,
            index,
            pass,
            dk,
        } => {
            if let Some(s) = slot(nodes, grads, *bits) {
                s[*index] += g.iter().zip(dk).map(|(&g, &d)| g * d).sum::<T>();
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &p) in s.iter_mut().zip(g).zip(pass) {
                    *s += g * p;
                }
            }
        }
    }
}

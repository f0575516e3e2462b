//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are created in
//! topological order, so backward is a single reverse sweep. A node requires a
//! gradient only if one of its inputs does; parameters marked frozen enter the
//! tape as constants, which means no gradient buffer is ever allocated for them.

use std::collections::HashMap;

use crate::error::{arg_err, dim_err, Result, TensorError};
use crate::kernels::{self, LayerNormCache, Window};
use crate::param::{ParamId, Parameter};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        window: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        window: Window,
    },
    Conv1dChannel {
        x: Var,
        w: Var,
    },
    LayerNorm2d {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache<T>,
    },
    GlobalAvgPool(Var),
    ChannelGate {
        x: Var,
        gate: Var,
    },
    ConcatChannels(Var, Var),
    AddBroadcast {
        x: Var,
        p: Var,
    },
    Stack(Vec<Var>),
    IndexRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxRows(Var),
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
    },
    SoftDice {
        logits: Var,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Smoothing constant of the soft-Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input that accumulates a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter. Repeated binds return the same node; frozen
    /// parameters become constants.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, !p.is_frozen());
        self.params.insert(p.id(), v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lift(c);
        let v = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lift(c);
        let v = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let v = Tensor::scalar(T::lift(t.sum().as_f64() / n));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return dim_err("transpose", format!("expected rank 2, got {:?}", t.shape()));
        }
        let v = transpose2d(t);
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return dim_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, ta.data(), tb.data(), T::zero(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    /// `x·wᵀ + b` with `x: [B,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(1) {
            return dim_err("linear", format!("input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let (batch, fin, fout) = (tx.dim(0), tx.dim(1), tw.dim(0));
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return dim_err("linear", format!("bias {:?}, expected [{}]", self.shape(b), fout));
            }
        }
        let mut out = vec![T::zero(); batch * fout];
        gemm(false, true, batch, fout, fin, tx.data(), tw.data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let v = Tensor::new(vec![batch, fout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation, `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return dim_err("conv2d", format!("input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let (batch, cin, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (cout, wcin, k, k2) = (tw.dim(0), tw.dim(1), tw.dim(2), tw.dim(3));
        if wcin != cin {
            return dim_err("conv2d", format!("input has {} channels, weight expects {}", cin, wcin));
        }
        if k != k2 || k % 2 == 0 {
            return arg_err("conv2d", format!("kernel must be square and odd, got {}x{}", k, k2));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err("conv2d", format!("bias {:?}, expected [{}]", self.shape(b), cout));
            }
        }
        let Some(window) = Window::new(cin, h, wd, k, stride, padding) else {
            return arg_err("conv2d", "kernel larger than padded input or zero stride");
        };
        let out = kernels::conv2d_forward(
            tx.data(),
            batch,
            &window,
            tw.data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(vec![batch, cout, window.out_height, window.out_width], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(v, Op::Conv2d { x, w, b, window }, rg))
    }

    /// Transposed convolution, `x: [B,Cin,H,W]`, `w: [Cin,Cout,k,k]`; output
    /// side is `(H-1)·stride - 2·padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return dim_err("conv_transpose2d", format!("input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let (batch, cin, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (wcin, cout, k, k2) = (tw.dim(0), tw.dim(1), tw.dim(2), tw.dim(3));
        if wcin != cin {
            return dim_err(
                "conv_transpose2d",
                format!("input has {} channels, weight expects {}", cin, wcin),
            );
        }
        if k != k2 || stride == 0 {
            return arg_err("conv_transpose2d", "kernel must be square and stride positive");
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * padding);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return arg_err("conv_transpose2d", "padding too large");
        };
        let window = match Window::new(cout, oh, ow, k, stride, padding) {
            Some(g) if g.out_height == h && g.out_width == wd => g,
            _ => return arg_err("conv_transpose2d", "inconsistent geometry"),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err("conv_transpose2d", format!("bias {:?}, expected [{}]", self.shape(b), cout));
            }
        }
        let out = kernels::conv_transpose2d_forward(
            tx.data(),
            batch,
            cin,
            &window,
            tw.data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, window }, rg))
    }

    /// Zero-padded 1-D convolution across channels of a `[B,C]` descriptor
    /// with an odd kernel `w: [1,1,k]`.
    pub fn conv1d_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 {
            return dim_err("conv1d_channel", format!("descriptor must be [B,C], got {:?}", tx.shape()));
        }
        if tw.rank() != 3 || tw.dim(0) != 1 || tw.dim(1) != 1 {
            return dim_err("conv1d_channel", format!("weight must be [1,1,k], got {:?}", tw.shape()));
        }
        let (batch, channels, k) = (tx.dim(0), tx.dim(1), tw.dim(2));
        if k % 2 == 0 {
            return arg_err("conv1d_channel", format!("kernel size {} is even", k));
        }
        if k > channels {
            return arg_err("conv1d_channel", format!("kernel size {} exceeds {} channels", k, channels));
        }
        let out = kernels::conv1d_channel_forward(tx.data(), batch, channels, tw.data());
        let v = Tensor::new(vec![batch, channels], out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(v, Op::Conv1dChannel { x, w }, rg))
    }

    /// Normalises each spatial position across channels, then applies a
    /// per-channel affine map.
    pub fn layer_norm_2d(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return arg_err("layer_norm_2d", "eps must be positive");
        }
        let tx = self.value(x);
        if tx.rank() != 4 {
            return dim_err("layer_norm_2d", format!("expected [B,C,H,W], got {:?}", tx.shape()));
        }
        let (batch, channels) = (tx.dim(0), tx.dim(1));
        let plane = tx.dim(2) * tx.dim(3);
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            return dim_err(
                "layer_norm_2d",
                format!("affine shapes {:?}/{:?} for {} channels", self.shape(gain), self.shape(bias), channels),
            );
        }
        let (out, cache) = kernels::layer_norm_2d_forward(
            tx.data(),
            batch,
            channels,
            plane,
            self.value(gain).data(),
            self.value(bias).data(),
            T::lift(eps),
        );
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm2d { x, gain, bias, cache }, rg))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return dim_err("global_avg_pool", format!("expected [B,C,H,W], got {:?}", tx.shape()));
        }
        let (batch, channels) = (tx.dim(0), tx.dim(1));
        let plane = tx.dim(2) * tx.dim(3);
        let inv = 1.0 / plane as f64;
        let data = tx
            .data()
            .chunks(plane)
            .map(|c| T::lift(c.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        let v = Tensor::new(vec![batch, channels], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    /// Multiplies each `[H,W]` plane of `x: [B,C,H,W]` by `gate[b,c]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gate));
        if tx.rank() != 4 || tg.shape() != [tx.dim(0), tx.dim(1)] {
            return dim_err("channel_gate", format!("input {:?}, gate {:?}", tx.shape(), tg.shape()));
        }
        let plane = tx.dim(2) * tx.dim(3);
        let mut data = tx.data().to_vec();
        for (chunk, &g) in data.chunks_mut(plane).zip(tg.data()) {
            chunk.iter_mut().for_each(|v| *v = *v * g);
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(v, Op::ChannelGate { x, gate }, rg))
    }

    /// Concatenates `[B,Ca,H,W]` and `[B,Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 4 || tb.rank() != 4 || ta.dim(0) != tb.dim(0) || ta.shape()[2..] != tb.shape()[2..] {
            return dim_err("concat_channels", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let batch = ta.dim(0);
        let sa = ta.len() / batch.max(1);
        let sb = tb.len() / batch.max(1);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..batch {
            data.extend_from_slice(&ta.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&tb.data()[i * sb..(i + 1) * sb]);
        }
        let shape = vec![batch, ta.dim(1) + tb.dim(1), ta.dim(2), ta.dim(3)];
        let v = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::ConcatChannels(a, b), rg))
    }

    /// `x[B, ...] + p[...]`, broadcasting `p` over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(p));
        if tx.rank() < 1 || tx.shape()[1..] != *tp.shape() {
            return dim_err("add_broadcast", format!("{:?} + {:?}", tx.shape(), tp.shape()));
        }
        let inner = tp.len();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(inner.max(1)) {
            for (a, &b) in chunk.iter_mut().zip(tp.data()) {
                *a += b;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, p]);
        Ok(self.push(v, Op::AddBroadcast { x, p }, rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = items.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::stack(&tensors)?;
        let rg = self.any_grad(items);
        Ok(self.push(v, Op::Stack(items.to_vec()), rg))
    }

    /// Gathers rows of a rank-2 node.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return dim_err("index_rows", format!("expected rank 2, got {:?}", tx.shape()));
        }
        let (r, d) = (tx.dim(0), tx.dim(1));
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= r {
                return arg_err("index_rows", format!("row {} out of {}", i, r));
            }
            data.extend_from_slice(&tx.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            v,
            Op::IndexRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return dim_err("softmax_rows", format!("expected rank 2, got {:?}", tx.shape()));
        }
        let n = tx.dim(1);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::SoftmaxRows(x), rg))
    }

    /// Mean binary cross-entropy of logits against a {0,1} target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != target.shape() {
            return dim_err("bce_with_logits", format!("{:?} vs {:?}", tl.shape(), target.shape()));
        }
        let n = tl.len().max(1) as f64;
        let total: f64 = tl
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| {
                let (x, t) = (x.as_f64(), t.as_f64());
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let v = Tensor::scalar(T::lift(total / n));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            v,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `1 - mean_b dice_b` where `dice_b = (2·Σpt + s) / (Σp + Σt + s)` over
    /// each sample's pixels with `p = sigmoid(logit)`.
    pub fn soft_dice(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != target.shape() || tl.rank() < 1 {
            return dim_err("soft_dice", format!("{:?} vs {:?}", tl.shape(), target.shape()));
        }
        let batch = tl.dim(0).max(1);
        let per = tl.len() / batch;
        let mut dice_sum = 0.0;
        for b in 0..batch {
            let (inter, ps, ts) = dice_terms(&tl.data()[b * per..(b + 1) * per], &target.data()[b * per..(b + 1) * per]);
            dice_sum += (2.0 * inter + DICE_SMOOTH) / (ps + ts + DICE_SMOOTH);
        }
        let v = Tensor::scalar(T::lift(1.0 - dice_sum / batch as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            v,
            Op::SoftDice {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.dim(0) != labels.len() {
            return dim_err("cross_entropy", format!("logits {:?}, {} labels", tl.shape(), labels.len()));
        }
        let k = tl.dim(1);
        let mut total = 0.0;
        for (row, &y) in tl.data().chunks(k.max(1)).zip(labels) {
            if y >= k {
                return arg_err("cross_entropy", format!("label {} out of {} classes", y, k));
            }
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            total += lse - row[y].as_f64();
        }
        let v = Tensor::scalar(T::lift(total / labels.len().max(1) as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(TensorError::NonFiniteLoss(lv.item().as_f64()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_with(g, vb, |x, y| x * y));
                self.acc(grads, *b, || zip_with(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g.map(|v| v * *c)),
            Op::AddScalar(a) => self.acc(grads, *a, || g.clone()),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    zip_with(g, va, |gv, x| if x > T::zero() { gv } else { T::zero() })
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc(grads, *a, || zip_with(g, y, |gv, s| gv * s * (T::one() - s)));
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.acc(grads, *a, || zip_with(g, y, |gv, e| gv * e));
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let two = T::lift(2.0);
                self.acc(grads, *a, || zip_with(g, va, |gv, x| two * gv * x));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, || Tensor::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::lift(self.value(*a).len().max(1) as f64);
                self.acc(grads, *a, || Tensor::full(shape, g.item() / n));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, || g.clone().reshape(shape).expect("same numel"));
            }
            Op::Transpose(a) => self.acc(grads, *a, || transpose2d(g)),
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                self.acc(grads, *a, || {
                    let mut out = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, gd, vb.data(), T::zero(), &mut out);
                    Tensor::new(vec![m, k], out).expect("shape")
                });
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, va.data(), gd, T::zero(), &mut out);
                    Tensor::new(vec![k, n], out).expect("shape")
                });
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, fin, fout) = (vx.dim(0), vx.dim(1), vw.dim(0));
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); batch * fin];
                    gemm(false, false, batch, fin, fout, gd, vw.data(), T::zero(), &mut out);
                    Tensor::new(vec![batch, fin], out).expect("shape")
                });
                self.acc(grads, *w, || {
                    let mut out = vec![T::zero(); fout * fin];
                    gemm(true, false, fout, fin, batch, gd, vx.data(), T::zero(), &mut out);
                    Tensor::new(vec![fout, fin], out).expect("shape")
                });
                if let Some(b) = b {
                    self.acc(grads, *b, || {
                        let mut out = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (o, &v) in out.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Tensor::new(vec![fout], out).expect("shape")
                    });
                }
            }
            Op::Conv2d { x, w, b, window } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = self.want(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = self.want(*w).then(|| vec![T::zero(); vw.len()]);
                let mut gb = b.filter(|b| self.want(*b)).map(|b| vec![T::zero(); self.value(b).len()]);
                kernels::conv2d_backward(
                    vx.data(),
                    vx.dim(0),
                    window,
                    vw.data(),
                    vw.dim(0),
                    gd,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.acc_raw(grads, *x, gx);
                self.acc_raw(grads, *w, gw);
                if let Some(b) = b {
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, window } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = self.want(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = self.want(*w).then(|| vec![T::zero(); vw.len()]);
                let mut gb = b.filter(|b| self.want(*b)).map(|b| vec![T::zero(); self.value(b).len()]);
                kernels::conv_transpose2d_backward(
                    vx.data(),
                    vx.dim(0),
                    vx.dim(1),
                    window,
                    vw.data(),
                    gd,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.acc_raw(grads, *x, gx);
                self.acc_raw(grads, *w, gw);
                if let Some(b) = b {
                    self.acc_raw(grads, *b, gb);
                }
            }
            Op::Conv1dChannel { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, channels) = (vx.dim(0), vx.dim(1));
                let k = vw.len();
                let pad = (k - 1) / 2;
                let mut gx = vec![T::zero(); vx.len()];
                let mut gw = vec![T::zero(); k];
                for bi in 0..batch {
                    for c in 0..channels {
                        let gy = gd[bi * channels + c];
                        for j in 0..k {
                            let src = c as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < channels {
                                let s = bi * channels + src as usize;
                                gx[s] += vw.data()[j] * gy;
                                gw[j] += vx.data()[s] * gy;
                            }
                        }
                    }
                }
                self.acc(grads, *x, || Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
                self.acc(grads, *w, || Tensor::new(vw.shape().to_vec(), gw).expect("shape"));
            }
            Op::LayerNorm2d { x, gain, bias, cache } => {
                let vx = self.value(*x);
                let (batch, channels) = (vx.dim(0), vx.dim(1));
                let plane = vx.dim(2) * vx.dim(3);
                let gain_v = self.value(*gain).data();
                let mut ggain = vec![T::zero(); channels];
                let mut gbias = vec![T::zero(); channels];
                let mut gx = vec![T::zero(); vx.len()];
                let inv_c = T::one() / T::lift(channels as f64);
                for bi in 0..batch {
                    let base = bi * channels * plane;
                    for p in 0..plane {
                        let rstd = cache.inv_std[bi * plane + p];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..channels {
                            let idx = base + c * plane + p;
                            let xh = cache.normalized[idx];
                            let gy = gd[idx];
                            ggain[c] += gy * xh;
                            gbias[c] += gy;
                            let dxh = gy * gain_v[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh = mean_dxh * inv_c;
                        mean_dxh_xh = mean_dxh_xh * inv_c;
                        for c in 0..channels {
                            let idx = base + c * plane + p;
                            let xh = cache.normalized[idx];
                            let dxh = gd[idx] * gain_v[c];
                            gx[idx] = rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                self.acc(grads, *x, || Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
                self.acc(grads, *gain, || Tensor::new(vec![channels], ggain).expect("shape"));
                self.acc(grads, *bias, || Tensor::new(vec![channels], gbias).expect("shape"));
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let plane = vx.dim(2) * vx.dim(3);
                let inv = T::one() / T::lift(plane as f64);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); vx.len()];
                    for (chunk, &gv) in out.chunks_mut(plane).zip(gd) {
                        chunk.iter_mut().for_each(|v| *v = gv * inv);
                    }
                    Tensor::new(vx.shape().to_vec(), out).expect("shape")
                });
            }
            Op::ChannelGate { x, gate } => {
                let (vx, vg) = (self.value(*x), self.value(*gate));
                let plane = vx.dim(2) * vx.dim(3);
                self.acc(grads, *x, || {
                    let mut out = gd.to_vec();
                    for (chunk, &gv) in out.chunks_mut(plane).zip(vg.data()) {
                        chunk.iter_mut().for_each(|v| *v = *v * gv);
                    }
                    Tensor::new(vx.shape().to_vec(), out).expect("shape")
                });
                self.acc(grads, *gate, || {
                    let data = gd
                        .chunks(plane)
                        .zip(vx.data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    Tensor::new(vg.shape().to_vec(), data).expect("shape")
                });
            }
            Op::ConcatChannels(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let batch = va.dim(0).max(1);
                let sa = va.len() / batch;
                let sb = vb.len() / batch;
                self.acc(grads, *a, || {
                    let mut out = Vec::with_capacity(va.len());
                    for i in 0..batch {
                        out.extend_from_slice(&gd[i * (sa + sb)..i * (sa + sb) + sa]);
                    }
                    Tensor::new(va.shape().to_vec(), out).expect("shape")
                });
                self.acc(grads, *b, || {
                    let mut out = Vec::with_capacity(vb.len());
                    for i in 0..batch {
                        out.extend_from_slice(&gd[i * (sa + sb) + sa..(i + 1) * (sa + sb)]);
                    }
                    Tensor::new(vb.shape().to_vec(), out).expect("shape")
                });
            }
            Op::AddBroadcast { x, p } => {
                self.acc(grads, *x, || g.clone());
                let vp = self.value(*p);
                self.acc(grads, *p, || {
                    let mut out = vec![T::zero(); vp.len()];
                    for chunk in gd.chunks(vp.len().max(1)) {
                        for (o, &v) in out.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    Tensor::new(vp.shape().to_vec(), out).expect("shape")
                });
            }
            Op::Stack(items) => {
                for (i, item) in items.iter().enumerate() {
                    let vi = self.value(*item);
                    let n = vi.len();
                    self.acc(grads, *item, || {
                        Tensor::new(vi.shape().to_vec(), gd[i * n..(i + 1) * n].to_vec()).expect("shape")
                    });
                }
            }
            Op::IndexRows { x, rows } => {
                let vx = self.value(*x);
                let d = vx.dim(1);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); vx.len()];
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            out[r * d + c] += gd[j * d + c];
                        }
                    }
                    Tensor::new(vx.shape().to_vec(), out).expect("shape")
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.dim(1).max(1);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); y.len()];
                    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    Tensor::new(y.shape().to_vec(), out).expect("shape")
                });
            }
            Op::BceWithLogits { logits, target } => {
                let vl = self.value(*logits);
                let scale = g.item() / T::lift(vl.len().max(1) as f64);
                self.acc(grads, *logits, || zip_with(vl, target, |x, t| (sigmoid(x) - t) * scale));
            }
            Op::SoftDice { logits, target } => {
                let vl = self.value(*logits);
                let batch = vl.dim(0).max(1);
                let per = vl.len() / batch;
                let upstream = g.item().as_f64();
                self.acc(grads, *logits, || {
                    let mut out = vec![T::zero(); vl.len()];
                    for b in 0..batch {
                        let xs = &vl.data()[b * per..(b + 1) * per];
                        let ts = &target.data()[b * per..(b + 1) * per];
                        let (inter, psum, tsum) = dice_terms(xs, ts);
                        let den = psum + tsum + DICE_SMOOTH;
                        let num = 2.0 * inter + DICE_SMOOTH;
                        for (i, (&x, &t)) in xs.iter().zip(ts).enumerate() {
                            let p = sigmoid(x.as_f64());
                            let ddice_dp = (2.0 * t.as_f64() * den - num) / (den * den);
                            let v = -upstream / batch as f64 * ddice_dp * p * (1.0 - p);
                            out[b * per + i] = T::lift(v);
                        }
                    }
                    Tensor::new(vl.shape().to_vec(), out).expect("shape")
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let vl = self.value(*logits);
                let k = vl.dim(1).max(1);
                let scale = g.item() / T::lift(labels.len().max(1) as f64);
                self.acc(grads, *logits, || {
                    let mut out = vl.data().to_vec();
                    for (row, &y) in out.chunks_mut(k).zip(labels) {
                        softmax_in_place(row);
                        row[y] = row[y] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    Tensor::new(vl.shape().to_vec(), out).expect("shape")
                });
            }
        }
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: impl FnOnce() -> Tensor<T>) {
        if !self.want(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }

    fn acc_raw(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Option<Vec<T>>) {
        if let Some(d) = data {
            let shape = self.shape(v).to_vec();
            self.acc(grads, v, || Tensor::new(shape, d).expect("shape"));
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of any node, `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound parameter. Frozen or unbound parameters have none.
    pub fn param(&self, p: &Parameter<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|&v| self.get(v))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn dice_terms<T: Scalar>(logits: &[T], target: &[T]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut ps = 0.0;
    let mut ts = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x.as_f64());
        let t = t.as_f64();
        inter += p * t;
        ps += p;
        ts += t;
    }
    (inter, ps, ts)
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn transpose2d<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.dim(0), t.dim(1));
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape")
}

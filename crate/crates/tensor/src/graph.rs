//! Dynamic computation graph with reverse-mode accumulation.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and `backward` is a single reverse sweep. Leaf nodes
//! carry the gradient slot; calling `backward` twice without `zero_grad`
//! adds the gradients twice.

use crate::kernel::gemm;
use crate::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let positions = self.positions();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width;
                            cols[row * positions + oy * self.out_w + ox] = if inside {
                                x[(ci * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let positions = self.positions();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            dx[(ci * self.height + iy as usize) * self.width + ix as usize] +=
                                cols[row * positions + oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Gelu {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    PrependToken {
        x: NodeId,
        token: NodeId,
        batch: usize,
        tokens: usize,
        width: usize,
    },
    SelectToken {
        x: NodeId,
        index: usize,
        batch: usize,
        tokens: usize,
        width: usize,
    },
    SplitHeads {
        x: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        dim: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        dim: usize,
    },
    ChannelsToTokens {
        x: NodeId,
        batch: usize,
        channels: usize,
        positions: usize,
    },
    Reshape {
        a: NodeId,
    },
    RepeatRows {
        a: NodeId,
        times: usize,
        cols: usize,
    },
    Gather {
        a: NodeId,
        index: Vec<usize>,
        cols: usize,
    },
    Dueling {
        value: NodeId,
        advantage: NodeId,
        actions: usize,
    },
    Huber {
        a: NodeId,
        delta: f64,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    QuantileHuber {
        pred: NodeId,
        target: Vec<f64>,
        taus: Vec<f64>,
        batch: usize,
        n: usize,
        n_target: usize,
        kappa: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of tensor operations. Rebuilt for every forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated on a leaf by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Trainable leaf; receives gradients.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let mut value = value;
        value.zero_grad();
        self.push(Op::Leaf { trainable: true }, value, &[])
    }

    /// Non-trainable leaf (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let mut value = value;
        value.zero_grad();
        self.push(Op::Leaf { trainable: false }, value, &[])
    }

    /// Plain 2-D product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value, &[a, b]))
    }

    /// Affine map over the last dimension: `x[..., k] . w[k, n] + bias[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != k {
            return Err(mismatch("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(mismatch("linear.bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * n];
        if let Some(b) = bias {
            let bd = self.data(b);
            out.chunks_mut(n).for_each(|row| row.copy_from_slice(bd));
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(rows, k, n, self.data(x), false, self.data(w), false, beta, &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Linear { x, w, bias, rows, k, n }, value, &inputs))
    }

    /// Batched product over the last two dimensions; leading dimensions must
    /// agree. With `trans_b` the right operand is stored as `[..., n, k]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            value,
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn elementwise2(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(op, value, &[a, b])
    }

    fn elementwise1(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(op, value, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.elementwise2(Op::Add { a, b }, a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.elementwise2(Op::Sub { a, b }, a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.elementwise2(Op::Mul { a, b }, a, b, |x, y| x * y))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", sa, sb));
        }
        let bd = self.data(b);
        let inner = bd.len();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(Op::AddBroadcast { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.elementwise1(Op::Scale { a, factor }, a, |x| x * factor)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(Op::Gelu { a }, a, |x| {
            0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(Op::Relu { a }, a, |x| x.max(0.0))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NaN { op: "softmax_rows" });
        }
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { a, cols }, value, &[a]))
    }

    /// Per-row normalization over the last dimension followed by an affine
    /// `gain`/`bias` pair. Variance is the biased estimator plus `1e-5`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let rows = xd.len() / cols;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gd[c] + bd[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
            value,
            &[x, gain, bias],
        ))
    }

    /// 2-D cross-correlation. `x` is `[B, C_in, H, W]` or unbatched
    /// `[C_in, H, W]`; `kernels` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let unbatched = sx.len() == 3;
        let (batch, c_in, height, width) = match sx[..] {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(invalid("conv2d", &sx, "expected [B, C, H, W] or [C, H, W]")),
        };
        if sk.len() != 4 || sk[1] != c_in {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d: stride must be positive".into()));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv2d.bias", &sk, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let (plen, pos) = (geom.patch_len(), geom.positions());
        let in_len = c_in * height * width;
        let mut cols = vec![0.0; plen * pos];
        let mut out = vec![0.0; batch * c_out * pos];
        let (xd, kd) = (self.data(x), self.data(kernels));
        for b in 0..batch {
            geom.im2col(&xd[b * in_len..(b + 1) * in_len], &mut cols);
            let dst = &mut out[b * c_out * pos..(b + 1) * c_out * pos];
            if let Some(bias) = bias {
                let bd = self.data(bias);
                for (co, chunk) in dst.chunks_mut(pos).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bd[co]);
                }
            }
            gemm(c_out, plen, pos, kd, false, &cols, false, 1.0, dst);
        }
        let shape = if unbatched {
            vec![c_out, geom.out_h, geom.out_w]
        } else {
            vec![batch, c_out, geom.out_h, geom.out_w]
        };
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, kernels];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { x, kernels, bias, geom }, value, &inputs))
    }

    /// Non-overlapping `P x P` patch projection (`stride == kernel == P`).
    pub fn conv2d_patch(&mut self, x: NodeId, kernels: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let sk = self.shape(kernels).to_vec();
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(invalid("conv2d_patch", &sk, "kernels must be [C, N_C, P, P]"));
        }
        self.conv2d(x, kernels, bias, sk[2], 0)
    }

    /// 2x2 max pooling with stride 2 (floor) over `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [b, c, h, w] = sx[..] else {
            return Err(invalid("max_pool2d", &sx, "expected [B, C, H, W]"));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(invalid("max_pool2d", &sx, "spatial size below 2"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { x, argmax }, value, &[x]))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`: one token per spatial position.
    pub fn channels_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [batch, channels, h, w] = sx[..] else {
            return Err(invalid("channels_to_tokens", &sx, "expected [B, C, H, W]"));
        };
        let positions = h * w;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                for p in 0..positions {
                    out[(b * positions + p) * channels + c] = xd[(b * channels + c) * positions + p];
                }
            }
        }
        let value = Tensor::new(vec![batch, positions, channels], out)?;
        Ok(self.push(
            Op::ChannelsToTokens {
                x,
                batch,
                channels,
                positions,
            },
            value,
            &[x],
        ))
    }

    /// Prepends `token [C]` to every sequence of `x [B, T, C]`.
    pub fn prepend_token(&mut self, x: NodeId, token: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [batch, tokens, width] = sx[..] else {
            return Err(invalid("prepend_token", &sx, "expected [B, T, C]"));
        };
        if self.shape(token) != [width] {
            return Err(mismatch("prepend_token", &sx, self.shape(token)));
        }
        let (xd, td) = (self.data(x), self.data(token));
        let mut out = Vec::with_capacity(batch * (tokens + 1) * width);
        for b in 0..batch {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[b * tokens * width..(b + 1) * tokens * width]);
        }
        let value = Tensor::new(vec![batch, tokens + 1, width], out)?;
        Ok(self.push(
            Op::PrependToken {
                x,
                token,
                batch,
                tokens,
                width,
            },
            value,
            &[x, token],
        ))
    }

    /// Picks token `index` out of `[B, T, C]`, giving `[B, C]`.
    pub fn select_token(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [batch, tokens, width] = sx[..] else {
            return Err(invalid("select_token", &sx, "expected [B, T, C]"));
        };
        if index >= tokens {
            return Err(invalid("select_token", &sx, format!("token {index} out of range")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let start = (b * tokens + index) * width;
            out.extend_from_slice(&xd[start..start + width]);
        }
        let value = Tensor::new(vec![batch, width], out)?;
        Ok(self.push(
            Op::SelectToken {
                x,
                index,
                batch,
                tokens,
                width,
            },
            value,
            &[x],
        ))
    }

    /// `[B, T, H*D] -> [B, H, T, D]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [batch, tokens, width] = sx[..] else {
            return Err(invalid("split_heads", &sx, "expected [B, T, C]"));
        };
        if heads == 0 || width % heads != 0 {
            return Err(invalid(
                "split_heads",
                &sx,
                format!("{heads} heads do not divide width"),
            ));
        }
        let dim = width / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = (b * tokens + t) * width + h * dim;
                    let dst = ((b * heads + h) * tokens + t) * dim;
                    out[dst..dst + dim].copy_from_slice(&xd[src..src + dim]);
                }
            }
        }
        let value = Tensor::new(vec![batch, heads, tokens, dim], out)?;
        Ok(self.push(
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
                dim,
            },
            value,
            &[x],
        ))
    }

    /// `[B, H, T, D] -> [B, T, H*D]` (head concatenation).
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let [batch, heads, tokens, dim] = sx[..] else {
            return Err(invalid("merge_heads", &sx, "expected [B, H, T, D]"));
        };
        let width = heads * dim;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = ((b * heads + h) * tokens + t) * dim;
                    let dst = (b * tokens + t) * width + h * dim;
                    out[dst..dst + dim].copy_from_slice(&xd[src..src + dim]);
                }
            }
        }
        let value = Tensor::new(vec![batch, tokens, width], out)?;
        Ok(self.push(
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
                dim,
            },
            value,
            &[x],
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { a }, value, &[a]))
    }

    /// `[M, C] -> [M * times, C]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || times == 0 {
            return Err(invalid("repeat_rows", &sa, "expected [M, C] and times > 0"));
        }
        let cols = sa[1];
        let mut out = Vec::with_capacity(sa[0] * times * cols);
        for row in self.data(a).chunks(cols) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![sa[0] * times, cols], out)?;
        Ok(self.push(Op::RepeatRows { a, times, cols }, value, &[a]))
    }

    /// `out[i] = a[i, index[i]]` for `a [M, A]`.
    pub fn gather(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != index.len() || index.iter().any(|&i| i >= sa[1]) {
            return Err(mismatch("gather", &sa, &[index.len()]));
        }
        let cols = sa[1];
        let ad = self.data(a);
        let out = index.iter().enumerate().map(|(r, &c)| ad[r * cols + c]).collect();
        let value = Tensor::new(vec![index.len()], out)?;
        Ok(self.push(
            Op::Gather {
                a,
                index: index.to_vec(),
                cols,
            },
            value,
            &[a],
        ))
    }

    /// Dueling combination `q = v + a - mean(a)` for `value [M, 1]` and
    /// `advantage [M, A]`.
    pub fn dueling(&mut self, value: NodeId, advantage: NodeId) -> Result<NodeId> {
        let (sv, sa) = (self.shape(value).to_vec(), self.shape(advantage).to_vec());
        if sv.len() != 2 || sa.len() != 2 || sv[1] != 1 || sv[0] != sa[0] {
            return Err(mismatch("dueling", &sv, &sa));
        }
        let actions = sa[1];
        let (vd, ad) = (self.data(value), self.data(advantage));
        let mut out = Vec::with_capacity(ad.len());
        for (r, row) in ad.chunks(actions).enumerate() {
            let mean = row.iter().sum::<f64>() / actions as f64;
            out.extend(row.iter().map(|a| vd[r] + a - mean));
        }
        let t = Tensor::new(sa, out)?;
        Ok(self.push(
            Op::Dueling {
                value,
                advantage,
                actions,
            },
            t,
            &[value, advantage],
        ))
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, a: NodeId, delta: f64) -> NodeId {
        self.elementwise1(Op::Huber { a, delta }, a, |x| huber(x, delta))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean { a }, Tensor::scalar(s), &[a])
    }

    /// Quantile-regression Huber loss averaged over batch and all
    /// `(prediction, target)` quantile pairs.
    ///
    /// `pred` is `[B, N]`; `target` is `[B, N']` (held constant); `taus` is
    /// `[B, N]` and holds the quantile level of each prediction.
    pub fn quantile_huber(&mut self, pred: NodeId, target: &Tensor, taus: &Tensor, kappa: f64) -> Result<NodeId> {
        let sp = self.shape(pred).to_vec();
        if sp.len() != 2 || taus.shape() != sp.as_slice() {
            return Err(mismatch("quantile_huber", &sp, taus.shape()));
        }
        if target.shape().len() != 2 || target.shape()[0] != sp[0] {
            return Err(mismatch("quantile_huber", &sp, target.shape()));
        }
        if kappa <= 0.0 {
            return Err(TensorError::InvalidArgument(
                "quantile_huber: kappa must be positive".into(),
            ));
        }
        let (batch, n, n_target) = (sp[0], sp[1], target.shape()[1]);
        let pd = self.data(pred);
        let (td, tau) = (target.data(), taus.data());
        let mut total = 0.0;
        for b in 0..batch {
            for i in 0..n {
                let p = pd[b * n + i];
                let t_i = tau[b * n + i];
                for j in 0..n_target {
                    let u = td[b * n_target + j] - p;
                    let weight = (t_i - if u < 0.0 { 1.0 } else { 0.0 }).abs();
                    total += weight * huber(u, kappa) / kappa;
                }
            }
        }
        let loss = total / (batch * n * n_target) as f64;
        Ok(self.push(
            Op::QuantileHuber {
                pred,
                target: td.to_vec(),
                taus: tau.to_vec(),
                batch,
                n,
                n_target,
                kappa,
            },
            Tensor::scalar(loss),
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to the
    /// leaf gradient slots; trainable leaves the loss does not reach end up
    /// with an all-zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&dy);
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf { trainable: true }) && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.numel()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(adj[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf { .. } => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(adj, a) {
                    gemm(m, n, k, dy, false, self.data(b), true, 1.0, da);
                }
                if let Some(db) = self.slot(adj, b) {
                    gemm(k, m, n, self.data(a), true, dy, false, 1.0, db);
                }
            }
            &Op::Linear { x, w, bias, rows, k, n } => {
                if let Some(dx) = self.slot(adj, x) {
                    gemm(rows, n, k, dy, false, self.data(w), true, 1.0, dx);
                }
                if let Some(dw) = self.slot(adj, w) {
                    gemm(k, rows, n, self.data(x), true, dy, false, 1.0, dw);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(adj, b) {
                        for row in dy.chunks(n) {
                            add_into(db, row);
                        }
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(adj, a) {
                    for s in 0..batch {
                        let g = &dy[s * m * n..(s + 1) * m * n];
                        let bb = &bd[s * k * n..(s + 1) * k * n];
                        // C = A B  => dA = dC B^T ; C = A B^T => dA = dC B
                        gemm(
                            m,
                            n,
                            k,
                            g,
                            false,
                            bb,
                            !trans_b,
                            1.0,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for s in 0..batch {
                        let g = &dy[s * m * n..(s + 1) * m * n];
                        let aa = &ad[s * m * k..(s + 1) * m * k];
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // dB[n, k] = dC^T A
                            gemm(n, m, k, g, true, aa, false, 1.0, dst);
                        } else {
                            // dB[k, n] = A^T dC
                            gemm(k, m, n, aa, true, g, false, 1.0, dst);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.slot(adj, b) {
                    add_into(db, dy);
                }
            }
            &Op::AddBroadcast { a, b } => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.slot(adj, b) {
                    let inner = db.len();
                    for chunk in dy.chunks(inner) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.slot(adj, b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(adj, a) {
                    for ((d, g), v) in da.iter_mut().zip(dy).zip(bd) {
                        *d += g * v;
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for ((d, g), v) in db.iter_mut().zip(dy).zip(ad) {
                        *d += g * v;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(dy).for_each(|(d, g)| *d += g * factor);
                }
            }
            &Op::Gelu { a } => {
                let x = self.data(a);
                if let Some(da) = self.slot(adj, a) {
                    for ((d, g), &x) in da.iter_mut().zip(dy).zip(x) {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            &Op::Relu { a } => {
                let x = self.data(a);
                if let Some(da) = self.slot(adj, a) {
                    for ((d, g), &x) in da.iter_mut().zip(dy).zip(x) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Softmax { a, cols } => {
                if let Some(da) = self.slot(adj, a) {
                    for ((d_row, g_row), y_row) in da.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gd = self.data(*gain);
                if let Some(dg) = self.slot(adj, *gain) {
                    for (g_row, h_row) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, g), h) in dg.iter_mut().zip(g_row).zip(h_row) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *bias) {
                    for g_row in dy.chunks(cols) {
                        add_into(db, g_row);
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    let mut dh = vec![0.0; cols];
                    for (r, ((dx_row, g_row), h_row)) in dx
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for c in 0..cols {
                            dh[c] = g_row[c] * gd[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dh.iter().zip(h_row).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx_row[c] += rstd[r] * (dh[c] - mean_dh - h_row[c] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Conv2d { x, kernels, bias, geom } => {
                let (plen, pos) = (geom.patch_len(), geom.positions());
                let in_len = geom.c_in * geom.height * geom.width;
                let out_len = geom.c_out * pos;
                let (xd, kd) = (self.data(x), self.data(kernels));
                if let Some(b) = bias {
                    if let Some(db) = self.slot(adj, b) {
                        for s in 0..geom.batch {
                            for co in 0..geom.c_out {
                                let start = s * out_len + co * pos;
                                db[co] += dy[start..start + pos].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let need_k = self.nodes[kernels.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                if need_k {
                    let mut cols = vec![0.0; plen * pos];
                    let dk = self.slot(adj, kernels).unwrap();
                    for s in 0..geom.batch {
                        geom.im2col(&xd[s * in_len..(s + 1) * in_len], &mut cols);
                        let g = &dy[s * out_len..(s + 1) * out_len];
                        gemm(geom.c_out, pos, plen, g, false, &cols, true, 1.0, dk);
                    }
                }
                if need_x {
                    let mut dcols = vec![0.0; plen * pos];
                    let dx = self.slot(adj, x).unwrap();
                    for s in 0..geom.batch {
                        let g = &dy[s * out_len..(s + 1) * out_len];
                        gemm(plen, geom.c_out, pos, kd, true, g, false, 0.0, &mut dcols);
                        geom.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (g, &idx) in dy.iter().zip(argmax) {
                        dx[idx] += g;
                    }
                }
            }
            &Op::ChannelsToTokens {
                x,
                batch,
                channels,
                positions,
            } => {
                if let Some(dx) = self.slot(adj, x) {
                    for b in 0..batch {
                        for c in 0..channels {
                            for p in 0..positions {
                                dx[(b * channels + c) * positions + p] += dy[(b * positions + p) * channels + c];
                            }
                        }
                    }
                }
            }
            &Op::PrependToken {
                x,
                token,
                batch,
                tokens,
                width,
            } => {
                let seq = (tokens + 1) * width;
                if let Some(dt) = self.slot(adj, token) {
                    for b in 0..batch {
                        add_into(dt, &dy[b * seq..b * seq + width]);
                    }
                }
                if let Some(dx) = self.slot(adj, x) {
                    for b in 0..batch {
                        add_into(
                            &mut dx[b * tokens * width..(b + 1) * tokens * width],
                            &dy[b * seq + width..(b + 1) * seq],
                        );
                    }
                }
            }
            &Op::SelectToken {
                x,
                index,
                batch,
                tokens,
                width,
            } => {
                if let Some(dx) = self.slot(adj, x) {
                    for b in 0..batch {
                        let start = (b * tokens + index) * width;
                        add_into(&mut dx[start..start + width], &dy[b * width..(b + 1) * width]);
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
                dim,
            } => {
                if let Some(dx) = self.slot(adj, x) {
                    let width = heads * dim;
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let src = ((b * heads + h) * tokens + t) * dim;
                                let dst = (b * tokens + t) * width + h * dim;
                                add_into(&mut dx[dst..dst + dim], &dy[src..src + dim]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
                dim,
            } => {
                if let Some(dx) = self.slot(adj, x) {
                    let width = heads * dim;
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let dst = ((b * heads + h) * tokens + t) * dim;
                                let src = (b * tokens + t) * width + h * dim;
                                add_into(&mut dx[dst..dst + dim], &dy[src..src + dim]);
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, dy);
                }
            }
            &Op::RepeatRows { a, times, cols } => {
                if let Some(da) = self.slot(adj, a) {
                    for (r, d_row) in da.chunks_mut(cols).enumerate() {
                        for t in 0..times {
                            let start = (r * times + t) * cols;
                            add_into(d_row, &dy[start..start + cols]);
                        }
                    }
                }
            }
            Op::Gather { a, index, cols } => {
                if let Some(da) = self.slot(adj, *a) {
                    for (r, (&c, g)) in index.iter().zip(dy).enumerate() {
                        da[r * cols + c] += g;
                    }
                }
            }
            &Op::Dueling {
                value,
                advantage,
                actions,
            } => {
                if let Some(dv) = self.slot(adj, value) {
                    for (d, row) in dv.iter_mut().zip(dy.chunks(actions)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(da) = self.slot(adj, advantage) {
                    for (d_row, g_row) in da.chunks_mut(actions).zip(dy.chunks(actions)) {
                        let mean = g_row.iter().sum::<f64>() / actions as f64;
                        for (d, g) in d_row.iter_mut().zip(g_row) {
                            *d += g - mean;
                        }
                    }
                }
            }
            &Op::Huber { a, delta } => {
                let x = self.data(a);
                if let Some(da) = self.slot(adj, a) {
                    for ((d, g), &x) in da.iter_mut().zip(dy).zip(x) {
                        *d += g * x.clamp(-delta, delta);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(da) = self.slot(adj, a) {
                    let scale = dy[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += scale);
                }
            }
            Op::QuantileHuber {
                pred,
                target,
                taus,
                batch,
                n,
                n_target,
                kappa,
            } => {
                let pd = self.data(*pred);
                if let Some(dp) = self.slot(adj, *pred) {
                    let scale = dy[0] / (batch * n * n_target) as f64;
                    for b in 0..*batch {
                        for i in 0..*n {
                            let p = pd[b * n + i];
                            let t_i = taus[b * n + i];
                            let mut acc = 0.0;
                            for j in 0..*n_target {
                                let u = target[b * n_target + j] - p;
                                let weight = (t_i - if u < 0.0 { 1.0 } else { 0.0 }).abs();
                                acc -= weight * u.clamp(-kappa, *kappa) / kappa;
                            }
                            dp[b * n + i] += scale * acc;
                        }
                    }
                }
            }
        }
    }
}

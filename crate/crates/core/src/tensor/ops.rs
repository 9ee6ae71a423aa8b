use super::kernels::{self, ConvGeom};
use super::tape::{slot, Node, Tape, Var};
use super::Tensor;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Normalize by the biased per-channel statistics of the batch.
    Batch { eps: f64 },
    /// Normalize by the supplied per-channel mean and variance.
    Fixed { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, g: ConvGeom },
    Depthwise { x: usize, w: usize, k: usize, dilation: usize },
    Pointwise { x: usize, w: usize, b: Option<usize> },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    Sigmoid { x: usize },
    Gelu { x: usize, deriv: Vec<f64> },
    Relu { x: usize },
    LnEps { x: usize, eps: f64 },
    Concat { a: usize, b: usize },
    Slice { x: usize, start: usize },
    Flip { x: usize },
    Upsample2x { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    SumChannels { x: usize },
    SoftmaxChannels { x: usize, tau: f64 },
    Mse { a: usize, b: usize },
    BceLogits { logits: usize, target: usize },
    Dice { probs: usize, target: usize, eps: f64 },
    Cosine { a: usize, b: usize, eps: f64 },
    StraightThrough { soft: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    EmbedRow { table: usize, row: usize },
    Reshape { x: usize },
    SliceBatch { x: usize, start: usize },
    ConcatBatch { a: usize, b: usize },
    AvgPool { x: usize, factor: usize },
    DepthToSpace { x: usize, r: usize },
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative. Uses `½(1 + tanh u) = σ(2u)`, which needs
/// one `exp` instead of a `tanh`.
#[inline]
fn gelu_with_grad(v: f64) -> (f64, f64) {
    let u2 = 2.0 * GELU_K * (v + GELU_C * v * v * v);
    let s = sigmoid(u2);
    let value = v * s;
    let grad = s + v * s * (1.0 - s) * 2.0 * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
    (value, grad)
}

/// Scalar sigmoid, numerically stable for large |v|.
pub fn sigmoid_scalar(v: f64) -> f64 {
    sigmoid(v)
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

impl Tape {
    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Dense 2-D convolution (dilation 1), `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, c, h, wd) = self.val(x).dims4()?;
        let (co, ci, kh, kw) = self.val(w).dims4()?;
        ensure!(ci == c, "conv2d: weight expects {} input channels, input has {}", ci, c);
        ensure!(kh == kw, "conv2d: square kernels only, got {}x{}", kh, kw);
        if let Some(b) = b {
            ensure!(self.val(b).shape() == [co], "conv2d: bias shape {:?}, want [{}]", self.val(b).shape(), co);
        }
        let g = ConvGeom::new(c, h, wd, kh, stride, pad)
            .ok_or_else(|| crate::Error::Contract(format!("conv2d: kernel {} does not fit {}x{} with padding {}", kh, h, wd, pad)))?;
        let (rows, n) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; bn * co * n];
        let mut cols = vec![0.0; rows * n];
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        for bi in 0..bn {
            kernels::im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
            kernels::gemm(co, rows, n, wv, false, &cols, false, 0.0, &mut out[bi * co * n..(bi + 1) * co * n]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b).data(), bn, co, n);
        }
        let value = Tensor::new(vec![bn, co, g.h_out, g.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(value, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), g }, &inputs))
    }

    /// Depth-wise convolution with "same" zero padding, `w: [C, 1, k, k]`, `k` odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (bn, c, h, wd) = self.val(x).dims4()?;
        let (wc, one, kh, kw) = self.val(w).dims4()?;
        ensure!(wc == c && one == 1, "depthwise: weight shape {:?} does not match {} channels", self.val(w).shape(), c);
        ensure!(kh == kw && kh % 2 == 1, "depthwise: kernel must be square and odd, got {}x{}", kh, kw);
        ensure!(dilation >= 1, "depthwise: dilation must be positive");
        let plane = h * wd;
        let mut out = vec![0.0; bn * c * plane];
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        for bi in 0..bn {
            for ch in 0..c {
                let o = (bi * c + ch) * plane;
                kernels::depthwise_plane(
                    &xv[o..o + plane],
                    &wv[ch * kh * kh..(ch + 1) * kh * kh],
                    kh,
                    dilation,
                    h,
                    wd,
                    &mut out[o..o + plane],
                );
            }
        }
        let value = Tensor::new(vec![bn, c, h, wd], out)?;
        Ok(self.push_op(value, Op::Depthwise { x: x.0, w: w.0, k: kh, dilation }, &[x, w]))
    }

    /// 1×1 convolution, `w: [C_out, C_in, 1, 1]`, optional bias `[C_out]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bn, c, h, wd) = self.val(x).dims4()?;
        let (co, ci, kh, kw) = self.val(w).dims4()?;
        ensure!(kh == 1 && kw == 1, "pointwise: kernel must be 1x1, got {}x{}", kh, kw);
        ensure!(ci == c, "pointwise: weight expects {} input channels, input has {}", ci, c);
        if let Some(b) = b {
            ensure!(self.val(b).shape() == [co], "pointwise: bias shape {:?}, want [{}]", self.val(b).shape(), co);
        }
        let n = h * wd;
        let mut out = vec![0.0; bn * co * n];
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        for bi in 0..bn {
            kernels::gemm(co, c, n, wv, false, &xv[bi * c * n..(bi + 1) * c * n], false, 0.0, &mut out[bi * co * n..(bi + 1) * co * n]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b).data(), bn, co, n);
        }
        let value = Tensor::new(vec![bn, co, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(value, Op::Pointwise { x: x.0, w: w.0, b: b.map(|v| v.0) }, &inputs))
    }

    /// Element-wise `a ∘ b`. `b` may broadcast over `a` through extents of 1.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.val(a).shape();
        let sb = self.val(b).shape();
        ensure!(
            sa.len() == sb.len() && sa.iter().zip(sb).all(|(x, y)| x == y || *y == 1),
            "{:?}: shape {:?} does not broadcast over {:?}",
            kind,
            sb,
            sa
        );
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let av = self.val(a).data();
        let bv = self.val(b).data();
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; av.len()];
            kernels::for_each_broadcast(sa, sb, |i, j| out[i] = f(av[i], bv[j]));
            out
        };
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_op(value, Op::Binary { kind, a: a.0, b: b.0 }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.val(x).map(|v| scale * v + shift);
        self.push_op(value, Op::Affine { x: x.0, scale }, &[x])
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.val(x).map(sigmoid);
        self.push_op(value, Op::Sigmoid { x: x.0 }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.val(x);
        let mut out = Vec::with_capacity(src.len());
        let mut deriv = Vec::with_capacity(if self.grad_enabled() { src.len() } else { 0 });
        for &v in src.data() {
            let (y, d) = gelu_with_grad(v);
            out.push(y);
            if self.grad_enabled() {
                deriv.push(d);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push_op(value, Op::Gelu { x: x.0, deriv }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| v.max(0.0));
        self.push_op(value, Op::Relu { x: x.0 }, &[x])
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&mut self, x: Var, eps: f64) -> Var {
        let value = self.val(x).map(|v| (v + eps).ln());
        self.push_op(value, Op::LnEps { x: x.0, eps }, &[x])
    }

    /// Channel-axis concatenation of two rank-4 tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.val(a).dims4()?;
        let (bb, cb, hb, wb) = self.val(b).dims4()?;
        ensure!(
            (ba, ha, wa) == (bb, hb, wb),
            "concat_channels: batch/spatial extents differ: {:?} vs {:?}",
            self.val(a).shape(),
            self.val(b).shape()
        );
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(ba * (pa + pb));
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        for i in 0..ba {
            data.extend_from_slice(&av[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&bv[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        Ok(self.push_op(value, Op::Concat { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        ensure!(start + len <= c && len > 0, "slice_channels: {}..{} out of {} channels", start, start + len, c);
        let plane = h * w;
        let xv = self.val(x).data();
        let mut data = Vec::with_capacity(bn * len * plane);
        for i in 0..bn {
            let o = (i * c + start) * plane;
            data.extend_from_slice(&xv[o..o + len * plane]);
        }
        let value = Tensor::new(vec![bn, len, h, w], data)?;
        Ok(self.push_op(value, Op::Slice { x: x.0, start }, &[x]))
    }

    /// Reverses the width axis of a rank-4 tensor.
    pub fn flip_horizontal(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).flip_w()?;
        Ok(self.push_op(value, Op::Flip { x: x.0 }, &[x]))
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        let xv = self.val(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; bn * c * h2 * w2];
        for p in 0..bn * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                let s = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (x2, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = s[x2 / 2];
                }
            }
        }
        let value = Tensor::new(vec![bn, c, h2, w2], data)?;
        Ok(self.push_op(value, Op::Upsample2x { x: x.0 }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        self.push_op(value, Op::SumAll { x: x.0 }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).mean());
        self.push_op(value, Op::MeanAll { x: x.0 }, &[x])
    }

    /// Sum over the channel axis, keeping it: `[B,C,H,W] → [B,1,H,W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        let plane = h * w;
        let xv = self.val(x).data();
        let mut data = vec![0.0; bn * plane];
        for i in 0..bn {
            let dst = &mut data[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let src = &xv[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(vec![bn, 1, h, w], data)?;
        Ok(self.push_op(value, Op::SumChannels { x: x.0 }, &[x]))
    }

    /// Per-pixel softmax over channels of `x / tau`.
    pub fn softmax_channels(&mut self, x: Var, tau: f64) -> Result<Var> {
        ensure!(tau > 0.0, "softmax temperature must be positive, got {}", tau);
        let (bn, c, h, w) = self.val(x).dims4()?;
        let plane = h * w;
        let xv = self.val(x).data();
        let mut data = vec![0.0; xv.len()];
        for i in 0..bn {
            for p in 0..plane {
                let at = |ch: usize| (i * c + ch) * plane + p;
                let m = (0..c).map(|ch| xv[at(ch)] / tau).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xv[at(ch)] / tau - m).exp();
                    data[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    data[at(ch)] /= z;
                }
            }
        }
        let value = Tensor::new(vec![bn, c, h, w], data)?;
        Ok(self.push_op(value, Op::SoftmaxChannels { x: x.0, tau }, &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.val(a).shape() == self.val(b).shape(), "mse: shapes {:?} and {:?} differ", self.val(a).shape(), self.val(b).shape());
        let n = self.val(a).len() as f64;
        let s: f64 = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push_op(Tensor::scalar(s / n), Op::Mse { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Mean binary cross-entropy on logits, log-sum-exp stable.
    /// The target receives no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        ensure!(self.val(logits).shape() == self.val(target).shape(), "bce: shapes {:?} and {:?} differ", self.val(logits).shape(), self.val(target).shape());
        let n = self.val(logits).len() as f64;
        let s: f64 = self
            .val(logits)
            .data()
            .iter()
            .zip(self.val(target).data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push_op(Tensor::scalar(s / n), Op::BceLogits { logits: logits.0, target: target.0 }, &[logits]))
    }

    /// Soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)` over all elements.
    /// The target receives no gradient.
    pub fn dice_loss(&mut self, probs: Var, target: Var, eps: f64) -> Result<Var> {
        ensure!(self.val(probs).shape() == self.val(target).shape(), "dice: shapes {:?} and {:?} differ", self.val(probs).shape(), self.val(target).shape());
        let (p, t) = (self.val(probs).data(), self.val(target).data());
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let total: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
        let loss = 1.0 - (2.0 * inter + eps) / (total + eps);
        Ok(self.push_op(Tensor::scalar(loss), Op::Dice { probs: probs.0, target: target.0, eps }, &[probs]))
    }

    /// Per-pixel cosine similarity across channels: `[B,C,H,W]² → [B,1,H,W]`,
    /// `⟨a,b⟩ / max(‖a‖‖b‖, eps)`.
    pub fn cosine_channels(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        ensure!(self.val(a).shape() == self.val(b).shape(), "cosine: shapes {:?} and {:?} differ", self.val(a).shape(), self.val(b).shape());
        let (bn, c, h, w) = self.val(a).dims4()?;
        let plane = h * w;
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        let mut data = vec![0.0; bn * plane];
        for i in 0..bn {
            for p in 0..plane {
                let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let j = (i * c + ch) * plane + p;
                    d += av[j] * bv[j];
                    na += av[j] * av[j];
                    nb += bv[j] * bv[j];
                }
                data[i * plane + p] = d / (na.sqrt() * nb.sqrt()).max(eps);
            }
        }
        let value = Tensor::new(vec![bn, 1, h, w], data)?;
        Ok(self.push_op(value, Op::Cosine { a: a.0, b: b.0, eps }, &[a, b]))
    }

    /// Forward value `hard`, backward identity into `soft`: the value of
    /// `hard − detach(soft) + soft` without its rounding error.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        ensure!(hard.shape() == self.val(soft).shape(), "straight_through: shapes {:?} and {:?} differ", hard.shape(), self.val(soft).shape());
        Ok(self.push_op(hard, Op::StraightThrough { soft: soft.0 }, &[soft]))
    }

    /// Per-channel normalization over `(B, H, W)` followed by `γ x̂ + β`.
    /// In batch mode also returns the biased batch mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        ensure!(self.val(gamma).shape() == [c] && self.val(beta).shape() == [c], "batch_norm: affine parameters must have shape [{}]", c);
        let plane = h * w;
        let count = (bn * plane) as f64;
        let xv = self.val(x).data();
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..bn {
                        s += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for i in 0..bn {
                        q += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var, *eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                ensure!(mean.len() == c && var.len() == c, "batch_norm: fixed statistics must have {} channels", c);
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..bn {
            for ch in 0..c {
                let o = (i * c + ch) * plane;
                for j in o..o + plane {
                    let z = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = z;
                    out[j] = gv[ch] * z + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![bn, c, h, w], out)?;
        let var_out = self.push_op(
            value,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, batch },
            &[x, gamma, beta],
        );
        Ok((var_out, batch.then_some((mean, var))))
    }

    /// Row `row` of a `[D, d]` table as a `[1, d, 1, 1]` tensor.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let shape = self.val(table).shape();
        ensure!(shape.len() == 2, "embed_row: table must be rank 2, got {:?}", shape);
        let (d_rows, d) = (shape[0], shape[1]);
        ensure!(row < d_rows, "embed_row: row {} out of {}", row, d_rows);
        let data = self.val(table).data()[row * d..(row + 1) * d].to_vec();
        let value = Tensor::new(vec![1, d, 1, 1], data)?;
        Ok(self.push_op(value, Op::EmbedRow { table: table.0, row }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.val(x).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { x: x.0 }, &[x]))
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], bn: usize, co: usize, n: usize) {
    for i in 0..bn {
        for (ch, &bv) in bias.iter().enumerate().take(co) {
            for v in &mut out[(i * co + ch) * n..(i * co + ch + 1) * n] {
                *v += bv;
            }
        }
    }
}

fn channel_sums(g: &[f64], bn: usize, co: usize, n: usize, db: &mut [f64]) {
    for i in 0..bn {
        for (ch, d) in db.iter_mut().enumerate().take(co) {
            *d += g[(i * co + ch) * n..(i * co + ch + 1) * n].iter().sum::<f64>();
        }
    }
}

impl Op {
    /// Propagates the upstream gradient `g` of a node with value `out`.
    pub(crate) fn backward(&self, nodes: &[Node], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let v = |j: usize| &nodes[j].value;
        match *self {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g: geom } => {
                let (bn, c, h, wd) = dims4(v(x).shape());
                let co = v(w).shape()[0];
                let (rows, n) = (geom.col_rows(), geom.col_cols());
                let xv = v(x).data();
                let wv = v(w).data();
                let mut cols = vec![0.0; rows * n];
                let mut dcols = vec![0.0; rows * n];
                let need_w = nodes[w].requires_grad;
                let need_x = nodes[x].requires_grad;
                let mut dw_acc = vec![0.0; co * rows];
                let mut dx_acc = vec![0.0; if need_x { xv.len() } else { 0 }];
                for bi in 0..bn {
                    let gb = &g[bi * co * n..(bi + 1) * co * n];
                    if need_w {
                        kernels::im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geom, &mut cols);
                        kernels::gemm(co, n, rows, gb, false, &cols, true, 1.0, &mut dw_acc);
                    }
                    if need_x {
                        kernels::gemm(rows, co, n, wv, true, gb, false, 0.0, &mut dcols);
                        kernels::col2im(&dcols, &geom, &mut dx_acc[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if let Some(dw) = slot(nodes, grads, w) {
                    add_into(dw, &dw_acc);
                }
                if let Some(dx) = slot(nodes, grads, x) {
                    add_into(dx, &dx_acc);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, b) {
                        channel_sums(g, bn, co, n, db);
                    }
                }
            }
            Op::Depthwise { x, w, k, dilation } => {
                let (bn, c, h, wd) = dims4(v(x).shape());
                let plane = h * wd;
                let xv = v(x).data();
                let wv = v(w).data();
                let mut dx = nodes[x].requires_grad.then(|| vec![0.0; xv.len()]);
                let mut dw = nodes[w].requires_grad.then(|| vec![0.0; wv.len()]);
                for bi in 0..bn {
                    for ch in 0..c {
                        let o = (bi * c + ch) * plane;
                        let kk = k * k;
                        kernels::depthwise_plane_backward(
                            &xv[o..o + plane],
                            &wv[ch * kk..(ch + 1) * kk],
                            &g[o..o + plane],
                            k,
                            dilation,
                            h,
                            wd,
                            dx.as_mut().map(|d| &mut d[o..o + plane]),
                            dw.as_mut().map(|d| &mut d[ch * kk..(ch + 1) * kk]),
                        );
                    }
                }
                if let (Some(acc), Some(d)) = (dx, slot(nodes, grads, x)) {
                    add_into(d, &acc);
                }
                if let (Some(acc), Some(d)) = (dw, slot(nodes, grads, w)) {
                    add_into(d, &acc);
                }
            }
            Op::Pointwise { x, w, b } => {
                let (bn, c, h, wd) = dims4(v(x).shape());
                let co = v(w).shape()[0];
                let n = h * wd;
                if nodes[w].requires_grad {
                    let xv = v(x).data();
                    let mut acc = vec![0.0; co * c];
                    for bi in 0..bn {
                        kernels::gemm(co, n, c, &g[bi * co * n..(bi + 1) * co * n], false, &xv[bi * c * n..(bi + 1) * c * n], true, 1.0, &mut acc);
                    }
                    add_into(slot(nodes, grads, w).unwrap(), &acc);
                }
                if nodes[x].requires_grad {
                    let wv = v(w).data();
                    let mut acc = vec![0.0; bn * c * n];
                    for bi in 0..bn {
                        kernels::gemm(c, co, n, wv, true, &g[bi * co * n..(bi + 1) * co * n], false, 0.0, &mut acc[bi * c * n..(bi + 1) * c * n]);
                    }
                    add_into(slot(nodes, grads, x).unwrap(), &acc);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, b) {
                        channel_sums(g, bn, co, n, db);
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                let same = sa == sb;
                let av = v(a).data();
                let bv = v(b).data();
                if let Some(da) = slot(nodes, grads, a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => add_into(da, g),
                        BinaryKind::Mul if same => da.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b),
                        BinaryKind::Div if same => da.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g / b),
                        BinaryKind::Mul => kernels::for_each_broadcast(sa, sb, |i, j| da[i] += g[i] * bv[j]),
                        BinaryKind::Div => kernels::for_each_broadcast(sa, sb, |i, j| da[i] += g[i] / bv[j]),
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    let rule = |i: usize, j: usize| match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * av[i],
                        BinaryKind::Div => -g[i] * av[i] / (bv[j] * bv[j]),
                    };
                    if same {
                        for (i, d) in db.iter_mut().enumerate() {
                            *d += rule(i, i);
                        }
                    } else {
                        kernels::for_each_broadcast(sa, sb, |i, j| db[j] += rule(i, j));
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(d) = slot(nodes, grads, x) {
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d += scale * gv;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(d) = slot(nodes, grads, x) {
                    for ((d, gv), s) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = v(x).data();
                if let Some(d) = slot(nodes, grads, x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(xv) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu { x, ref deriv } => {
                if let Some(d) = slot(nodes, grads, x) {
                    for ((d, gv), dv) in d.iter_mut().zip(g).zip(deriv) {
                        *d += gv * dv;
                    }
                }
            }
            Op::LnEps { x, eps } => {
                let xv = v(x).data();
                if let Some(d) = slot(nodes, grads, x) {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(xv) {
                        *d += gv / (xv + eps);
                    }
                }
            }
            Op::Concat { a, b } => {
                let (bn, ca, h, w) = dims4(v(a).shape());
                let cb = v(b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if let Some(da) = slot(nodes, grads, a) {
                    for i in 0..bn {
                        add_into(&mut da[i * pa..(i + 1) * pa], &g[i * (pa + pb)..i * (pa + pb) + pa]);
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for i in 0..bn {
                        add_into(&mut db[i * pb..(i + 1) * pb], &g[i * (pa + pb) + pa..(i + 1) * (pa + pb)]);
                    }
                }
            }
            Op::Slice { x, start } => {
                let (bn, c, h, w) = dims4(v(x).shape());
                let len = out.shape()[1];
                let plane = h * w;
                if let Some(d) = slot(nodes, grads, x) {
                    for i in 0..bn {
                        let o = (i * c + start) * plane;
                        add_into(&mut d[o..o + len * plane], &g[i * len * plane..(i + 1) * len * plane]);
                    }
                }
            }
            Op::Flip { x } => {
                let w = v(x).shape()[3];
                if let Some(d) = slot(nodes, grads, x) {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(w)) {
                        for (j, dv) in drow.iter_mut().enumerate() {
                            *dv += grow[w - 1 - j];
                        }
                    }
                }
            }
            Op::Upsample2x { x } => {
                let (bn, c, h, w) = dims4(v(x).shape());
                let w2 = 2 * w;
                if let Some(d) = slot(nodes, grads, x) {
                    for p in 0..bn * c {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x2 in 0..w2 {
                                dp[(y / 2) * w + x2 / 2] += gp[y * w2 + x2];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(d) = slot(nodes, grads, x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll { x } => {
                let n = v(x).len() as f64;
                if let Some(d) = slot(nodes, grads, x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumChannels { x } => {
                let (bn, c, h, w) = dims4(v(x).shape());
                let plane = h * w;
                if let Some(d) = slot(nodes, grads, x) {
                    for i in 0..bn {
                        for ch in 0..c {
                            add_into(&mut d[(i * c + ch) * plane..(i * c + ch + 1) * plane], &g[i * plane..(i + 1) * plane]);
                        }
                    }
                }
            }
            Op::SoftmaxChannels { x, tau } => {
                let (bn, c, h, w) = dims4(v(x).shape());
                let plane = h * w;
                let y = out.data();
                if let Some(d) = slot(nodes, grads, x) {
                    for i in 0..bn {
                        for p in 0..plane {
                            let at = |ch: usize| (i * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| y[at(ch)] * g[at(ch)]).sum();
                            for ch in 0..c {
                                d[at(ch)] += y[at(ch)] * (g[at(ch)] - dot) / tau;
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let n = v(a).len() as f64;
                let diff: Vec<f64> = v(a).data().iter().zip(v(b).data()).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                if let Some(da) = slot(nodes, grads, a) {
                    add_into(da, &diff);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for (d, df) in db.iter_mut().zip(&diff) {
                        *d -= df;
                    }
                }
            }
            Op::BceLogits { logits, target } => {
                let n = v(logits).len() as f64;
                let t = v(target).data();
                let xv = v(logits).data();
                if let Some(d) = slot(nodes, grads, logits) {
                    for ((d, x), t) in d.iter_mut().zip(xv).zip(t) {
                        *d += g[0] * (sigmoid(*x) - t) / n;
                    }
                }
            }
            Op::Dice { probs, target, eps } => {
                let p = v(probs).data();
                let t = v(target).data();
                let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                let s: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>() + eps;
                let num = 2.0 * inter + eps;
                if let Some(d) = slot(nodes, grads, probs) {
                    for (d, tv) in d.iter_mut().zip(t) {
                        *d += g[0] * -(2.0 * tv * s - num) / (s * s);
                    }
                }
            }
            Op::Cosine { a, b, eps } => {
                let (bn, c, h, w) = dims4(v(a).shape());
                let plane = h * w;
                let av = v(a).data();
                let bv = v(b).data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..bn {
                    for p in 0..plane {
                        let at = |ch: usize| (i * c + ch) * plane + p;
                        let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            d += av[at(ch)] * bv[at(ch)];
                            na += av[at(ch)] * av[at(ch)];
                            nb += bv[at(ch)] * bv[at(ch)];
                        }
                        let (na, nb) = (na.sqrt(), nb.sqrt());
                        let live = na * nb > eps;
                        let den = (na * nb).max(eps);
                        let up = g[i * plane + p];
                        // d/da [d / (|a||b|)] = b/den − d·|b|·(a/|a|)/den²; the clamp has no a-dependence
                        let ka = if live { d * nb / (na * den * den) } else { 0.0 };
                        let kb = if live { d * na / (nb * den * den) } else { 0.0 };
                        for ch in 0..c {
                            ga[at(ch)] += up * (bv[at(ch)] / den - ka * av[at(ch)]);
                            gb[at(ch)] += up * (av[at(ch)] / den - kb * bv[at(ch)]);
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, a) {
                    add_into(d, &ga);
                }
                if let Some(d) = slot(nodes, grads, b) {
                    add_into(d, &gb);
                }
            }
            Op::StraightThrough { soft } => {
                if let Some(d) = slot(nodes, grads, soft) {
                    add_into(d, g);
                }
            }
            Op::BatchNorm { x, gamma, beta, ref xhat, ref inv_std, batch } => {
                let (bn, c, h, w) = dims4(v(x).shape());
                let plane = h * w;
                let count = (bn * plane) as f64;
                let gv = v(gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..bn {
                    for ch in 0..c {
                        let o = (i * c + ch) * plane;
                        for j in o..o + plane {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, gamma) {
                    add_into(d, &sum_gx);
                }
                if let Some(d) = slot(nodes, grads, beta) {
                    add_into(d, &sum_g);
                }
                if let Some(d) = slot(nodes, grads, x) {
                    for i in 0..bn {
                        for ch in 0..c {
                            let o = (i * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for j in o..o + plane {
                                d[j] += if batch {
                                    k * (g[j] - sum_g[ch] / count - xhat[j] * sum_gx[ch] / count)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::EmbedRow { table, row } => {
                let d_len = out.len();
                if let Some(d) = slot(nodes, grads, table) {
                    add_into(&mut d[row * d_len..(row + 1) * d_len], g);
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = slot(nodes, grads, x) {
                    add_into(d, g);
                }
            }
            Op::SliceBatch { .. } | Op::ConcatBatch { .. } | Op::AvgPool { .. } | Op::DepthToSpace { .. } => {
                backward_extra(self, nodes, out, g, grads)
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    /// Batch items `[start, start + len)` of a rank-4 tensor.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.val(x).batch_slice(start, len)?;
        Ok(self.push_op(value, Op::SliceBatch { x: x.0, start }, &[x]))
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::stack_batch(&[self.val(a), self.val(b)])?;
        Ok(self.push_op(value, Op::ConcatBatch { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Non-overlapping `factor × factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        ensure!(factor >= 1 && h % factor == 0 && w % factor == 0, "avg_pool: factor {} does not divide {}x{}", factor, h, w);
        let (ho, wo) = (h / factor, w / factor);
        let xv = self.val(x).data();
        let norm = 1.0 / (factor * factor) as f64;
        let mut data = vec![0.0; bn * c * ho * wo];
        for p in 0..bn * c {
            for y in 0..h {
                for xx in 0..w {
                    data[p * ho * wo + (y / factor) * wo + xx / factor] += norm * xv[p * h * w + y * w + xx];
                }
            }
        }
        let value = Tensor::new(vec![bn, c, ho, wo], data)?;
        Ok(self.push_op(value, Op::AvgPool { x: x.0, factor }, &[x]))
    }

    /// Rearranges `[B, C·r², H, W]` into `[B, C, H·r, W·r]`; input channel
    /// `c·r² + i·r + j` fills sub-pixel `(i, j)` of output channel `c`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let (bn, c, h, w) = self.val(x).dims4()?;
        ensure!(r >= 1 && c % (r * r) == 0, "depth_to_space: {} channels not divisible by {}", c, r * r);
        let co = c / (r * r);
        let xv = self.val(x).data();
        let mut data = vec![0.0; xv.len()];
        for_each_d2s(bn, co, h, w, r, |src, dst| data[dst] = xv[src]);
        let value = Tensor::new(vec![bn, co, h * r, w * r], data)?;
        Ok(self.push_op(value, Op::DepthToSpace { x: x.0, r }, &[x]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        ensure!(factor >= 1, "upsample: factor must be positive");
        let mut v = x;
        let mut f = factor;
        while f > 1 {
            ensure!(f % 2 == 0, "upsample: factor {} is not a power of two", factor);
            v = self.upsample2x(v)?;
            f /= 2;
        }
        Ok(v)
    }
}

fn for_each_d2s(bn: usize, co: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for b in 0..bn {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src_plane = ((b * co + c) * r * r + i * r + j) * h * w;
                    let dst_plane = (b * co + c) * ho * wo;
                    for y in 0..h {
                        for x in 0..w {
                            f(src_plane + y * w + x, dst_plane + (y * r + i) * wo + x * r + j);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_extra(op: &Op, nodes: &[Node], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let v = |j: usize| &nodes[j].value;
    match *op {
        Op::SliceBatch { x, start } => {
            let plane: usize = v(x).shape()[1..].iter().product();
            if let Some(d) = slot(nodes, grads, x) {
                add_into(&mut d[start * plane..start * plane + out.len()], g);
            }
        }
        Op::ConcatBatch { a, b } => {
            let na = v(a).len();
            if let Some(d) = slot(nodes, grads, a) {
                add_into(d, &g[..na]);
            }
            if let Some(d) = slot(nodes, grads, b) {
                add_into(d, &g[na..]);
            }
        }
        Op::AvgPool { x, factor } => {
            let (bn, c, h, w) = dims4(v(x).shape());
            let (ho, wo) = (h / factor, w / factor);
            let norm = 1.0 / (factor * factor) as f64;
            if let Some(d) = slot(nodes, grads, x) {
                for p in 0..bn * c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[p * h * w + y * w + xx] += norm * g[p * ho * wo + (y / factor) * wo + xx / factor];
                        }
                    }
                }
            }
        }
        Op::DepthToSpace { x, r } => {
            let (bn, c, h, w) = dims4(v(x).shape());
            if let Some(d) = slot(nodes, grads, x) {
                for_each_d2s(bn, c / (r * r), h, w, r, |src, dst| d[src] += g[dst]);
            }
        }
        _ => unreachable!("backward_extra called for a core op"),
    }
}

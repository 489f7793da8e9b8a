use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, align_corners_taps, ConvGeometry, LerpTap, MatRef};
use super::Tensor;
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Per-channel statistics returned by [`Tape::standardize_channels`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        rows: Vec<LerpTap>,
        cols: Vec<LerpTap>,
    },
    SignedGather {
        x: Var,
        index: Arc<[usize]>,
        sign: Arc<[f64]>,
    },
    BceSum {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SelectCols {
        x: Var,
        index: Vec<usize>,
    },
    L1Similarity {
        a: Var,
        b: Var,
        alpha: Var,
        beta: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it; [`Tape::backward`] visits nodes in exact reverse order. A tape is
/// single-threaded; independent tapes can run on separate threads.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(var.index).ok_or(Error::ForeignVar)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs
            .iter()
            .any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.node(var)?.value)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(self.node(var)?.value.shape())
    }

    pub fn data(&self, var: Var) -> Result<&[f64]> {
        Ok(self.node(var)?.value.data())
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached `var`.
    pub fn grad(&self, var: Var) -> Result<Option<&[f64]>> {
        Ok(self.node(var)?.value.grad())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let ishape = self.shape(input)?.to_vec();
        let kshape = self.shape(kernel)?.to_vec();
        let bshape = self.shape(bias)?.to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {ishape:?} must be [C,H,W], kernel {kshape:?} must be [Co,Ci,kh,kw]"),
            ));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c_in || bshape != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("input {ishape:?}, kernel {kshape:?}, bias {bshape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let geom = ConvGeometry {
            channels: c_in,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.data(input)?, &geom);
        let out = kernels::conv_forward(
            self.data(kernel)?,
            self.data(bias)?,
            &cols,
            c_out,
            geom.patch_len(),
            geom.out_len(),
        );
        let value = Tensor::from_parts(vec![c_out, geom.out_h, geom.out_w], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties go to the first element in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let s = v.shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("maxpool2", format!("need [C,H>=2,W>=2], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = v.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        self.push("maxpool2", value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// `y = W·x + b` for `x: [m]`, `W: [n, m]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x)?, self.shape(w)?, self.shape(b)?);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, W {ws:?}, b {bs:?}"),
            ));
        }
        let (n, m) = (ws[0], ws[1]);
        let (xd, wd, bd) = (self.data(x)?, self.data(w)?, self.data(b)?);
        let out = (0..n)
            .map(|i| {
                let mut acc = bd[i];
                for j in 0..m {
                    acc += wd[i * m + j] * xd[j];
                }
                acc
            })
            .collect();
        let value = Tensor::from_parts(vec![n], out);
        self.push("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("need [C,H,W], got {s:?}")));
        }
        let plane = s[1] * s[2];
        let out = v
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_parts(vec![s[0]], out);
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a)?, self.data(b)?);
        let data = va.data().iter().zip(vb).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a)?, self.data(b)?);
        let data = va.data().iter().zip(vb).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x)?;
        let data = v.data().iter().map(|a| a * factor).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x)?.iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Flat sub-range `[start, start+len)` as a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.data(x)?;
        if len == 0 || start + len > d.len() {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} of {} values", start + len, d.len()),
            ));
        }
        let value = Tensor::from_parts(vec![len], d[start..start + len].to_vec());
        self.push("slice", value, Op::Slice { x, start }, &[x])
    }

    /// Bilinear upsampling of `[C, h, w]` to `[C, out_h, out_w]` with
    /// aligned corners: input corner pixels land exactly on output corners.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = self.value(x)?;
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::shape("bilinear_upsample", format!("need [C,h,w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument(format!(
                "bilinear_upsample cannot downsample {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let rows = align_corners_taps(h, out_h);
        let cols = align_corners_taps(w, out_w);
        let src = v.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for r in &rows {
                for t in &cols {
                    let v00 = plane[r.lo * w + t.lo];
                    let v01 = plane[r.lo * w + t.hi];
                    let v10 = plane[r.hi * w + t.lo];
                    let v11 = plane[r.hi * w + t.hi];
                    let top = v00 + t.weight * (v01 - v00);
                    let bot = v10 + t.weight * (v11 - v10);
                    out.push(top + r.weight * (bot - top));
                }
            }
        }
        let value = Tensor::from_parts(vec![c, out_h, out_w], out);
        self.push("bilinear_upsample", value, Op::Upsample { x, rows, cols }, &[x])
    }

    /// `out[i] = x[index[i]] * sign[i]`.
    pub fn signed_gather(&mut self, x: Var, index: Arc<[usize]>, sign: Arc<[f64]>) -> Result<Var> {
        let d = self.data(x)?;
        if index.len() != sign.len() || index.is_empty() || index.iter().any(|&i| i >= d.len()) {
            return Err(Error::shape(
                "signed_gather",
                format!("{} indices into {} values", index.len(), d.len()),
            ));
        }
        let out = index.iter().zip(sign.iter()).map(|(&i, &s)| d[i] * s).collect();
        let value = Tensor::from_parts(vec![index.len()], out);
        self.push("signed_gather", value, Op::SignedGather { x, index, sign }, &[x])
    }

    /// `-sum(t·ln p + (1-t)·ln(1-p))` with `p` clamped to `[eps, 1-eps]`.
    pub fn bce_sum(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let d = self.data(p)?;
        if d.len() != target.len() {
            return Err(Error::shape(
                "bce_sum",
                format!("{} probabilities, {} targets", d.len(), target.len()),
            ));
        }
        let mut total = 0.0;
        for (&pv, &t) in d.iter().zip(target) {
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let op = Op::BceSum {
            p,
            target: target.to_vec(),
            eps,
        };
        self.push("bce_sum", Tensor::scalar(total), op, &[p])
    }

    /// Mean softmax cross-entropy over the trailing positions of `[C, ...]`
    /// logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits)?;
        let c = v.shape()[0];
        let n = v.numel() / c;
        if v.shape().len() < 2 || labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", v.shape(), labels.len()),
            ));
        }
        let z = v.data();
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for pos in 0..n {
            let max = (0..c).map(|k| z[k * n + pos]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in 0..c {
                let e = (z[k * n + pos] - max).exp();
                probs[k * n + pos] = e;
                denom += e;
            }
            for k in 0..c {
                probs[k * n + pos] /= denom;
            }
            total -= z[labels[pos] * n + pos] - max - denom.ln();
        }
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push("softmax_cross_entropy", Tensor::scalar(total / n as f64), op, &[logits])
    }

    /// Standardizes each row of `[C, N]` to zero mean and unit variance,
    /// with gradients flowing through the statistics.
    pub fn standardize_channels(&mut self, x: Var, eps: f64) -> Result<(Var, ChannelStats)> {
        let v = self.value(x)?;
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::shape("standardize_channels", format!("need [C,N], got {s:?}")));
        }
        let (c, n) = (s[0], s[1]);
        let d = v.data();
        let mut out = Vec::with_capacity(c * n);
        let mut stats = ChannelStats {
            mean: Vec::with_capacity(c),
            inv_std: Vec::with_capacity(c),
        };
        for row in d.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|a| (a - mean) * inv));
            stats.mean.push(mean);
            stats.inv_std.push(inv);
        }
        let value = Tensor::from_parts(vec![c, n], out);
        let op = Op::Standardize {
            x,
            inv_std: stats.inv_std.clone(),
        };
        let var = self.push("standardize_channels", value, op, &[x])?;
        Ok((var, stats))
    }

    /// Concatenates `[C, N_i]` tensors along the second axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let c = self.shape(first)?[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x)?;
            if s.len() != 2 || s[0] != c {
                return Err(Error::shape("concat_cols", format!("{s:?} with {c} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; c * total];
        let mut offset = 0;
        for (&x, &wdt) in xs.iter().zip(&widths) {
            let d = self.data(x)?;
            for row in 0..c {
                out[row * total + offset..row * total + offset + wdt]
                    .copy_from_slice(&d[row * wdt..(row + 1) * wdt]);
            }
            offset += wdt;
        }
        let value = Tensor::from_parts(vec![c, total], out);
        self.push("concat_cols", value, Op::ConcatCols(xs.to_vec()), xs)
    }

    /// Picks columns of a `[C, N]` tensor.
    pub fn select_cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x)?;
        let s = v.shape();
        if s.len() != 2 || index.is_empty() || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("select_cols", format!("{s:?} with {} indices", index.len())));
        }
        let (c, n) = (s[0], s[1]);
        let d = v.data();
        let mut out = Vec::with_capacity(c * index.len());
        for row in 0..c {
            out.extend(index.iter().map(|&i| d[row * n + i]));
        }
        let value = Tensor::from_parts(vec![c, index.len()], out);
        let op = Op::SelectCols {
            x,
            index: index.to_vec(),
        };
        self.push("select_cols", value, op, &[x])
    }

    /// Pairwise weighted-L1 logits `z[i, j] = beta + sum_c alpha[c]·|a[c,i] - b[c,j]|`
    /// for `a: [C, Na]`, `b: [C, Nb]`.
    pub fn l1_similarity_logits(&mut self, a: Var, b: Var, alpha: Var, beta: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        let (salpha, sbeta) = (self.shape(alpha)?, self.shape(beta)?);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] || salpha != [sa[0]] || sbeta != [1] {
            return Err(Error::shape(
                "l1_similarity_logits",
                format!("a {sa:?}, b {sb:?}, alpha {salpha:?}, beta {sbeta:?}"),
            ));
        }
        let (c, na, nb) = (sa[0], sa[1], sb[1]);
        let at = transpose(self.data(a)?, c, na);
        let bt = transpose(self.data(b)?, c, nb);
        let al = self.data(alpha)?;
        let be = self.data(beta)?[0];
        let mut out = Vec::with_capacity(na * nb);
        for i in 0..na {
            let ai = &at[i * c..(i + 1) * c];
            for j in 0..nb {
                let bj = &bt[j * c..(j + 1) * c];
                let mut acc = be;
                for ch in 0..c {
                    acc += al[ch] * (ai[ch] - bj[ch]).abs();
                }
                out.push(acc);
            }
        }
        let value = Tensor::from_parts(vec![na, nb], out);
        let op = Op::L1Similarity { a, b, alpha, beta };
        self.push("l1_similarity_logits", value, op, &[a, b, alpha, beta])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added into the
    /// `grad` buffer of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            match self.nodes[i].value.grad.as_mut() {
                Some(existing) => add_into(existing, &g),
                None => self.nodes[i].value.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.index].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (r, p) = (geom.patch_len(), geom.out_len());
                if let Some(db) = slot(nodes, grads, *bias) {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += g[co * p..(co + 1) * p].iter().sum::<f64>();
                    }
                }
                if let Some(dk) = slot(nodes, grads, *kernel) {
                    kernels::gemm(
                        c_out,
                        p,
                        r,
                        MatRef::rows(g, p),
                        MatRef::transposed(cols, p),
                        1.0,
                        dk,
                    );
                }
                if nodes[input.index].requires_grad {
                    let mut dcols = vec![0.0; r * p];
                    kernels::gemm(
                        r,
                        c_out,
                        p,
                        MatRef::transposed(val(*kernel), r),
                        MatRef::rows(g, p),
                        0.0,
                        &mut dcols,
                    );
                    if let Some(dx) = slot(nodes, grads, *input) {
                        kernels::col2im(&dcols, geom, dx);
                    }
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        if yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = nodes[w.index].value.shape();
                let (n, m) = (ws[0], ws[1]);
                let (xd, wd) = (val(*x), val(*w));
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..n {
                        for j in 0..m {
                            dx[j] += wd[i * m + j] * g[i];
                        }
                    }
                }
                if let Some(dw) = slot(nodes, grads, *w) {
                    for i in 0..n {
                        for j in 0..m {
                            dw[i * m + j] += g[i] * xd[j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    add_into(db, g);
                }
            }
            Op::GlobalAvgPool(x) => {
                let plane = nodes[x.index].value.numel() / g.len();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (chunk, &gi) in dx.chunks_mut(plane).zip(g) {
                        let share = gi / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Slice { x, start } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(&mut dx[*start..*start + g.len()], g);
                }
            }
            Op::Upsample { x, rows, cols } => {
                let s = nodes[x.index].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (rows.len(), cols.len());
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        for (yi, r) in rows.iter().enumerate() {
                            for (xi, t) in cols.iter().enumerate() {
                                let gi = gp[yi * ow + xi];
                                let (wy, wx) = (r.weight, t.weight);
                                plane[r.lo * w + t.lo] += gi * (1.0 - wx) * (1.0 - wy);
                                plane[r.lo * w + t.hi] += gi * wx * (1.0 - wy);
                                plane[r.hi * w + t.lo] += gi * (1.0 - wx) * wy;
                                plane[r.hi * w + t.hi] += gi * wx * wy;
                            }
                        }
                    }
                }
            }
            Op::SignedGather { x, index, sign } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((&i, &s), &gi) in index.iter().zip(sign.iter()).zip(g) {
                        dx[i] += s * gi;
                    }
                }
            }
            Op::BceSum { p, target, eps } => {
                let pv = val(*p);
                if let Some(dp) = slot(nodes, grads, *p) {
                    for ((d, &pi), &t) in dp.iter_mut().zip(pv).zip(target) {
                        if pi > *eps && pi < 1.0 - eps {
                            *d += g[0] * (-t / pi + (1.0 - t) / (1.0 - pi));
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let scale = g[0] / n as f64;
                if let Some(dz) = slot(nodes, grads, *logits) {
                    for (k, (d, &pr)) in dz.iter_mut().zip(probs).enumerate() {
                        let (cls, pos) = (k / n, k % n);
                        let onehot = if labels[pos] == cls { 1.0 } else { 0.0 };
                        *d += scale * (pr - onehot);
                    }
                }
            }
            Op::Standardize { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (ch, &inv) in inv_std.iter().enumerate() {
                        let gy = &g[ch * n..(ch + 1) * n];
                        let yy = &y[ch * n..(ch + 1) * n];
                        let mean_g = gy.iter().sum::<f64>() / n as f64;
                        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for k in 0..n {
                            dx[ch * n + k] += inv * (gy[k] - mean_g - yy[k] * mean_gy);
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let s = nodes[x.index].value.shape();
                    let (c, wdt) = (s[0], s[1]);
                    if let Some(dx) = slot(nodes, grads, x) {
                        for row in 0..c {
                            add_into(
                                &mut dx[row * wdt..(row + 1) * wdt],
                                &g[row * total + offset..row * total + offset + wdt],
                            );
                        }
                    }
                    offset += wdt;
                }
            }
            Op::SelectCols { x, index } => {
                let n = nodes[x.index].value.shape()[1];
                let m = index.len();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (row, gr) in g.chunks(m).enumerate() {
                        for (&i, &gi) in index.iter().zip(gr) {
                            dx[row * n + i] += gi;
                        }
                    }
                }
            }
            Op::L1Similarity { a, b, alpha, beta } => {
                let sa = nodes[a.index].value.shape();
                let c = sa[0];
                let na = sa[1];
                let nb = nodes[b.index].value.shape()[1];
                let at = transpose(val(*a), c, na);
                let bt = transpose(val(*b), c, nb);
                let al = val(*alpha);
                let mut dat = vec![0.0; na * c];
                let mut dbt = vec![0.0; nb * c];
                let mut dal = vec![0.0; c];
                for i in 0..na {
                    let ai = &at[i * c..(i + 1) * c];
                    for j in 0..nb {
                        let gij = g[i * nb + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = &bt[j * c..(j + 1) * c];
                        for ch in 0..c {
                            let diff = ai[ch] - bj[ch];
                            dal[ch] += gij * diff.abs();
                            let s = gij * al[ch] * sign(diff);
                            dat[i * c + ch] += s;
                            dbt[j * c + ch] -= s;
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, *beta) {
                    d[0] += g.iter().sum::<f64>();
                }
                if let Some(d) = slot(nodes, grads, *alpha) {
                    add_into(d, &dal);
                }
                if let Some(d) = slot(nodes, grads, *a) {
                    add_into(d, &transpose(&dat, na, c));
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    add_into(d, &transpose(&dbt, nb, c));
                }
            }
        }
    }
}

/// Lazily allocated accumulator for an input that wants a gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.index];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(grads[v.index].get_or_insert_with(|| vec![0.0; len]))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

use super::kernels::{col2im_add, im2col, mm_abt_acc, mm_acc, mm_atb_acc};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics policy for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call, used by the
/// caller to update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch holds a single element per channel).
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    SqNorm(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    BroadcastRows(Var),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of operations. Parents always precede children, so the
/// insertion order is a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes are well formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf copied from a tensor; inherits its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    /// Leaf marked for gradient accumulation.
    pub fn parameter(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
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
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f64> = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))?;
        if let Err(e) = check_finite("div", self.value(out)) {
            self.nodes.pop();
            return Err(e);
        }
        Ok(out)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, k), rg)
    }

    /// `k - a` elementwise, `k` constant.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Result<Var> {
        let c = self.constant_scalar(k);
        self.sub(c, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        mm_acc(self.value(a), self.value(b), &mut value, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "transpose expects a 2-D tensor, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let va = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = va[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    /// 2-D convolution. `input` is `[N, C, H, W]`, `weight` is `[O, C, KH, KW]`,
    /// `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: sw,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: si,
                right: sw,
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let mut value = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let x = self.value(input);
        let wt = self.value(weight);
        for s in 0..n {
            im2col(
                &x[s * c * h * w..(s + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut cols,
            );
            let out = &mut value[s * o * ho * wo..(s + 1) * o * ho * wo];
            mm_acc(wt, &cols, out, o, ckk, ho * wo);
            if let Some(b) = bias {
                let bv = self.value(b);
                for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            vec![n, o, ho, wo],
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), rg)
    }

    /// Batch normalization over the channel axis (axis 1) of a `[N, C]` or
    /// `[N, C, H, W]` input. Returns the batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let s = self.shape(input).to_vec();
        if !(s.len() == 2 || s.len() == 4) {
            return Err(Error::InvalidInput(format!(
                "batch_norm expects [N,C] or [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm affine",
                    left: s.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let m = (n * hw) as f64;
        let x = self.value(input);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let stats;
        match mode {
            BnMode::Train => {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        mean[ch] += x[base..base + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        var[ch] += x[base..base + hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                stats = Some(BnBatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            BnMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        left: vec![c],
                        right: vec![rm.len(), rv.len()],
                    });
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                stats = None;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut value = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    value[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let out = self.push(
            s,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || window == 0 || s[2] < window || s[3] < window {
            return Err(Error::InvalidInput(format!(
                "avg_pool window {window} does not fit input {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / window, w / window);
        let x = self.value(a);
        let mut value = vec![0.0; n * c * ho * wo];
        let norm = (window * window) as f64;
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for di in 0..window {
                        for dj in 0..window {
                            acc += x[nc * h * w + (i * window + di) * w + j * window + dj];
                        }
                    }
                    value[nc * ho * wo + i * wo + j] = acc / norm;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, c, ho, wo], value, Op::AvgPool { input: a, window }, rg))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "global_avg_pool expects [N,C,H,W], got {s:?}"
            )));
        }
        let hw = s[2] * s[3];
        let value = self
            .value(a)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[0], s[1]], value, Op::GlobalAvgPool(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| {
            Error::InvalidInput("softmax of a scalar is undefined".into())
        })?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(last) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        check_finite("softmax", &value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(s, value, Op::Softmax(a), rg))
    }

    fn unary(
        &mut self,
        name: &str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
        guard: bool,
    ) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        if guard {
            check_finite(name, &value)?;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a), true)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a), true)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a), true)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, Op::Square(a), false)
            .expect("unguarded")
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            "clamp",
            a,
            |x| x.clamp(lo, hi),
            Op::Clamp { input: a, lo, hi },
            false,
        )
        .expect("unguarded")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![v], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![v], Op::Mean(a), rg)
    }

    /// Mean accumulated in ascending value order, so the result depends only
    /// on the multiset of elements and not on their layout.
    pub fn mean_sorted(&mut self, a: Var) -> Var {
        let mut vals = self.value(a).to_vec();
        vals.sort_by(f64::total_cmp);
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![v], Op::Mean(a), rg)
    }

    /// Sum of a 2-D tensor along `axis` (0 sums rows together, 1 sums each row).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::InvalidInput(format!(
                "sum_axis({axis}) expects a 2-D tensor, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let (shape, value) = if axis == 0 {
            let mut v = vec![0.0; c];
            for row in x.chunks(c) {
                v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            (vec![c], v)
        } else {
            (vec![r], x.chunks(c).map(|row| row.iter().sum()).collect())
        };
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::SumAxis { input: a, axis }, rg))
    }

    /// Squared L2 norm of all elements.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![v], Op::SqNorm(a), rg)
    }

    /// Concatenate along axis 0. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::InvalidInput(format!(
                "slice {start}..{end} on axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a);
        let mut value = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            value.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            value,
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Select rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index.is_empty() {
            return Err(Error::InvalidInput("gather_rows needs rows and indices".into()));
        }
        let inner: usize = s[1..].iter().product();
        if let Some(bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidInput(format!(
                "gather index {bad} out of range for {} rows",
                s[0]
            )));
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(index.len() * inner);
        for &i in index {
            value.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.clone();
        shape[0] = index.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            value,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Repeat `a` as `rows` stacked copies: `S -> [rows, S...]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(Error::InvalidInput("broadcast_rows to zero rows".into()));
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(rows * x.len());
        for _ in 0..rows {
            value.extend_from_slice(x);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(self.shape(a));
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::BroadcastRows(a), rg))
    }

    /// Matrix of squared Euclidean distances between the rows of `a` `[N, d]`
    /// and the rows of `b` `[M, d]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                left: sa,
                right: sb,
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (xa, xb) = (self.value(a), self.value(b));
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            let ra = &xa[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &xb[j * d..(j + 1) * d];
                value[i * m + j] = ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], value, Op::SqDist(a, b), rg))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.wants(v) {
            add_into(&mut grads[v.0], g);
        }
    }

    /// Reduce an output-shaped gradient onto a (possibly scalar-broadcast) operand.
    fn send_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        if self.nodes[v.0].value.len() == 1 && g.len() != 1 {
            let s: f64 = g.iter().sum();
            add_into(&mut grads[v.0], &[s]);
        } else {
            add_into(&mut grads[v.0], &g);
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_broadcast(grads, *a, g.to_vec());
                self.send_broadcast(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send_broadcast(grads, *a, g.to_vec());
                self.send_broadcast(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * pick(vb, i)).collect();
                    self.send_broadcast(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.iter().enumerate().map(|(i, gi)| gi * pick(va, i)).collect();
                    self.send_broadcast(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi / pick(vb, i)).collect();
                    self.send_broadcast(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| -gi * out[i] / pick(vb, i))
                        .collect();
                    self.send_broadcast(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                self.send(grads, *a, &ga);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    mm_abt_acc(g, self.value(*b), &mut ga, m, n, k);
                    self.send(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    mm_atb_acc(self.value(*a), g, &mut gb, k, m, n);
                    self.send(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.send(grads, *a, &ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let ckk = c * kh * kw;
                let x = self.value(*input);
                let wt = self.value(*weight);
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; wt.len()] } else { Vec::new() };
                let mut cols = vec![0.0; ckk * ho * wo];
                let mut dcols = vec![0.0; ckk * ho * wo];
                for s in 0..n {
                    let gy = &g[s * o * ho * wo..(s + 1) * o * ho * wo];
                    if want_w {
                        im2col(
                            &x[s * c * h * w..(s + 1) * c * h * w],
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            ho,
                            wo,
                            &mut cols,
                        );
                        mm_abt_acc(gy, &cols, &mut gw, o, ho * wo, ckk);
                    }
                    if want_x {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        mm_atb_acc(wt, gy, &mut dcols, ckk, o, ho * wo);
                        col2im_add(
                            &dcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            ho,
                            wo,
                            &mut gx[s * c * h * w..(s + 1) * c * h * w],
                        );
                    }
                }
                if want_x {
                    self.send(grads, *input, &gx);
                }
                if want_w {
                    self.send(grads, *weight, &gw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; o];
                        for s in 0..n {
                            for (oc, gbv) in gb.iter_mut().enumerate() {
                                let base = (s * o + oc) * ho * wo;
                                *gbv += g[base..base + ho * wo].iter().sum::<f64>();
                            }
                        }
                        self.send(grads, *b, &gb);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.send(grads, *a, &ga);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = &node.shape;
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let gm = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut gx = vec![0.0; g.len()];
                    if *train {
                        let m = (n * hw) as f64;
                        // dxhat = g * gamma; sums over the channel reduce to the
                        // dbeta / dgamma accumulators scaled by gamma.
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let sum_dx = dbeta[ch] * gm[ch];
                                let sum_dx_xhat = dgamma[ch] * gm[ch];
                                for i in base..base + hw {
                                    let dxhat = g[i] * gm[ch];
                                    gx[i] = inv_std[ch] / m
                                        * (m * dxhat - sum_dx - xhat[i] * sum_dx_xhat);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    gx[i] = g[i] * gm[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    self.send(grads, *input, &gx);
                }
                self.send(grads, *gamma, &dgamma);
                self.send(grads, *beta, &dbeta);
            }
            Op::AvgPool { input, window } => {
                let s = self.shape(*input);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let norm = (window * window) as f64;
                let mut ga = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = g[nc * ho * wo + i * wo + j] / norm;
                            for di in 0..*window {
                                for dj in 0..*window {
                                    ga[nc * h * w + (i * window + di) * w + j * window + dj] +=
                                        gv;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *input, &ga);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let mut ga = Vec::with_capacity(hw * g.len());
                for gv in g {
                    ga.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                self.send(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let last = *node.shape.last().expect("non-scalar");
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks(last)
                    .zip(out.chunks(last))
                    .zip(ga.chunks_mut(last))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for k in 0..last {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.send(grads, *a, &ga);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                self.send(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, yi)| gi * yi).collect();
                self.send(grads, *a, &ga);
            }
            Op::Sqrt(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, yi)| gi * 0.5 / yi).collect();
                self.send(grads, *a, &ga);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                self.send(grads, *a, &ga);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if xi < lo || xi > hi { 0.0 } else { *gi })
                    .collect();
                self.send(grads, *input, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                self.send(grads, *a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![g[0] / n as f64; n];
                self.send(grads, *a, &ga);
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = if *axis == 0 { g[j] } else { g[i] };
                    }
                }
                self.send(grads, *input, &ga);
            }
            Op::SqNorm(a) => {
                let ga: Vec<f64> = self.value(*a).iter().map(|x| 2.0 * g[0] * x).collect();
                self.send(grads, *a, &ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.send(grads, *p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut ga = vec![0.0; self.value(*input).len()];
                let width = (end - start) * inner;
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.send(grads, *input, &ga);
            }
            Op::Reshape(a) => self.send(grads, *a, g),
            Op::GatherRows { input, index } => {
                let s = self.shape(*input);
                let inner: usize = s[1..].iter().product();
                let mut ga = vec![0.0; self.value(*input).len()];
                for (k, &i) in index.iter().enumerate() {
                    for t in 0..inner {
                        ga[i * inner + t] += g[k * inner + t];
                    }
                }
                self.send(grads, *input, &ga);
            }
            Op::BroadcastRows(a) => {
                let len = self.value(*a).len();
                let mut ga = vec![0.0; len];
                for chunk in g.chunks(len) {
                    ga.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                }
                self.send(grads, *a, &ga);
            }
            Op::SqDist(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (n, m) = (node.shape[0], node.shape[1]);
                let d = self.shape(*a)[1];
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = 2.0 * gij * (xa[i * d + t] - xb[j * d + t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                self.send(grads, *a, &ga);
                self.send(grads, *b, &gb);
            }
        }
    }
}

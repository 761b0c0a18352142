use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<T>,
}

/// Separable pooling weights for one region: rows `r0..r0+wy.len()`, cols `c0..c0+wx.len()`.
#[derive(Clone, Debug)]
pub(crate) struct RegionWeights {
    pub batch: usize,
    pub r0: usize,
    pub wy: Vec<f64>,
    pub c0: usize,
    pub wx: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    BiasAdd {
        x: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    GlobalAvgPool(usize),
    AvgPool {
        x: usize,
        k: usize,
        s: usize,
    },
    Upsample2(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    MatMulT(usize, usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    RowDot(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    FlattenSpatial(usize),
    RegionPool {
        fm: usize,
        regions: Vec<RegionWeights>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x)
            | Op::AvgPool { x, .. }
            | Op::Upsample2(x)
            | Op::L2Normalize { x, .. }
            | Op::SoftmaxCe { logits: x, .. }
            | Op::SliceRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::FlattenSpatial(x)
            | Op::RegionPool { fm: x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMulT(a, b) | Op::RowDot(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// tape is already topologically sorted and backward walks it in reverse.
pub struct Graph<T> {
    inner: RefCell<Inner<T>>,
    checks: bool,
    norm_checks: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when none reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// New graph; finiteness and degenerate-norm checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    pub fn with_checks(checks: bool) -> Self {
        Graph {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
            checks,
            norm_checks: checks,
        }
    }

    /// Keeps finiteness checks but lets `l2_normalize` zero degenerate rows
    /// silently, as a training step with a ReLU predictor must.
    pub fn tolerate_degenerate_norms(mut self) -> Self {
        self.norm_checks = false;
        self
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.checks && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op
            .inputs()
            .iter()
            .any(|&i| inner.nodes[i].requires_grad);
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: a constant leaf holding the current value of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(inner.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, ci, h, wd] = xv.dims4("conv2d")?;
        let [co, wci, k, k2] = wv.dims4("conv2d")?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", xv.shape(), wv.shape()),
            ));
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_out(h, k, stride, pad),
            kernels::conv_out(wd, k, stride, pad),
        ) else {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        };
        let d = ConvDims {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            oh,
            ow,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(xv.data(), wv.data(), &d);
        self.push(
            Tensor::from_vec(&[n, co, oh, ow], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Adds a per-channel bias to an NCHW or N x C tensor.
    pub fn bias_add(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().get(1).unwrap_or(&0);
        if xv.rank() < 2 || bv.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % c];
        }
        self.push(
            Tensor::from_vec(xv.shape(), out)?,
            Op::BiasAdd { x: x.0, b: b.0 },
            "bias_add",
        )
    }

    /// Batch normalization over N (and H, W for rank-4 input) per channel.
    ///
    /// `running` supplies `(mean, var)` for [`BnMode::Eval`]; in training mode
    /// it is ignored and the batch statistics are returned instead.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: (&Tensor<T>, &Tensor<T>),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("{shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            same_shape("batch_norm", &self.shape(p), &[c])?;
        }
        let m = n * inner;
        let data = xv.data();
        let idx = |b: usize, ch: usize, s: usize| (b * c + ch) * inner + s;

        let (mean, var_b, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateBatch(m));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        for s in 0..inner {
                            acc += data[idx(b, ch, s)];
                        }
                    }
                    let mu = acc / T::of(m as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        for s in 0..inner {
                            let d = data[idx(b, ch, s)] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::of(m as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::of(m as f64 / (m - 1) as f64))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                let (rm, rv) = running;
                same_shape("batch_norm", rm.shape(), &[c])?;
                same_shape("batch_norm", rv.shape(), &[c])?;
                (rm.data().to_vec(), rv.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_b
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                for s in 0..inner {
                    let i = idx(b, ch, s);
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let v = self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x.0), "relu")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        self.push(Tensor::from_vec(av.shape(), data)?, Op::Add(a.0, b.0), "add")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        self.push(Tensor::from_vec(av.shape(), data)?, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x.0, s), "scale")
    }

    /// N x C x H x W -> N x C.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::from_vec(&[n, c], out)?,
            Op::GlobalAvgPool(x.0),
            "global_avg_pool",
        )
    }

    /// Average pooling with a `k x k` kernel and stride `s`, no padding.
    pub fn avg_pool(&self, x: Var, k: usize, s: usize) -> Result<Var> {
        let xv = self.value(x);
        let dims @ [n, c, h, w] = xv.dims4("avg_pool")?;
        if k == 0 || s == 0 || k > h || k > w {
            return Err(Error::KernelTooLarge { kernel: k, h, w });
        }
        let (out, oh, ow) = kernels::avg_pool_forward(xv.data(), dims, k, s);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            Op::AvgPool { x: x.0, k, s },
            "avg_pool",
        )
    }

    /// Nearest-neighbour upsampling by 2 in both spatial axes.
    pub fn upsample_nearest2x(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("upsample")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let xs = &xv.data()[p * h * w..(p + 1) * h * w];
            let os = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    os[i * ow + j] = xs[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            Op::Upsample2(x.0),
            "upsample",
        )
    }

    /// `x * w^T + b` with `x: N x I`, `w: O x I`, `b: O`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, i] = xv.dims2("linear")?;
        let [o, wi] = wv.dims2("linear")?;
        if wi != i {
            return Err(Error::shape(
                "linear",
                format!("{:?} x {:?}^T", xv.shape(), wv.shape()),
            ));
        }
        let mut out = kernels::matmul_t(xv.data(), wv.data(), n, o, i);
        if let Some(b) = b {
            let bv = self.value(b);
            same_shape("linear", bv.shape(), &[o])?;
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, o], out)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            "linear",
        )
    }

    /// Row-wise L2 normalization of an N x C tensor. Rows with norm below
    /// 1e-12 map to zeros with zero gradient.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c] = xv.dims2("l2_normalize")?;
        let mut out = vec![T::zero(); n * c];
        let mut norms = vec![T::zero(); n];
        for i in 0..n {
            let row = xv.row(i);
            let norm = kernels::dot(row, row).sqrt();
            norms[i] = norm;
            if norm.f64() < 1e-12 {
                if self.norm_checks {
                    return Err(Error::DegenerateNorm);
                }
                continue;
            }
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        self.push(
            Tensor::from_vec(&[n, c], out)?,
            Op::L2Normalize { x: x.0, norms },
            "l2_normalize",
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`, via log-sum-exp.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = lv.dims2("softmax_cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= k) || n == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows of {k} logits, targets {targets:?}"),
            ));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                s += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= s;
            }
            let lse = m + s.ln();
            total += (lse - row[targets[i]]).f64();
        }
        self.push(
            Tensor::scalar(T::of(total / n as f64)),
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
            },
            "softmax_cross_entropy",
        )
    }

    /// `a * b^T` for `a: n x c`, `b: m x c`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, c] = av.dims2("matmul_t")?;
        let [m, c2] = bv.dims2("matmul_t")?;
        if c != c2 {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let out = kernels::matmul_t(av.data(), bv.data(), n, m, c);
        self.push(Tensor::from_vec(&[n, m], out)?, Op::MatMulT(a.0, b.0), "matmul_t")
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let dims = vals
            .iter()
            .map(|v| v.dims2("concat"))
            .collect::<Result<Vec<_>>>()?;
        let keep = 1 - axis;
        if dims.iter().any(|d| d[keep] != dims[0][keep]) {
            return Err(Error::shape("concat", format!("{dims:?} along axis {axis}")));
        }
        let total: usize = dims.iter().map(|d| d[axis]).sum();
        let out = if axis == 0 {
            vals.iter().flat_map(|v| v.data().iter().copied()).collect()
        } else {
            let rows = dims[0][0];
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            out
        };
        let shape = if axis == 0 {
            [total, dims[0][1]]
        } else {
            [dims[0][0], total]
        };
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c] = xv.dims2("slice_rows")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n} rows")));
        }
        let out = xv.data()[start * c..end * c].to_vec();
        self.push(
            Tensor::from_vec(&[end - start, c], out)?,
            Op::SliceRows { x: x.0, start },
            "slice_rows",
        )
    }

    /// Row-wise dot product of two n x c tensors, giving n x 1.
    pub fn rowdot(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("rowdot", av.shape(), bv.shape())?;
        let [n, _] = av.dims2("rowdot")?;
        let out = (0..n).map(|i| kernels::dot(av.row(i), bv.row(i))).collect();
        self.push(Tensor::from_vec(&[n, 1], out)?, Op::RowDot(a.0, b.0), "rowdot")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x.0), "mean")
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x.0), "reshape")
    }

    /// N x C x H x W -> (N*H*W) x C, rows ordered by image, then row-major position.
    pub fn flatten_spatial(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("flatten_spatial")?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out[(b * hw + s) * c + ch] = xv.data()[(b * c + ch) * hw + s];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n * hw, c], out)?,
            Op::FlattenSpatial(x.0),
            "flatten_spatial",
        )
    }

    /// Pools one C-vector per region using separable weights; output R x C.
    pub(crate) fn region_pool(&self, fm: Var, regions: Vec<RegionWeights>) -> Result<Var> {
        let fv = self.value(fm);
        let [n, c, h, w] = fv.dims4("region_pool")?;
        let mut out = vec![T::zero(); regions.len() * c];
        for (r, rw) in regions.iter().enumerate() {
            if rw.batch >= n || rw.r0 + rw.wy.len() > h || rw.c0 + rw.wx.len() > w {
                return Err(Error::shape("region_pool", "region weights outside the map"));
            }
            for ch in 0..c {
                let plane = &fv.data()[(rw.batch * c + ch) * h * w..];
                let mut acc = 0.0f64;
                for (a, &wy) in rw.wy.iter().enumerate() {
                    let row = &plane[(rw.r0 + a) * w + rw.c0..];
                    let mut racc = 0.0f64;
                    for (&wx, &v) in rw.wx.iter().zip(row) {
                        racc += wx * v.f64();
                    }
                    acc += wy * racc;
                }
                out[r * c + ch] = T::of(acc);
            }
        }
        let rows = regions.len();
        self.push(
            Tensor::from_vec(&[rows, c], out)?,
            Op::RegionPool { fm: fm.0, regions },
            "region_pool",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. A graph supports one backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = inner.nodes[loss.0].value.shape().to_vec();
        if inner.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backward_node(nodes, id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn accum<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    idx: usize,
    g: Tensor<T>,
) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants<T>(nodes: &[Node<T>], idx: usize) -> bool {
    nodes[idx].requires_grad
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    gout: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| &*nodes[i].value;
    let g = gout.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let [n, ci, h, wd] = xv.dims4("conv2d")?;
            let [co, _, k, _] = wv.dims4("conv2d")?;
            let [_, _, oh, ow] = gout.dims4("conv2d")?;
            let d = ConvDims {
                n,
                ci,
                h,
                w: wd,
                co,
                k,
                oh,
                ow,
                stride: *stride,
                pad: *pad,
            };
            let (dx, dw) = kernels::conv2d_backward(
                xv.data(),
                wv.data(),
                g,
                &d,
                wants(nodes, *x),
                wants(nodes, *w),
            );
            if let Some(dx) = dx {
                accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            if let Some(dw) = dw {
                accum(nodes, grads, *w, Tensor::from_vec(wv.shape(), dw)?);
            }
        }
        Op::BiasAdd { x, b } => {
            let c = val(*b).numel();
            let inner: usize = gout.shape()[2..].iter().product();
            let mut db = vec![T::zero(); c];
            for (i, &gv) in g.iter().enumerate() {
                db[(i / inner) % c] += gv;
            }
            accum(nodes, grads, *x, gout.clone());
            accum(nodes, grads, *b, Tensor::from_vec(&[c], db)?);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = gout.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let m = T::of((n * inner) as f64);
            let idx = |b: usize, ch: usize, s: usize| (b * c + ch) * inner + s;
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for s in 0..inner {
                        let i = idx(b, ch, s);
                        dbeta[ch] += g[i];
                        dgamma[ch] += g[i] * xhat[i];
                    }
                }
            }
            if wants(nodes, *x) {
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for s in 0..inner {
                            let i = idx(b, ch, s);
                            dx[i] = if *train {
                                scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                accum(nodes, grads, *x, Tensor::from_vec(shape, dx)?);
            }
            accum(nodes, grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
            accum(nodes, grads, *beta, Tensor::from_vec(&[c], dbeta)?);
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let dx = xv
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::Add(a, b) => {
            accum(nodes, grads, *a, gout.clone());
            accum(nodes, grads, *b, gout.clone());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if wants(nodes, *a) {
                let d = bv.data().iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                accum(nodes, grads, *a, Tensor::from_vec(av.shape(), d)?);
            }
            if wants(nodes, *b) {
                let d = av.data().iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                accum(nodes, grads, *b, Tensor::from_vec(bv.shape(), d)?);
            }
        }
        Op::Scale(x, s) => {
            accum(nodes, grads, *x, gout.map(|v| v * *s));
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let [_, _, h, w] = xv.dims4("global_avg_pool")?;
            let inv = T::one() / T::of((h * w) as f64);
            let dx = g
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                .collect();
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::AvgPool { x, k, s } => {
            let xv = val(*x);
            let dx = kernels::avg_pool_backward(g, xv.dims4("avg_pool")?, *k, *s);
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::Upsample2(x) => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4("upsample")?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                let ds = &mut dx[p * h * w..(p + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        ds[(i / 2) * w + j / 2] += gs[i * ow + j];
                    }
                }
            }
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let [n, i] = xv.dims2("linear")?;
            let [o, _] = wv.dims2("linear")?;
            if wants(nodes, *x) {
                let dx = kernels::matmul(g, wv.data(), n, o, i);
                accum(nodes, grads, *x, Tensor::from_vec(&[n, i], dx)?);
            }
            if wants(nodes, *w) {
                let dw = kernels::matmul_tn(g, xv.data(), n, o, i);
                accum(nodes, grads, *w, Tensor::from_vec(&[o, i], dw)?);
            }
            if let Some(b) = b {
                let mut db = vec![T::zero(); o];
                for row in g.chunks(o) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accum(nodes, grads, *b, Tensor::from_vec(&[o], db)?);
            }
        }
        Op::L2Normalize { x, norms } => {
            let y = &*nodes[id].value;
            let [n, c] = y.dims2("l2_normalize")?;
            let mut dx = vec![T::zero(); n * c];
            for r in 0..n {
                if norms[r].f64() < 1e-12 {
                    continue;
                }
                let yr = y.row(r);
                let gr = &g[r * c..(r + 1) * c];
                let proj = kernels::dot(yr, gr);
                for ((d, &yv), &gv) in dx[r * c..(r + 1) * c].iter_mut().zip(yr).zip(gr) {
                    *d = (gv - yv * proj) / norms[r];
                }
            }
            accum(nodes, grads, *x, Tensor::from_vec(&[n, c], dx)?);
        }
        Op::SoftmaxCe {
            logits,
            probs,
            targets,
        } => {
            let n = targets.len();
            let k = probs.len() / n;
            let scale = g[0] / T::of(n as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                d[i * k + t] -= scale;
            }
            accum(nodes, grads, *logits, Tensor::from_vec(&[n, k], d)?);
        }
        Op::MatMulT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let [n, c] = av.dims2("matmul_t")?;
            let [m, _] = bv.dims2("matmul_t")?;
            if wants(nodes, *a) {
                let da = kernels::matmul(g, bv.data(), n, m, c);
                accum(nodes, grads, *a, Tensor::from_vec(&[n, c], da)?);
            }
            if wants(nodes, *b) {
                let db = kernels::matmul_tn(g, av.data(), n, m, c);
                accum(nodes, grads, *b, Tensor::from_vec(&[m, c], db)?);
            }
        }
        Op::Concat { parts, axis } => {
            let [rows, cols] = gout.dims2("concat")?;
            let mut offset = 0;
            for &p in parts {
                let [pr, pc] = val(p).dims2("concat")?;
                if wants(nodes, p) {
                    let d = if *axis == 0 {
                        g[offset * cols..(offset + pr) * cols].to_vec()
                    } else {
                        (0..rows)
                            .flat_map(|i| g[i * cols + offset..i * cols + offset + pc].iter().copied())
                            .collect()
                    };
                    accum(nodes, grads, p, Tensor::from_vec(&[pr, pc], d)?);
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let [_, c] = xv.dims2("slice_rows")?;
            let mut dx = vec![T::zero(); xv.numel()];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::RowDot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let [n, c] = av.dims2("rowdot")?;
            let scaled = |other: &Tensor<T>| -> Vec<T> {
                (0..n * c).map(|i| other.data()[i] * g[i / c]).collect()
            };
            if wants(nodes, *a) {
                accum(nodes, grads, *a, Tensor::from_vec(&[n, c], scaled(bv))?);
            }
            if wants(nodes, *b) {
                accum(nodes, grads, *b, Tensor::from_vec(&[n, c], scaled(av))?);
            }
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accum(nodes, grads, *x, Tensor::full(xv.shape(), g[0]));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let v = g[0] / T::of(xv.numel() as f64);
            accum(nodes, grads, *x, Tensor::full(xv.shape(), v));
        }
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            accum(nodes, grads, *x, gout.clone().reshape(&shape)?);
        }
        Op::FlattenSpatial(x) => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4("flatten_spatial")?;
            let hw = h * w;
            let mut dx = vec![T::zero(); xv.numel()];
            for b in 0..n {
                for ch in 0..c {
                    for s in 0..hw {
                        dx[(b * c + ch) * hw + s] = g[(b * hw + s) * c + ch];
                    }
                }
            }
            accum(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Op::RegionPool { fm, regions } => {
            let fv = val(*fm);
            let [_, c, h, w] = fv.dims4("region_pool")?;
            let mut dx = vec![T::zero(); fv.numel()];
            for (r, rw) in regions.iter().enumerate() {
                for ch in 0..c {
                    let gv = g[r * c + ch].f64();
                    let base = (rw.batch * c + ch) * h * w;
                    for (a, &wy) in rw.wy.iter().enumerate() {
                        let row = base + (rw.r0 + a) * w + rw.c0;
                        for (t, &wx) in rw.wx.iter().enumerate() {
                            dx[row + t] += T::of(gv * wy * wx);
                        }
                    }
                }
            }
            accum(nodes, grads, *fm, Tensor::from_vec(fv.shape(), dx)?);
        }
    }
    Ok(())
}
